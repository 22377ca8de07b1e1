"""SVG figures rendered from the benchmark CSVs."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def scaling_svg(csv_path, out_path) -> None:
    rows = [r for r in _read(csv_path) if r["wall_s"] not in ("capped", "nan")]
    fig, ax = plt.subplots(figsize=(5, 4))
    for v in sorted({r["variant"] for r in rows}):
        pts = sorted((int(r["tokens"]), float(r["wall_s"])) for r in rows if r["variant"] == v)
        ax.loglog(*zip(*pts), marker="o", label=v)
    ax.set_xlabel("tokens")
    ax.set_ylabel("wall time per call [s]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def frontier_svg(csv_path, out_path) -> None:
    rows = _read(csv_path)
    fig, ax = plt.subplots(figsize=(5, 4))
    for key in sorted({(r["variant"], r["budget"]) for r in rows}):
        pts = sorted((int(r["N"]), int(r["K_max"])) for r in rows if (r["variant"], r["budget"]) == key)
        ax.loglog(*zip(*pts), marker=".", label=f"{key[0]} @ {float(key[1]):.1e}")
    ax.set_xlabel("spatial tokens N")
    ax.set_ylabel("max context frames K")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def ensemble_svg(csv_path, out_path) -> None:
    rows = _read(csv_path)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot([int(r["workers"]) for r in rows], [float(r["ratio"]) for r in rows], marker="o")
    ax.axhline(1.25, ls="--", c="gray")
    ax.set_xlabel("workers (members scale with workers)")
    ax.set_ylabel("wall-time ratio to one worker")
    fig.tight_layout()
    fig.savefig(out_path, format="svg")
    plt.close(fig)


def render_all(directory) -> list[str]:
    d = Path(directory)
    made = []
    for name, fn in (("scaling", scaling_svg), ("frontier", frontier_svg), ("ensemble", ensemble_svg)):
        src = d / f"{name}.csv"
        if src.exists():
            fn(src, d / f"{name}.svg")
            made.append(str(d / f"{name}.svg"))
    return made
