import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from stormda import cli
from stormda.config import RunConfig, load_config
from stormda.denoisers.train import load_params
from stormda.errors import NumericalError


def run(*args):
    return cli.main([str(a) for a in args])


def _manifest(path):
    return json.loads((path / "manifest.json").read_text())


def _metric_values(path):
    lines = (path / "metrics.csv").read_text().splitlines()[1:]
    return {l.split(",")[0]: float(l.split(",")[1]) for l in lines}, [l.split(",")[3] for l in lines]


# ---------------------------------------------------------------------------
# usage and configuration errors


def test_unknown_subcommand_is_usage_error(capsys):
    assert run("frobnicate") == 64
    assert "usage" in capsys.readouterr().err


def test_missing_subcommand_and_unknown_flag(capsys):
    assert run() == 64
    assert run("verify", "--no-such-flag", "1") == 64


def test_invalid_value_names_field(tmp_path, capsys):
    assert run("train", "--out-dir", tmp_path, "--ny", "0") == 2
    assert "ny" in capsys.readouterr().err
    assert run("train", "--out-dir", tmp_path, "--lr", "fast") == 2
    assert "lr" in capsys.readouterr().err


def test_config_file_with_overrides(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("# toy\nny = 8\nnx = 12  # wide\nsampler = ode\n")
    cfg = load_config(f, {"nx": 4})
    assert (cfg.ny, cfg.nx, cfg.sampler) == (8, 4, "ode")
    f.write_text("ny = 8\nny = 9\n")
    assert run("verify", "--config", f) == 2


def test_config_text_round_trip(tmp_path):
    cfg = RunConfig(ny=8, lr=3e-4, quick=True, guidance="constant")
    (tmp_path / "c.txt").write_text(cfg.to_text())
    assert load_config(tmp_path / "c.txt") == cfg


def test_numerical_failure_exit_code(monkeypatch, capsys):
    def boom(command, cfg):
        raise NumericalError("non-finite activation")

    monkeypatch.setattr(cli, "dispatch", boom)
    assert run("verify") == 3
    assert "NumericalError" in capsys.readouterr().err


def test_module_entry_point_usage():
    out = subprocess.run([sys.executable, "-m", "stormda"], capture_output=True, text=True)
    assert out.returncode == 64


# ---------------------------------------------------------------------------
# generate-data


def test_generate_data_containers_and_manifest(tmp_path):
    out = tmp_path / "d"
    assert run("generate-data", "--out-dir", out, "--ny", 8, "--nx", 8, "--K", 3, "--seed", 4) == 0
    m = _manifest(out)
    containers = [n for n in m["files"] if n.endswith(".sdaf")]
    assert len(containers) == 4
    for name, digest in m["files"].items():
        assert hashlib.sha256((out / name).read_bytes()).hexdigest() == digest
    assert m["seed"] == 4 and "version" in m
    assert (out / "config.txt").read_text() == load_config(out / "config.txt").to_text()


def test_generate_data_is_byte_identical(tmp_path):
    for d in ("a", "b"):
        assert run("generate-data", "--out-dir", tmp_path / d, "--ny", 8, "--nx", 8, "--K", 2, "--seed", 1) == 0
    fa, fb = (_manifest(tmp_path / d)["files"] for d in ("a", "b"))
    data = sorted(n for n in fa if n.endswith(".sdaf"))
    assert data == sorted(n for n in fb if n.endswith(".sdaf"))
    assert all((tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes() for n in data)


# ---------------------------------------------------------------------------
# train


TRAIN = ("--ny", 8, "--nx", 8, "--patch", 2, "--K", 2, "--d-model", 8, "--n-layers", 1, "--n-heads", 2,
         "--n-ctx-tokens", 2, "--batch-size", 4, "--lr", 1e-3)


def test_train_log_and_params(tmp_path):
    out = tmp_path / "t"
    assert run("train", "--out-dir", out, "--steps", 12, *TRAIN) == 0
    lines = (out / "train_log.csv").read_text().splitlines()
    steps = [int(l.split(",")[0]) for l in lines[1:]]
    assert steps == sorted(steps) and len(set(steps)) == len(steps)
    assert "params.sdnp" in _manifest(out)["files"]


class _Interrupt(Exception):
    pass


def test_train_resume_reproduces_uninterrupted(tmp_path, monkeypatch):
    import stormda.denoisers.train as tr

    assert run("train", "--out-dir", tmp_path / "full", "--steps", 12, *TRAIN) == 0
    part = tmp_path / "part"
    save = tr.save_checkpoint

    def save_then_die(path, state, cfg):
        save(path, state, cfg)
        raise _Interrupt

    monkeypatch.setattr(tr, "save_checkpoint", save_then_die)
    with pytest.raises(_Interrupt):
        run("train", "--out-dir", part, "--steps", 12, "--checkpoint-every", 6, *TRAIN)
    monkeypatch.setattr(tr, "save_checkpoint", save)
    assert run("train", "--out-dir", part, "--steps", 12, "--checkpoint-every", 6, "--resume", "true", *TRAIN) == 0
    a = load_params(tmp_path / "full" / "params.sdnp")
    b = load_params(part / "params.sdnp")
    for k, v in a.params.items():
        np.testing.assert_array_equal(v, b.params[k])


# ---------------------------------------------------------------------------
# assimilate


ASSIM = ("--ny", 8, "--nx", 8, "--members", 4, "--n-steps", 10)


def test_zero_observation_fraction_reproduces_prior_metrics(tmp_path):
    assert run("assimilate", "--out-dir", tmp_path / "prior", "--mode", "prior", *ASSIM) == 0
    assert run("assimilate", "--out-dir", tmp_path / "post", "--obs-fraction", 0, *ASSIM) == 0
    prior, tag_a = _metric_values(tmp_path / "prior")
    post, tag_b = _metric_values(tmp_path / "post")
    assert prior == post
    assert set(tag_a) == {"prior"} and set(tag_b) == {"posterior"}


def test_assimilate_save_members_and_reload_data(tmp_path):
    data = tmp_path / "d"
    assert run("generate-data", "--out-dir", data, "--ny", 8, "--nx", 8, "--K", 1) == 0
    out = tmp_path / "a"
    assert run("assimilate", "--out-dir", out, "--data", data, "--K", 1, "--save-members", "true",
               "--core", 4, "--halo", 2, *ASSIM) == 0
    files = _manifest(out)["files"]
    assert sum(n.startswith("members") for n in files) == 4
    assert "observations.csv" in files and "ensemble_mean.sdaf" in files


def test_conjugate_preset_prints_verdict(tmp_path, capsys):
    code = run("assimilate", "--out-dir", tmp_path, "--preset", "conjugate", "--ny", 4, "--nx", 4,
               "--members", 64, "--n-steps", 40)
    out = capsys.readouterr().out
    assert "conjugate verification: " in out
    assert code == (0 if "PASS" in out.splitlines()[-1] else 1)


# ---------------------------------------------------------------------------
# verify, bench, probe


def test_verify_exit_code_reflects_suites(tmp_path, monkeypatch, capsys):
    assert run("verify", "--out-dir", tmp_path / "ok") == 0
    assert all(": PASS" in l for l in capsys.readouterr().out.splitlines())
    import stormda.verify as v

    monkeypatch.setattr(v, "run_suites", lambda seed: [("a", True, ""), ("b", False, "bad")])
    assert run("verify", "--out-dir", tmp_path / "bad") == 1


def test_bench_frontier(tmp_path):
    assert run("bench-frontier", "--out-dir", tmp_path) == 0
    assert (tmp_path / "frontier.csv").read_text().startswith("variant,N,K_max,budget")
    assert (tmp_path / "frontier.svg").read_text().lstrip().startswith("<")


def test_bench_unknown_suite(tmp_path):
    assert run("bench", "--out-dir", tmp_path, "--suite", "nope") == 64


def test_bench_ensemble_quick(tmp_path):
    assert run("bench-ensemble", "--out-dir", tmp_path, "--quick", "true", "--ny", 4, "--nx", 4, "--n-steps", 4,
               "--per-worker", 1) == 0
    lines = (tmp_path / "ensemble.csv").read_text().splitlines()
    assert len(lines) == 3


def test_probe_propagation(tmp_path, capsys):
    assert run("probe-propagation", "--out-dir", tmp_path, "--ny", 16, "--nx", 16, "--core", 4, "--halo", 0,
               "--n-steps", 10) == 0
    assert (tmp_path / "probe.csv").read_text().startswith("step,ring,influence")
    assert "rings reached [0]" in capsys.readouterr().out
    assert run("probe-propagation", "--out-dir", tmp_path) == 2
