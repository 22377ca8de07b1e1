"""Command-line entry point: ``stormda <subcommand> [--config FILE] [--key value ...]``.

Exit codes: 0 success, 1 a verification check failed, 2 configuration error,
3 numerical failure, 64 usage error.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import recipes
from .config import RunConfig, RunDir, coerce, load_config
from .errors import ConfigError, StormDAError

log = logging.getLogger("stormda")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NUMERIC, EXIT_USAGE = 0, 1, 2, 3, 64

COMMANDS = ("generate-data", "train", "assimilate", "bench", "bench-scaling", "bench-ensemble",
            "bench-frontier", "verify", "probe-propagation")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stormda", description="Score-based ensemble data assimilation toolkit.")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}", parser_class=_Parser)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="flat key = value config file")
        for f in fields(RunConfig):
            sp.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar=f.type.upper(),
                            default=None)
    return p


def config_from_args(ns) -> RunConfig:
    overrides = {k[4:]: coerce(k[4:], v) for k, v in vars(ns).items() if k.startswith("cfg_") and v is not None}
    return load_config(ns.config, overrides)


# ---------------------------------------------------------------------------
# commands


def cmd_generate_data(cfg: RunConfig) -> int:
    run = RunDir(cfg, "generate-data")
    data = recipes.generate_dataset(cfg)
    for name in recipes.write_dataset(data, run.path):
        run.record(name)
    run.finish()
    print(f"wrote {len(run.files) - 1} containers to {run.path}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    from .denoisers.storm import StormConfig
    from .denoisers.train import (GrfDataset, TrainConfig, load_checkpoint, save_params, train_denoiser)

    run = RunDir(cfg, "train")
    spec = recipes.grid_of(cfg)
    ds = GrfDataset(spec, recipes.grf_of(cfg), cfg.K, recipes.ToyDynamics(cfg.shift, cfg.smooth), cfg.model_noise)
    tcfg = TrainConfig(cfg.steps, cfg.batch_size, cfg.lr, lr_schedule=cfg.lr_schedule, seed=cfg.seed)
    scfg = StormConfig(cfg.n_vars, cfg.patch, cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.n_ctx_tokens)
    ckpt = run / "checkpoint.sdnp"
    state = None
    if cfg.resume and ckpt.exists():
        state, meta = load_checkpoint(ckpt)
        print(f"resuming from step {state.step}")
    res = train_denoiser(ds, tcfg, scfg, state, log_path=run / "train_log.csv", checkpoint_path=ckpt,
                         checkpoint_every=cfg.checkpoint_every)
    save_params(run / "params.sdnp", res.model)
    for name in ("params.sdnp", "checkpoint.sdnp", "train_log.csv"):
        run.record(name)
    run.finish()
    print(f"step {res.state.step}: smoothed loss {res.smoothed_loss:.5f}")
    return EXIT_OK


def cmd_assimilate(cfg: RunConfig) -> int:
    from .ensemble import metrics_csv, metrics_rows
    from .guidance import write_observations
    from .io import write_field

    if cfg.preset == "conjugate":
        rep = recipes.conjugate_check(cfg.members, cfg.obs_fraction, cfg.obs_noise, cfg.n_steps, cfg.seed,
                                      cfg.workers, cfg.ny, cfg.nx, cfg.guidance)
        run = RunDir(cfg, "assimilate")
        run.write_text("conjugate.txt", "\n".join(rep.lines()) + "\n")
        run.finish()
        for line in rep.lines():
            print(line)
        print("conjugate verification: " + ("PASS" if rep.passed else "FAIL"))
        return EXIT_OK if rep.passed else EXIT_FAIL
    run = RunDir(cfg, "assimilate")
    data = recipes.load_dataset(cfg)
    D = recipes.build_denoiser(cfg)
    op = y = None
    if cfg.mode == "posterior":
        op, y = recipes.make_observations(cfg, data.truth)
        write_observations(run / "observations.csv", op, y)
        run.record("observations.csv")
        run.record("observations.csv.json")
    ens = recipes.run_ensemble(cfg, D, data, op, y)
    run.write_text("metrics.csv", metrics_csv(metrics_rows(ens, data.truth, cfg.seed)))
    write_field(run / "ensemble_mean.sdaf", ens.mean()[None])
    run.record("ensemble_mean.sdaf")
    if cfg.save_members:
        for p in ens.dump(run / "members"):
            run.record(Path(p).relative_to(run.path))
    run.meta["ensemble_digest"] = ens.digest()
    run.finish()
    print((run / "metrics.csv").read_text(), end="")
    return EXIT_OK


def _bench_scaling(cfg: RunConfig, run: RunDir) -> int:
    from .bench import harness, plots

    bc = harness.BenchConfig(seed=cfg.seed)
    if cfg.quick:
        bc = harness.BenchConfig(seed=cfg.seed, repeats=1, vit_tokens=(256, 1024, 4096),
                                 tiled_tokens=(10816, 40000))
    recs, slopes = harness.run_scaling_bench(bc, progress=lambda r: log.info("%s %d tokens: %.4g s",
                                                                               r.variant, r.tokens, r.wall_s))
    run.write_text("scaling.csv", harness.records_csv(recs))
    table = "variant,slope\n" + "".join(f"{v},{s:.4f}\n" for v, s in slopes.items())
    run.write_text("slopes.csv", table)
    ks = harness.context_doubling(cfg=harness.BenchConfig(d_model=32, n_layers=2, n_ctx_tokens=16, seed=cfg.seed,
                                                          repeats=1 if cfg.quick else 5))
    run.write_text("context.csv", harness.records_csv(ks))
    run.write_text("kernels.csv", harness.kernel_csv(harness.run_kernel_bench(repeats=1 if cfg.quick else 5)))
    plots.scaling_svg(run / "scaling.csv", run / "scaling.svg")
    run.record("scaling.svg")
    print(table, end="")
    return EXIT_OK


def _bench_ensemble(cfg: RunConfig, run: RunDir) -> int:
    from .bench import harness, plots

    c = cfg.replace(members=1)
    D = recipes.build_denoiser(c)
    data = recipes.generate_dataset(c)
    sched = recipes.schedule_of(c)

    def sampler(state):
        from .diffusion import sample_prior

        return sample_prior(D, data.context, sched, state, c.sampler, spec=data.truth.spec)

    ws = (1, 2) if cfg.quick else (1, 2, 4, 8)
    rows = harness.run_ensemble_bench(sampler, cfg.per_worker, ws, cfg.seed, repeats=1 if cfg.quick else 3)
    run.write_text("ensemble.csv", harness.ensemble_csv(rows))
    plots.ensemble_svg(run / "ensemble.csv", run / "ensemble.svg")
    run.record("ensemble.svg")
    print((run / "ensemble.csv").read_text(), end="")
    return EXIT_OK


def _bench_frontier(cfg: RunConfig, run: RunDir) -> int:
    from .bench import cost, plots

    Ns = [2 ** k for k in range(8, 21)]
    rows = cost.feasibility_frontier(cost.VARIANTS, Ns, (1e12, 1e15), d_model=cfg.d_model, M=cfg.n_ctx_tokens)
    run.write_text("frontier.csv", cost.frontier_csv(rows))
    plots.frontier_svg(run / "frontier.csv", run / "frontier.svg")
    run.record("frontier.svg")
    print(f"{len(rows)} frontier points written to {run / 'frontier.csv'}")
    return EXIT_OK


SUITES = {"scaling": _bench_scaling, "ensemble": _bench_ensemble, "frontier": _bench_frontier}


def cmd_bench(cfg: RunConfig, suite: str | None = None) -> int:
    suite = suite or cfg.suite
    if suite not in SUITES:
        raise UsageError(f"unknown bench suite {suite!r}; choose from {sorted(SUITES)}")
    run = RunDir(cfg, f"bench-{suite}")
    code = SUITES[suite](cfg, run)
    run.finish()
    return code


def cmd_verify(cfg: RunConfig) -> int:
    from .verify import run_suites

    run = RunDir(cfg, "verify")
    results = run_suites(cfg.seed)
    lines = [f"{name}: {'PASS' if ok else 'FAIL'} {detail}" for name, ok, detail in results]
    run.write_text("verify.txt", "\n".join(lines) + "\n")
    run.finish()
    print("\n".join(lines))
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_FAIL


def cmd_probe(cfg: RunConfig) -> int:
    from .tiling import plan_tiles, propagation_radius_probe, ring_step_bound

    if not cfg.core:
        raise ConfigError("probe-propagation needs core > 0")
    run = RunDir(cfg, "probe-propagation")
    data = recipes.load_dataset(cfg)
    D = recipes.build_denoiser(cfg)
    plan = plan_tiles(data.truth.spec, cfg.core, cfg.halo)
    res = propagation_radius_probe(D, plan, recipes.schedule_of(cfg), data.context, cfg.seed, mode=cfg.sampler)
    run.write_text("probe.csv", res.to_csv())
    run.finish()
    reach = res.first_reach()
    print(f"rings reached {sorted(reach)} of {res.n_rings}; first step per ring {reach}; "
          f"ring advance bound per step {ring_step_bound(cfg.core, cfg.halo)}")
    return EXIT_OK


def dispatch(command: str, cfg: RunConfig) -> int:
    if command == "generate-data":
        return cmd_generate_data(cfg)
    if command == "train":
        return cmd_train(cfg)
    if command == "assimilate":
        return cmd_assimilate(cfg)
    if command == "bench":
        return cmd_bench(cfg)
    if command.startswith("bench-"):
        return cmd_bench(cfg, command[len("bench-"):])
    if command == "verify":
        return cmd_verify(cfg)
    if command == "probe-propagation":
        return cmd_probe(cfg)
    raise UsageError(f"unknown subcommand {command!r}")


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SDA_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_usage() + "stormda: error: a subcommand is required")
        cfg = config_from_args(ns)
        return dispatch(ns.command, cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except StormDAError as exc:
        print(f"stormda: {type(exc).__name__}: {exc}", file=sys.stderr)
        return getattr(exc, "exit_code", EXIT_FAIL)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
