"""Command line harness: ``dklinv run`` and ``dklinv validate``."""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, config as cfgmod
from .hmc import HmcConfig, SampleChain, run_hmc, save_diagnostics
from .pde import generate_observations, make_problem, sample_collocation
from .predict import bma_predict, grid, marginal_stats, save_summary
from .pretrain import AdamConfig, LossWeights, PretrainConfig, run_pretraining

log = logging.getLogger("dklinv")

ARTIFACTS = ("observations.csv", "pretrain.json", "chain.csv", "diagnostics.json",
             "summary.json", "field.csv")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_observations(obs, path: Path) -> None:
    dim = obs.S_u.shape[1]
    coords = ["t"] + [f"x{i + 1}" for i in range(dim - 1)]
    rows = [np.column_stack([np.zeros(obs.n_u), obs.S_u, obs.u])]
    if obs.n_f:
        rows.append(np.column_stack([np.ones(obs.n_f), obs.S_f, obs.f]))
    np.savetxt(path, np.vstack(rows), delimiter=",", comments="", fmt="%.17g",
               header=",".join(["kind"] + coords + ["value"]))


def summarize(chain_path: Path, n_phi: int) -> dict:
    """Summary of the phi columns of a chain file."""
    names, draws = SampleChain.read_csv(chain_path)
    return marginal_stats(draws, range(n_phi), names).to_dict()


def run_experiment(cfg: cfgmod.ExperimentConfig, out_dir: Path) -> dict:
    """Generate, pretrain, sample, summarise and predict; returns the manifest."""
    out_dir.mkdir(parents=True, exist_ok=True)
    timings = {}

    def stage(name):
        class _Stage:
            def __enter__(self):
                log.info("stage %s", name)
                self.t = time.perf_counter()

            def __exit__(self, exc_type, exc, tb):
                timings[name] = time.perf_counter() - self.t
                if exc is not None and not isinstance(exc, StageError):
                    raise StageError(name, exc) from exc
        return _Stage()

    with stage("generate"):
        problem = make_problem(cfg["problem"]["name"], cfg.overrides)
        d = cfg["data"]
        obs = generate_observations(problem, d["N_u"], d["N_f"], d["seed"],
                                    d["tau_u2"], d["tau_f2"])
        write_observations(obs, out_dir / "observations.csv")

    with stage("pretrain"):
        p = cfg["pretrain"]
        pcfg = PretrainConfig(
            n_col=p["N_col"], n_iter=p["n_iter"], seed=p["seed"],
            weights=LossWeights(p["w_data"], p["w_PDE"], p["w_GP"]),
            adam=AdamConfig(p["lr"], p["beta1"], p["beta2"], p["eps"]),
            hidden=tuple(p["hidden"]),
            phi_init=None if p["phi_init"] is None else tuple(p["phi_init"]),
            psi_init=None if p["psi_init"] is None else tuple(p["psi_init"]))
        col = sample_collocation(problem, pcfg.n_col, pcfg.seed)
        report = run_pretraining(problem, obs, pcfg, col)
        report.save(out_dir / "pretrain.json")
        log.info("pretrained phi %s", np.array2string(report.phi, precision=4))

    with stage("hmc"):
        h = cfg["hmc"]
        hcfg = HmcConfig(h["n_warmup"], h["n_samples"], h["n_leapfrog"], h["step_size"],
                         h["target_accept"], None if h["mass"] is None else tuple(h["mass"]),
                         h["seed"], h["gradient"], h["step_jitter"])
        chain = run_hmc(obs, (report.arch, report.theta), report.psi, report.phi,
                        problem.prior_bounds, problem.operator, hcfg, problem.param_names)
        chain.to_csv(out_dir / "chain.csv")
        save_diagnostics(chain, out_dir / "diagnostics.json")
        log.info("acceptance %.3f, step size %.3g", chain.acceptance_rate, chain.step_size)

    with stage("summarize"):
        summary = marginal_stats(chain.draws, range(problem.n_phi), chain.names)
        save_summary(summary, out_dir / "summary.json",
                     {"phi_true": list(problem.phi_true), "phi_pre": report.phi.tolist()})
        for i, n in enumerate(summary.names):
            log.info("%s: mean %.5f, 95%% CI [%.5f, %.5f]", n, summary.mean[i],
                     summary.lower[i], summary.upper[i])

    with stage("predict"):
        pts = grid(problem.lower, problem.upper, cfg["predict"]["grid_n"])
        field = bma_predict(chain, obs, (report.arch, report.theta), problem.operator, pts,
                            cfg["predict"]["thinning"])
        field.to_csv(out_dir / "field.csv")

    manifest = {
        "version": __version__,
        "config": cfg.to_dict(),
        "artifacts": {name: _sha256(out_dir / name) for name in ARTIFACTS},
        "wall_clock_seconds": timings,
        "bma_skipped_draws": field.skipped,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def _load_or_exit(path) -> cfgmod.ExperimentConfig:
    try:
        return cfgmod.load(path)
    except cfgmod.ConfigError as err:
        print(f"config error at {err}", file=sys.stderr)
        raise SystemExit(2)
    except OSError as err:
        print(f"cannot read config: {err}", file=sys.stderr)
        raise SystemExit(2)


def cmd_validate(args) -> int:
    cfg = _load_or_exit(args.config)
    print(f"{args.config}: valid")
    if cfg.defaulted:
        print("defaulted fields:")
        for path in cfg.defaulted:
            section, key = path.split(".")
            print(f"  {path} = {cfg[section][key]!r}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_or_exit(args.config)
    if args.seed_override is not None:
        s = args.seed_override
        cfg.values["data"]["seed"] = 3 * s
        cfg.values["pretrain"]["seed"] = 3 * s + 1
        cfg.values["hmc"]["seed"] = 3 * s + 2
    out_dir = Path(args.out_dir or cfg["output"]["dir"])
    try:
        run_experiment(cfg, out_dir)
    except StageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    if not args.quiet:
        print((out_dir / "summary.json").read_text())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dklinv", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run the full two-stage pipeline")
    run.add_argument("--config", required=True)
    run.add_argument("--out-dir", default=None)
    run.add_argument("--seed-override", type=int, default=None,
                     help="derive data/pretrain/hmc seeds 3s, 3s+1, 3s+2")
    run.add_argument("--quiet", action="store_true")
    run.set_defaults(func=cmd_run)
    val = sub.add_parser("validate", help="parse a config and list defaulted fields")
    val.add_argument("--config", required=True)
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
