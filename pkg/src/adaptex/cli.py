"""Operator command line: simulations, bandit benchmarks, and serving.

Every run writes a manifest (subcommand, resolved configuration, seed, output
directory, tool version) before any computation output, so results are
reproducible from the manifest alone. Exit codes: 0 success, 1 runtime
failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .inference import ViConfig
from .model import PriorSpec
from .objectives import DurationModel, SampleBudget
from .policies import StoppingConfig
from .simulation import (
    BanditEnv,
    BanditPolicy,
    OracleDataset,
    average_regret,
    best_arm_identification,
    exploitation_probability,
    generate_synthetic_oracle,
    policy_regret,
    run_adaptive_testing_sim,
    run_treatment_sim,
    time_saved_estimate,
)

DEFAULT_HORIZONS = {"A": 500, "B": 1000}


class UsageError(Exception):
    pass


def _write_manifest(out_dir: Path, subcommand: str, config: dict, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": seed,
        "out_dir": str(out_dir),
        "tool_version": __version__,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        n, m = text.lower().split("x")
        return int(n), int(m)
    except ValueError:
        raise UsageError(f"expected a grid like 200x15, got {text!r}")


def cmd_simulate_testing(args) -> int:
    out_dir = Path(args.out)
    prior = PriorSpec(
        theta_sd=args.prior_theta_sd, delta_sd=args.prior_delta_sd, b_sd=args.prior_b_sd
    )
    if args.oracle is not None:
        oracle_path = Path(args.oracle)
        if not oracle_path.exists():
            raise UsageError(f"oracle file not found: {oracle_path}")
        oracle = OracleDataset.from_jsonl(oracle_path)
    else:
        n, m = _parse_grid(args.synthetic)
        gen_prior = PriorSpec(
            theta_sd=args.gen_theta_sd, delta_sd=args.gen_delta_sd, b_sd=args.gen_b_sd
        )
        oracle = generate_synthetic_oracle(
            gen_prior, n, m, args.seed, with_durations=args.slow_gamma > 0
        )
        if not args.default_prior:
            prior = gen_prior  # well-specified replay unless told otherwise
    config = vars(args).copy()
    config.pop("func", None)
    _write_manifest(out_dir, "simulate-testing", config, args.seed)

    stop = StoppingConfig(epsilon=args.epsilon, min_trials=args.min_trials)
    budget = SampleBudget(n_outer=args.n_outer, n_inner=args.n_inner, s_util=args.n_outer)
    cfg = ViConfig(
        step_count=args.vi_steps,
        learning_rate=args.vi_lr,
        mc_samples_per_step=args.vi_mc,
        seed=args.seed,
    )

    report = run_adaptive_testing_sim(
        oracle, stop, budget, cfg, prior=prior, max_trials=args.max_trials
    )
    (out_dir / "report.json").write_text(report.to_json(), encoding="utf-8")
    _write_csv(
        out_dir / "trials_per_participant.csv",
        ["participant", "trials"],
        list(enumerate(report.trials_per_participant.tolist())),
    )
    truth = oracle.truth.delta.tolist() if oracle.truth is not None else [""] * oracle.n_items
    _write_csv(
        out_dir / "item_frequency.csv",
        ["item_id", "true_difficulty", "posterior_difficulty_mean", "frequency"],
        [
            (j, truth[j], report.posterior.delta_mean[j], int(report.item_frequencies[j]))
            for j in range(oracle.n_items)
        ],
    )
    _write_csv(
        out_dir / "efe_composition.csv",
        ["step", "participant", "chosen", "eig", "utility", "efe"],
        [
            (d["step"], d["participant"], d["chosen"], d["eig"], d["utility"], d["efe"])
            for d in report.decisions
            if d["chosen"] is not None
        ],
    )
    if args.slow_gamma > 0:
        dm = DurationModel.from_prior(
            oracle.n_items, sigma_tau=args.sigma_tau, gamma_slow=args.slow_gamma
        )
        saved = time_saved_estimate(
            oracle, dm, stop, budget, cfg, args.seed, prior=prior, max_trials=args.max_trials
        )
        _write_csv(
            out_dir / "time_saved.csv",
            ["mean_s_per_trial", "ci_lo", "ci_hi", "n_steps"],
            [(saved.mean, saved.ci_lo, saved.ci_hi, len(saved.diffs))],
        )
    print(
        f"simulate-testing: {oracle.n_participants} participants, "
        f"mean trials {report.trials_per_participant.mean():.2f}/{oracle.n_items}, "
        f"mean IG {report.mean_information_gain:.3f}"
    )
    return 0


@dataclass(frozen=True)
class _BenchCell:
    setup: str
    k: int
    policy: str
    gamma: float
    horizon: int
    runs: int
    seed: int
    mc_samples: int


def _run_bench_cell(cell: _BenchCell):
    ident, pol_regret, avg_regret, exploit = [], [], [], []
    policy = BanditPolicy(name=cell.policy, gamma=cell.gamma, mc_samples=cell.mc_samples)
    setup_key = {"A": 0, "B": 1}[cell.setup]
    for run in range(cell.runs):
        # paired environments: the reward draw depends only on (setup, k, run)
        env_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=cell.seed, spawn_key=(setup_key, cell.k, run))
        )
        env = BanditEnv.sample(cell.setup, cell.k, env_rng)
        report = run_treatment_sim(env, policy, cell.horizon, seed=_policy_seed(cell, run))
        ident.append(best_arm_identification(report, env))
        pol_regret.append(policy_regret(report, env))
        avg_regret.append(average_regret(report, env))
        exploit.append(exploitation_probability(report))
    return cell, {
        "identification_rate": ident,
        "policy_regret": pol_regret,
        "average_regret": avg_regret,
        "exploitation_probability": exploit,
    }


def _policy_seed(cell: _BenchCell, run: int) -> int:
    key = f"{cell.setup}/{cell.k}/{cell.policy}/{cell.gamma}"
    digest = sum(ord(c) * (i + 1) for i, c in enumerate(key))
    return int(
        np.random.SeedSequence(entropy=cell.seed, spawn_key=(digest % 65521, run)).generate_state(1)[0]
    )


def _mean_ci(values):
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    half = 1.96 * float(arr.std(ddof=1)) / np.sqrt(len(arr)) if len(arr) > 1 else 0.0
    return mean, mean - half, mean + half


def cmd_bench_bandits(args) -> int:
    out_dir = Path(args.out)
    config = vars(args).copy()
    config.pop("func", None)
    _write_manifest(out_dir, "bench-bandits", config, args.seed)

    setups = [s.strip().upper() for s in args.setups.split(",") if s.strip()]
    arms = [int(k) for k in args.arms.split(",")]
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    gammas = [float(g) for g in args.gamma.split(",")]

    cells = []
    for setup in setups:
        if setup not in DEFAULT_HORIZONS:
            raise UsageError(f"unknown setup {setup!r}; expected A or B")
        horizon = args.horizon or DEFAULT_HORIZONS[setup]
        for k in arms:
            for policy in policies:
                cell_gammas = gammas if policy == "active-inference" else [0.0]
                for gamma in cell_gammas:
                    cells.append(
                        _BenchCell(
                            setup=setup,
                            k=k,
                            policy=policy,
                            gamma=gamma,
                            horizon=horizon,
                            runs=args.runs,
                            seed=args.seed,
                            mc_samples=args.mc_samples,
                        )
                    )

    if args.parallel > 1:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            results = list(pool.map(_run_bench_cell, cells))
    else:
        results = [_run_bench_cell(cell) for cell in cells]

    metrics = ["identification_rate", "policy_regret", "average_regret", "exploitation_probability"]
    for metric in metrics:
        rows = []
        for cell, values in results:
            mean, lo, hi = _mean_ci(values[metric])
            rows.append((cell.setup, cell.k, cell.policy, cell.gamma, cell.horizon, mean, lo, hi))
        _write_csv(
            out_dir / f"{metric}.csv",
            ["setup", "k", "policy", "gamma", "horizon", "mean", "ci_lo", "ci_hi"],
            rows,
        )
    print(f"bench-bandits: wrote {len(metrics)} metric tables for {len(cells)} cells to {out_dir}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import ServiceConfig, create_app

    config = ServiceConfig.load(args.config)
    if args.port is not None:
        config.port = args.port
    if args.data_dir is not None:
        config.data_dir = Path(args.data_dir)
    if args.host is not None:
        config.host = args.host
    config.data_dir.mkdir(parents=True, exist_ok=True)
    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptex", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate-testing", help="replay the adaptive-testing design on an oracle")
    source = sim.add_mutually_exclusive_group()
    source.add_argument("--oracle", help="oracle JSONL file (complete response grid)")
    source.add_argument("--synthetic", default="200x15", help="generate an NxM synthetic oracle")
    sim.add_argument("--epsilon", type=float, default=0.01)
    sim.add_argument("--min-trials", type=int, default=1)
    sim.add_argument("--max-trials", type=int, default=None)
    sim.add_argument("--gen-theta-sd", type=float, default=2.0)
    sim.add_argument("--gen-delta-sd", type=float, default=8.0)
    sim.add_argument("--gen-b-sd", type=float, default=1.0)
    sim.add_argument("--prior-theta-sd", type=float, default=2.0)
    sim.add_argument("--prior-delta-sd", type=float, default=1.0)
    sim.add_argument("--prior-b-sd", type=float, default=1.0)
    sim.add_argument(
        "--default-prior", action="store_true",
        help="keep the --prior-* inference prior even for synthetic oracles",
    )
    sim.add_argument("--n-outer", type=int, default=512)
    sim.add_argument("--n-inner", type=int, default=512)
    sim.add_argument("--vi-steps", type=int, default=80)
    sim.add_argument("--vi-lr", type=float, default=0.05)
    sim.add_argument("--vi-mc", type=int, default=8)
    sim.add_argument("--slow-gamma", type=float, default=0.0, help="penalize slow items (0 = off)")
    sim.add_argument("--sigma-tau", type=float, default=20.0)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate_testing)

    bench = sub.add_parser("bench-bandits", help="policy x setup x arm-count benchmark grid")
    bench.add_argument("--setups", default="A,B")
    bench.add_argument("--arms", default="5,10,30")
    bench.add_argument(
        "--policies", default="uniform,thompson,exploration,active-inference"
    )
    bench.add_argument("--gamma", default="0.1,0.2,0.3")
    bench.add_argument("--runs", type=int, default=300)
    bench.add_argument("--horizon", type=int, default=None, help="override per-setup default horizon")
    bench.add_argument("--mc-samples", type=int, default=512)
    bench.add_argument("--parallel", type=int, default=1)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--out", required=True)
    bench.set_defaults(func=cmd_bench_bandits)

    serve = sub.add_parser("serve", help="run the live session service")
    serve.add_argument("--config", default=None, help="service config JSON")
    serve.add_argument("--port", type=int, default=None)
    serve.add_argument("--host", default=None)
    serve.add_argument("--data-dir", default=None)
    serve.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # runtime failure
        print(f"failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
