"""
Command-line entry point: ``adm <command> [options]``.

Exit statuses: 0 success, 2 configuration error, 3 data error,
4 numerical failure.  ``ADM_LOG`` sets the log level (default WARNING).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import io as adm_io
from .gp_oracle import BenchmarkConfig, run_parity_benchmark
from .inference import (
    ScanCounter,
    observation_loglik,
    parallel_filter,
    parallel_smoother,
    seq_filter,
    seq_smoother,
)
from .kernels import KINDS
from .learning import fit
from .model import ModelError, TrialSet, two_region_preset

logger = logging.getLogger("adm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 0, 2, 3, 4

PRESETS = {"synthetic-2region": two_region_preset}


class UsageError(adm_io.ConfigError):
    pass


def _setup_logging():
    name = os.environ.get("ADM_LOG", "WARNING").upper()
    level = int(name) if name.isdigit() else logging.getLevelName(name)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _run_config(args) -> adm_io.RunConfig:
    cfg = adm_io.load_config(args.config) if args.config else adm_io.RunConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.preset is not None:
        cfg.preset = args.preset
    if getattr(args, "out", None):
        cfg.output_dir = Path(args.out)
    if cfg.preset is not None and cfg.preset not in PRESETS:
        raise UsageError(f"unknown preset {cfg.preset!r}; known: {sorted(PRESETS)}")
    return cfg


def _load_data(cfg: adm_io.RunConfig, data_arg=None) -> TrialSet:
    if data_arg:
        return adm_io.load_dataset(data_arg)
    if cfg.data_path is not None:
        return adm_io.load_dataset(cfg.data_path)
    if cfg.preset is not None:
        truth = PRESETS[cfg.preset](cfg.seed)
        data, _ = truth.simulate(cfg.n_trials, seed=cfg.seed)
        return data
    raise UsageError("no data: give --data, a [data] path in the config, or --preset")


def _outdir(cfg) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _run_config(args)
    if cfg.preset is None:
        raise UsageError("simulate needs --preset or [data] preset in the config")
    n_trials = args.trials if args.trials is not None else cfg.n_trials
    truth = PRESETS[cfg.preset](cfg.seed)
    data, _ = truth.simulate(n_trials, seed=cfg.seed)
    out = _outdir(cfg)
    adm_io.save_dataset(data, out / "dataset.adm1")
    adm_io.save_model(truth, out / "truth.json")
    rows = []
    for t in range(truth.layout.n_steps):
        row = {"t": t}
        for g, grp in enumerate(truth.across):
            for i in range(1, truth.layout.n_regions):
                row[f"group{g}_d{i}"] = repr(float(grp.delays[t, i]))
        rows.append(row)
    adm_io.write_tsv(rows, out / "truth_delays.tsv")
    print(f"wrote {data.n_trials} trials ({data.y.shape[1]} channels x {data.n_steps} bins) to {out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _run_config(args)
    data = _load_data(cfg, args.data)
    train, val, test = adm_io.split_trials(data.n_trials, cfg.split, cfg.seed)
    fcfg = cfg.fit_config(workers=args.threads)
    model, trace = fit(data.subset(train), fcfg)
    out = _outdir(cfg)
    adm_io.save_model(model, out / "model.json")
    adm_io.write_trace(trace, out / "trace.tsv")
    adm_io.write_trace(trace, out / "trace_timing.tsv", timing=True)
    adm_io.write_json(
        {"seed": cfg.seed, "split": list(cfg.split), "train": train.tolist(), "validation": val.tolist(), "test": test.tolist()},
        out / "split.json",
    )
    print(f"fit finished after {trace.n_iters} iterations (converged={trace.converged}); model in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    data = _load_data(cfg, args.data)
    model = adm_io.load_model(args.model)
    lay = model.layout
    if tuple(data.region_dims) != lay.region_dims or data.n_steps != lay.n_steps:
        raise adm_io.DimMismatchError(
            f"model expects regions {lay.region_dims} x {lay.n_steps} bins, data has "
            f"{data.region_dims} x {data.n_steps}"
        )
    seeds = args.seeds if args.seeds else [cfg.seed]
    ssm = model.to_ssm()
    per_seed = []
    for s in seeds:
        _, _, test = adm_io.split_trials(data.n_trials, cfg.split, s)
        if test.size == 0:
            raise adm_io.ConfigError(f"seed {s}: the split leaves no test trials")
        ll = observation_loglik(ssm, data.subset(test).time_major())
        per_seed.append({"seed": s, "n_test_trials": int(test.size), "plugin": ll.plugin, "marginal": ll.marginal})
    metrics = {
        "seeds": list(seeds),
        "per_seed": per_seed,
        "mean": {
            "plugin": float(np.mean([r["plugin"] for r in per_seed])),
            "marginal": float(np.mean([r["marginal"] for r in per_seed])),
        },
    }
    out = _outdir(cfg)
    adm_io.write_json(metrics, out / "metrics.json")
    print(f"plug-in {metrics['mean']['plugin']:.6g}  marginal {metrics['mean']['marginal']:.6g}")
    return EXIT_OK


def cmd_gpbench(args) -> int:
    cfg = _run_config(args)
    kinds = args.kinds or list(KINDS)
    seeds = args.seeds or list(range(5))
    table = run_parity_benchmark(seeds, kinds, BenchmarkConfig(), workers=args.threads)
    out = _outdir(cfg)
    rows = table.rows()
    adm_io.write_tsv(
        rows[1:], out / "gpbench.tsv", header=rows[0],
        comments=[f"benchmark config version {table.config.version}", f"seeds {seeds}"],
    )
    for r in rows:
        print("\t".join(r))
    return EXIT_OK


def cmd_export_network(args) -> int:
    cfg = _run_config(args)
    model = adm_io.load_model(args.model)
    steps = args.timesteps if args.timesteps else range(model.layout.n_steps)
    try:
        rows = adm_io.network_edges(model, steps)
    except IndexError as exc:
        raise UsageError(str(exc)) from None
    out = _outdir(cfg)
    adm_io.write_network(rows, out / "network.tsv")
    print(f"wrote {len(rows)} edges to {out / 'network.tsv'}")
    return EXIT_OK


def scan_depth_report(lengths=(100, 200, 400, 600), n_trials: int = 4, workers: int = 1, seed: int = 0):
    """Time sequential and parallel filter+smoother on the two-region model."""
    rows = []
    for t_len in lengths:
        model = two_region_preset(seed, n_steps=t_len)
        data, _ = model.simulate(n_trials, seed=seed)
        ssm, y = model.to_ssm(), data.time_major()
        t0 = time.perf_counter()
        seq_smoother(ssm, seq_filter(ssm, y))
        t_seq = time.perf_counter() - t0
        fc, sc = ScanCounter(), ScanCounter()
        t0 = time.perf_counter()
        parallel_smoother(ssm, parallel_filter(ssm, y, counter=fc, workers=workers), counter=sc, workers=workers)
        t_par = time.perf_counter() - t0
        expected = int(np.ceil(np.log2(t_len)))
        rows.append({"T": t_len, "method": "sequential", "seconds": t_seq, "filter_levels": "", "smoother_levels": "", "expected_levels": ""})
        rows.append({"T": t_len, "method": "parallel", "seconds": t_par, "filter_levels": fc.levels, "smoother_levels": sc.levels, "expected_levels": expected})
    return rows


def cmd_perf(args) -> int:
    cfg = _run_config(args)
    rows = scan_depth_report(args.lengths, args.trials, args.threads, cfg.seed)
    out = _outdir(cfg)
    adm_io.write_tsv(
        rows, out / "perf.tsv",
        comments=[f"hardware threads available: {os.cpu_count()}; workers used: {args.threads}"],
    )
    for r in rows:
        print("\t".join(str(v) for v in r.values()))
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def _nonneg_int(text):
    v = int(text)
    if v < 0 or v >= 2**64:
        raise argparse.ArgumentTypeError("must be an unsigned 64-bit integer")
    return v


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="TOML run configuration")
    common.add_argument("--seed", type=_nonneg_int, help="overrides the config seed")
    common.add_argument("--threads", type=_pos_int, default=1, help="worker threads")
    common.add_argument("--preset", help="built-in dataset/model preset (synthetic-2region)")
    common.add_argument("--out", help="output directory (overrides the config)")

    parser = argparse.ArgumentParser(prog="adm", description="Adaptive delay model tools")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="simulate a preset dataset")
    p.add_argument("--trials", type=_pos_int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", parents=[common], help="fit a model on the training split")
    p.add_argument("--data", type=Path)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("eval", parents=[common], help="test log-likelihood of a fitted model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path)
    p.add_argument("--seeds", type=_nonneg_int, nargs="+")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gpbench", parents=[common], help="exact GP vs SSM parity table")
    p.add_argument("--kinds", nargs="+", choices=sorted(KINDS))
    p.add_argument("--seeds", type=_nonneg_int, nargs="+")
    p.set_defaults(func=cmd_gpbench)

    p = sub.add_parser("export-network", parents=[common], help="delay network edge list")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--timesteps", type=int, nargs="+")
    p.set_defaults(func=cmd_export_network)

    p = sub.add_parser("perf", parents=[common], help="sequential vs parallel timing")
    p.add_argument("--lengths", type=_pos_int, nargs="+", default=[100, 200, 400, 600])
    p.add_argument("--trials", type=_pos_int, default=4)
    p.set_defaults(func=cmd_perf)
    return parser


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except adm_io.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (adm_io.FormatError, ModelError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
