"""Command-line experiment runner: ``generate``, ``train``, ``eval`` and ``table``."""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, evaluation, systems, training
from .autodiff import TrainingError
from .filters import FilterDesignError
from .observer import ConfigurationError
from .systems import DataError, IntegrationError, SystemData, Trajectory

OUTPUT_ENV = "KKLHYBRID_OUTPUT"

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


@dataclass
class RunManifest:
    config_path: str
    config: dict
    seeds: list
    artifacts: list = field(default_factory=list)
    version: str = __version__
    wall_clock_seconds: float = 0.0

    def check(self) -> None:
        missing = [a for a in self.artifacts if not Path(a).exists()]
        if missing:
            raise DataError(f"manifest lists missing artifact(s) {missing}")

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True))


def output_root(cli_value: str | None = None) -> Path:
    return Path(cli_value or os.environ.get(OUTPUT_ENV, "."))


# ------------------------------------------------------------------ generate

def cmd_generate(args) -> int:
    spec = systems.default_spec(args.system, seed=args.seed,
                                **({"noise_var": args.noise_var} if args.noise_var is not None else {}))
    sd = systems.generate(spec, args.csv)
    out = output_root(args.out) / "data" / f"system_{args.system}_seed{args.seed}"
    out.mkdir(parents=True, exist_ok=True)
    write_system_csvs(sd, out)
    print(out)
    return EXIT_OK


def write_system_csvs(sd: SystemData, directory: Path) -> None:
    t = sd.data.times
    cols = {"t": t}
    for k in range(sd.data.dim):
        cols[f"y{k}" if sd.data.dim > 1 else "y"] = sd.data.values[:, k]
    for k in range(sd.truth.dim):
        cols[f"y_true{k}" if sd.truth.dim > 1 else "y_true"] = sd.truth.values[:, k]
    systems.write_csv(directory / "data.csv", cols)
    sim = {"t": sd.sim.times}
    for k in range(sd.sim.dim):
        sim[f"s{k}" if sd.sim.dim > 1 else "s"] = sd.sim.values[:, k]
    systems.write_csv(directory / "sim.csv", sim)
    meta = {"spec": asdict(sd.spec), "extras": {k: list(v) for k, v in sd.extras.items()}}
    (directory / "system.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_system_csvs(directory: Path) -> SystemData:
    """Inverse of :func:`write_system_csvs`."""
    directory = Path(directory)
    meta_path = directory / "system.json"
    if not meta_path.exists():
        raise DataError(f"{directory}: missing system.json")
    meta = json.loads(meta_path.read_text())
    spec = systems.SystemSpec(**meta["spec"])
    header = (directory / "data.csv").read_text().splitlines()[0].split(",")
    ycols = [h for h in header if h.startswith("y") and not h.startswith("y_true")]
    tcols = [h for h in header if h.startswith("y_true")]
    sim_header = (directory / "sim.csv").read_text().splitlines()[0].split(",")
    data = systems.ingest_csv(directory / "data.csv", ycols)
    truth = systems.ingest_csv(directory / "data.csv", tcols)
    sim = systems.ingest_csv(directory / "sim.csv", [h for h in sim_header if h != "t"])
    extras = {k: tuple(v) for k, v in meta.get("extras", {}).items()}
    return SystemData(data, sim, truth, spec, extras)


# --------------------------------------------------------------------- train

def _run_name(config_path: str) -> str:
    return Path(config_path).stem


def cmd_train(args) -> int:
    cfg = training.load_config(args.config)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds)) if args.seed_list is None else args.seed_list
    root = output_root(args.out) / cfg.output_dir / _run_name(args.config)
    for seed in seeds:
        t0 = time.perf_counter()
        run_cfg = cfg.with_seed(seed)
        if args.steps is not None:
            run_cfg.train_steps = args.steps
        result = training.train(run_cfg)
        out = root / f"seed{seed}"
        out.mkdir(parents=True, exist_ok=True)
        ckpt, hist = out / "checkpoint.json", out / "history.csv"
        training.save_checkpoint(result, ckpt)
        training.write_history(result.history, hist)
        if result.collisions:
            print(f"warning: eigenvalue collisions at {len(result.collisions)} step(s)", file=sys.stderr)
        manifest = RunManifest(str(args.config), run_cfg.to_dict(), [seed], [str(ckpt), str(hist)],
                               wall_clock_seconds=time.perf_counter() - t0)
        manifest.check()
        manifest.write(out / "manifest.json")
        last = result.history[-1]["loss"] if result.history else float("nan")
        print(f"{out}\tloss={last:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------- eval

def cmd_eval(args) -> int:
    ckpt_path = Path(args.checkpoint)
    ck = training.load_checkpoint(ckpt_path)
    cfg = ck.config
    sd = read_system_csvs(args.data) if args.data else training.load_system(cfg)
    sim = ck.sim_input
    if len(sim) != len(sd.data):
        raise DataError(f"simulator input has {len(sim)} samples but data has {len(sd.data)}")
    out_dir = Path(args.out) if args.out else ckpt_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    report, out = evaluation.evaluate(cfg.model, ck.params, sd, sim, cfg.warmup, cfg.to_dict())
    report.extra = {"system": cfg.system_id, "family": cfg.model.family, "seed": cfg.seed}
    if args.drop_sim:
        start, length = args.drop_sim
        res = evaluation.buffering_ablation(cfg.model, ck.params, sd, sim, cfg.warmup, start, length)
        report.extra["buffering"] = {"rmse_full": res.rmse_full, "rmse_gapped": res.rmse_gapped,
                                     "gap_start": start, "gap_length": length,
                                     "relative_increase": res.relative_increase}
    metrics_path, rollout_path = out_dir / "metrics.json", out_dir / "rollout.csv"
    metrics_path.write_text(report.to_json(include_runtime=args.runtime))
    evaluation.write_rollout_csv(out, sd, sim, rollout_path)
    print(f"rmse={report.rmse:.6g}\t{metrics_path}")
    return EXIT_OK


# --------------------------------------------------------------------- table

def _collect(run_dir: Path) -> list[dict]:
    files = sorted(run_dir.glob("metrics.json")) + sorted(run_dir.glob("*/metrics.json"))
    if not files:
        raise DataError(f"{run_dir}: no metrics.json found")
    return [json.loads(f.read_text()) for f in files]


def build_table(run_dirs) -> list[dict]:
    cells = defaultdict(list)
    for d in run_dirs:
        rows = _collect(Path(d))
        keys = {(r.get("extra", {}).get("system"), r.get("extra", {}).get("family")) for r in rows}
        if len(keys) != 1:
            raise DataError(f"{d}: mixes runs from {sorted(map(str, keys))}")
        cells[keys.pop()].extend(r["rmse"] for r in rows)
    table = []
    for (system, family), values in sorted(cells.items(), key=lambda kv: tuple(map(str, kv[0]))):
        mean, std = evaluation.aggregate(values)
        table.append({"system": system, "family": family, "runs": len(values), "mean": mean, "std": std})
    return table


def format_table(table: list[dict], fmt: str) -> str:
    if fmt == "csv":
        lines = ["system,family,runs,mean,std"]
        lines += [f"{r['system']},{r['family']},{r['runs']},{r['mean']!r},{r['std']!r}" for r in table]
    else:
        lines = ["| system | family | runs | RMSE |", "|---|---|---|---|"]
        lines += [f"| {r['system']} | {r['family']} | {r['runs']} | {r['mean']:.3f} ({r['std']:.3f}) |"
                  for r in table]
    return "\n".join(lines) + "\n"


def cmd_table(args) -> int:
    text = format_table(build_table(args.run_dirs), args.format)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------- main

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kklhybrid", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write data.csv and sim.csv for a benchmark system")
    g.add_argument("--system", required=True, choices=systems.SYSTEM_IDS)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise-var", type=float)
    g.add_argument("--csv", help="measured series for the torsion/drill-string stand-ins")
    g.add_argument("--out", help=f"output root (default ${OUTPUT_ENV} or .)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a configuration over one or more seeds")
    t.add_argument("config", help="TOML config or preset name")
    t.add_argument("--seeds", type=int, default=1)
    t.add_argument("--seed-list", type=int, nargs="+")
    t.add_argument("--steps", type=int, help="override the configured number of steps")
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="full-horizon evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="directory written by 'generate' (default: regenerate from config)")
    e.add_argument("--drop-sim", type=int, nargs=2, metavar=("START", "LENGTH"))
    e.add_argument("--runtime", action="store_true", help="include wall-clock runtime in metrics.json")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    tb = sub.add_parser("table", help="aggregate metrics as mean (std)")
    tb.add_argument("run_dirs", nargs="+")
    tb.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    tb.add_argument("--out")
    tb.set_defaults(func=cmd_table)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FilterDesignError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, IntegrationError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
