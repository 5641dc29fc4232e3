"""Command-line entry point: synthetic generation, fitting, prediction,
evaluation, and normality diagnostics, with run-directory persistence.

Every command is deterministic given its flags; seeds always come from the
flags or the stored config.  Run directories hold five files: config.json,
trace.csv, samples_states.csv, samples_inducing.csv, model.ckpt.  Exit
codes: 0 success, 1 usage, 2 data, 3 numerical.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import evaluation as eval_mod
from . import objective as obj
from .errors import DataError, FfvdError, NumericalError
from .model import Trajectory, load_checkpoint, save_checkpoint
from .samplers import Draw, FitConfig, SampleStore, SghmcConfig, VARIANTS, fit

TRACE_HEADER = ["iter", "log_target", "train_loglik"]
STATES_HEADER = ["sample", "t", "dim", "value"]
INDUCING_HEADER = ["sample", "dim", "m", "value"]
PRED_HEADER = ["t", "dim", "mean", "std"]
NORMALITY_HEADER = ["quantity", "t_or_m", "dim", "k2", "p"]

RUN_FILES = (
    "config.json",
    "trace.csv",
    "samples_states.csv",
    "samples_inducing.csv",
    "model.ckpt",
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path, header):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        got = next(reader, None)
        if got != header:
            raise DataError(f"{path}: expected header {header}, got {got}")
        return [row for row in reader if row]


def _parse_seeds(text: str):
    if ".." in text:
        lo, hi = text.split("..", 1)
        try:
            lo, hi = int(lo), int(hi)
        except ValueError:
            raise UsageError(f"bad seed range {text!r}") from None
        if hi < lo:
            raise UsageError(f"bad seed range {text!r}")
        return list(range(lo, hi + 1))
    try:
        return [int(s) for s in text.split(",")]
    except ValueError:
        raise UsageError(f"bad seed list {text!r}") from None


def _sniff_csv_dims(path):
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh), None)
    except OSError as exc:
        raise DataError(f"cannot open {path}: {exc}") from exc
    if not header:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in header]
    d_y = sum(1 for h in header if h.startswith("y"))
    d_a = sum(1 for h in header if h.startswith("a"))
    if d_y == 0 or d_y + d_a != len(header):
        raise DataError(f"{path}: header {header} does not match the dataset schema")
    return d_y, d_a


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset, truth = data_mod.generate_synthetic(args.seed)
    data_mod.save_csv(dataset, out / "data.csv")
    rows = [
        [t, k, _fmt(truth.trajectory.states[t, k])]
        for t in range(truth.trajectory.states.shape[0])
        for k in range(truth.trajectory.states.shape[1])
    ]
    _write_csv(out / "truth_states.csv", ["t", "dim", "value"], rows)
    config = data_mod.synthetic_config(args.seed)
    config["u"] = truth.u.tolist()
    with open(out / "truth_config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote synthetic dataset (seed {args.seed}) to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _resolved_fit_config(args) -> dict:
    cfg = {}
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
    def pick(name, default=None):
        flag = getattr(args, name, None)
        if flag is not None:
            return flag
        return cfg.get(name, default)

    resolved = {
        "variant": pick("variant"),
        "data": pick("data"),
        "train_len": pick("train_len"),
        "d_y": pick("d_y"),
        "d_a": pick("d_a"),
        "d_x": pick("d_x", 4),
        "M": pick("M", 100),
        "iters": pick("iters", 50000),
        "burn_in": pick("burn_in"),
        "thin": pick("thin"),
        "n_samples": pick("n_samples", 100),
        "step_size": pick("step_size", 0.01),
        "friction": pick("friction", 0.05),
        "mass": pick("mass", 1.0),
        "n_particles": pick("n_particles", 32),
        "adam_lr": pick("adam_lr", 0.01),
        "adam_decay": pick("adam_decay", 0.05),
        "learn_hypers": pick("learn_hypers", True),
        "standardize": pick("standardize", True),
        "shift_controls": pick("shift_controls", False),
        "seed": pick("seed", 0),
    }
    if resolved["variant"] is None:
        raise UsageError(f"--variant is required; choose from {list(VARIANTS)}")
    if resolved["variant"] not in VARIANTS:
        raise UsageError(
            f"unknown variant {resolved['variant']!r}; choose from {list(VARIANTS)}"
        )
    if resolved["data"] is None:
        raise UsageError("--data is required")
    if resolved["train_len"] is None:
        raise UsageError("--train-len is required")
    if resolved["burn_in"] is None:
        resolved["burn_in"] = resolved["iters"] // 2
    if resolved["thin"] is None:
        keep = max(1, resolved["iters"] - resolved["burn_in"])
        resolved["thin"] = max(1, keep // resolved["n_samples"])
    return resolved


def _load_dataset(cfg) -> data_mod.Dataset:
    d_y, d_a = cfg.get("d_y"), cfg.get("d_a")
    if d_y is None or d_a is None:
        sniffed = _sniff_csv_dims(cfg["data"])
        d_y = sniffed[0] if d_y is None else d_y
        d_a = sniffed[1] if d_a is None else d_a
    dataset = data_mod.load_csv(
        cfg["data"], d_y=d_y, d_a=d_a, train_len=cfg["train_len"],
        shift_controls=cfg["shift_controls"],
    )
    if cfg["standardize"]:
        dataset = data_mod.standardize(dataset)
    return dataset


def write_store_csvs(store: SampleStore, run_dir: Path):
    state_rows = []
    inducing_rows = []
    for s, draw in enumerate(store.draws):
        states = draw.states
        for t in range(states.shape[0]):
            for k in range(states.shape[1]):
                state_rows.append([s, t, k, _fmt(states[t, k])])
        v = draw.v
        for k in range(v.shape[0]):
            for m in range(v.shape[1]):
                inducing_rows.append([s, k, m, _fmt(v[k, m])])
    _write_csv(run_dir / "samples_states.csv", STATES_HEADER, state_rows)
    _write_csv(run_dir / "samples_inducing.csv", INDUCING_HEADER, inducing_rows)


def load_store(run_dir: Path) -> SampleStore:
    state_rows = _read_csv(run_dir / "samples_states.csv", STATES_HEADER)
    inducing_rows = _read_csv(run_dir / "samples_inducing.csv", INDUCING_HEADER)
    if not state_rows:
        raise DataError(f"{run_dir}/samples_states.csv has no rows")
    n_s = max(int(r[0]) for r in state_rows) + 1
    n_t = max(int(r[1]) for r in state_rows) + 1
    d_x = max(int(r[2]) for r in state_rows) + 1
    states = np.zeros((n_s, n_t, d_x))
    for r in state_rows:
        states[int(r[0]), int(r[1]), int(r[2])] = float(r[3])
    M = max(int(r[2]) for r in inducing_rows) + 1
    v = np.zeros((n_s, d_x, M))
    for r in inducing_rows:
        v[int(r[0]), int(r[1]), int(r[2])] = float(r[3])
    store = SampleStore(variant="", config={})
    for s in range(n_s):
        store.draws.append(
            Draw(state={"states": states[s], "v": v[s]}, log_target=0.0, iteration=s)
        )
    return store


def run_fit_single(cfg: dict, run_dir: Path) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    dataset = _load_dataset(cfg)
    sghmc = SghmcConfig(
        step_size=cfg["step_size"],
        friction=cfg["friction"],
        n_iters=cfg["iters"],
        burn_in=cfg["burn_in"],
        thin=cfg["thin"],
        mass=cfg["mass"],
        seed=cfg["seed"],
    )
    fit_cfg = FitConfig(
        variant=cfg["variant"],
        d_x=cfg["d_x"],
        M=cfg["M"],
        sghmc=sghmc,
        n_particles=cfg["n_particles"],
        adam_lr=cfg["adam_lr"],
        adam_decay=cfg["adam_decay"],
        learn_hypers=cfg["learn_hypers"],
        seed=cfg["seed"],
    )
    rng = np.random.default_rng(cfg["seed"])
    model, store, trace = fit(dataset, cfg["variant"], fit_cfg, rng)
    record = dict(cfg)
    record["d_y"] = dataset.d_y
    record["d_a"] = dataset.d_a
    with open(run_dir / "config.json", "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_csv(
        run_dir / "trace.csv",
        TRACE_HEADER,
        [[it, _fmt(lt), _fmt(ll)] for it, lt, ll in trace],
    )
    write_store_csvs(store, run_dir)
    save_checkpoint(model, run_dir / "model.ckpt")
    return run_dir


def cmd_fit(args) -> int:
    cfg = _resolved_fit_config(args)
    out = Path(args.out)
    if args.seeds:
        seeds = _parse_seeds(args.seeds)
        max_workers = int(os.environ.get("FFVD_THREADS", "0")) or min(
            len(seeds), os.cpu_count() or 1
        )
        jobs = []
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for seed in seeds:
                sub = dict(cfg)
                sub["seed"] = seed
                jobs.append(pool.submit(run_fit_single, sub, out / f"seed-{seed}"))
            for job in jobs:
                job.result()
        print(f"wrote {len(seeds)} runs under {out}")
    else:
        run_fit_single(cfg, out)
        print(f"wrote run to {out}")
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------

def _load_run(run_dir: Path):
    run_dir = Path(run_dir)
    missing = [f for f in RUN_FILES if not (run_dir / f).exists()]
    if missing:
        raise DataError(f"run directory {run_dir} is missing {missing}")
    with open(run_dir / "config.json", encoding="utf-8") as fh:
        cfg = json.load(fh)
    model = load_checkpoint(run_dir / "model.ckpt")
    store = load_store(run_dir)
    return cfg, model, store


def cmd_predict(args) -> int:
    if args.horizon < 1:
        raise UsageError("--horizon must be at least 1")
    run_dir = Path(args.run)
    cfg, model, store = _load_run(run_dir)
    dataset = _load_dataset(cfg)
    horizon = args.horizon
    controls_future = None
    if dataset.d_a > 0:
        if dataset.train_len + horizon > dataset.T:
            raise DataError(
                f"dataset provides only {dataset.test_len} future control rows, "
                f"horizon {horizon} requested"
            )
        controls_future = dataset.a[dataset.train_len: dataset.train_len + horizon]
    rng = np.random.default_rng(args.seed)
    summary = eval_mod.rollout_predict(model, store, controls_future, horizon, rng)
    if dataset.standardization is not None:
        summary = data_mod.unstandardize_predictions(summary, dataset.standardization)
    out = Path(args.out) if args.out else run_dir / "pred.csv"
    rows = [
        [cfg["train_len"] + 1 + h, k, _fmt(summary.means[h, k]), _fmt(summary.stds[h, k])]
        for h in range(horizon)
        for k in range(summary.means.shape[1])
    ]
    _write_csv(out, PRED_HEADER, rows)
    print(f"wrote {horizon}-step predictions to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _eval_single(run_dir: Path):
    run_dir = Path(run_dir)
    with open(run_dir / "config.json", encoding="utf-8") as fh:
        cfg = json.load(fh)
    pred_path = run_dir / "pred.csv"
    if not pred_path.exists():
        raise DataError(f"{pred_path} not found; run `ffvd predict` first")
    rows = _read_csv(pred_path, PRED_HEADER)
    t_vals = sorted({int(r[0]) for r in rows})
    d_y = max(int(r[1]) for r in rows) + 1
    horizon = len(t_vals)
    pred = np.zeros((horizon, d_y))
    t_index = {t: i for i, t in enumerate(t_vals)}
    for r in rows:
        pred[t_index[int(r[0])], int(r[1])] = float(r[2])
    raw_cfg = dict(cfg)
    raw_cfg["standardize"] = False
    dataset = _load_dataset(raw_cfg)
    lo = cfg["train_len"]
    if lo + horizon > dataset.T:
        raise DataError(
            f"dataset has {dataset.T - lo} test rows but predictions cover {horizon}"
        )
    truth = dataset.y[lo: lo + horizon]
    value = eval_mod.rmse(pred, truth)
    return value, horizon, cfg


def cmd_eval(args) -> int:
    if args.seeds:
        if not (args.runs_root or args.run):
            raise UsageError("--runs-root (or --run) is required with --seeds")
        root = Path(args.runs_root or args.run)
        seeds = _parse_seeds(args.seeds)
        values = []
        cfg = None
        horizon = None
        for seed in seeds:
            value, horizon, cfg = _eval_single(root / f"seed-{seed}")
            values.append(value)
        mean = float(np.mean(values))
        std = float(np.std(values))
        print(f"{mean:.6f} ± {std:.6f}")
        metrics = {
            "rmse_mean": mean,
            "rmse_std": std,
            "per_seed": {str(s): v for s, v in zip(seeds, values)},
            "horizon": horizon,
            "variant": cfg["variant"],
            "seeds": seeds,
        }
        out = root / "metrics.json"
    else:
        if not args.run:
            raise UsageError("--run is required")
        value, horizon, cfg = _eval_single(Path(args.run))
        print(f"{value:.6f}")
        metrics = {
            "rmse": value,
            "horizon": horizon,
            "variant": cfg["variant"],
            "seed": cfg["seed"],
        }
        out = Path(args.run) / "metrics.json"
    with open(out, "w", encoding="utf-8") as fh:
        json.dump(metrics, fh, indent=1, sort_keys=True)
        fh.write("\n")
    return 0


# ---------------------------------------------------------------------------
# normtest
# ---------------------------------------------------------------------------

def cmd_normtest(args) -> int:
    run_dir = Path(args.run)
    cfg, model, store = _load_run(run_dir)
    report = eval_mod.normality_sweep(store, model=model)
    out = Path(args.out) if args.out else run_dir / "normality.csv"
    rows = [
        [r.quantity, r.index, r.dim, _fmt(r.k2), _fmt(r.p)] for r in report.rows
    ]
    _write_csv(out, NORMALITY_HEADER, rows)
    print(
        f"rejection fraction at p<0.05: states "
        f"{report.state_rejection_fraction:.4f}, inducing "
        f"{report.inducing_rejection_fraction:.4f}"
    )
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="ffvd", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("synth", help="generate the synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a variant to a dataset CSV")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--data")
    p.add_argument("--train-len", dest="train_len", type=int)
    p.add_argument("--d-y", dest="d_y", type=int)
    p.add_argument("--d-a", dest="d_a", type=int)
    p.add_argument("--d-x", dest="d_x", type=int)
    p.add_argument("--m", dest="M", type=int)
    p.add_argument("--iters", type=int)
    p.add_argument("--burn-in", dest="burn_in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--n-samples", dest="n_samples", type=int)
    p.add_argument("--step-size", dest="step_size", type=float)
    p.add_argument("--friction", type=float)
    p.add_argument("--mass", type=float)
    p.add_argument("--n-particles", dest="n_particles", type=int)
    p.add_argument("--adam-lr", dest="adam_lr", type=float)
    p.add_argument("--adam-decay", dest="adam_decay", type=float)
    p.add_argument("--no-learn-hypers", dest="learn_hypers",
                   action="store_false", default=None)
    p.add_argument("--no-standardize", dest="standardize",
                   action="store_false", default=None)
    p.add_argument("--shift-controls", dest="shift_controls",
                   action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", help="seed range a..b or comma list; fans out")
    p.add_argument("--config", help="base config.json to resolve flags from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", help="free-simulate from a fitted run")
    p.add_argument("--run", required=True)
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="RMSE of predictions against held-out data")
    p.add_argument("--run")
    p.add_argument("--runs-root", dest="runs_root")
    p.add_argument("--seeds")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("normtest", help="normality tests on posterior draws")
    p.add_argument("--run", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_normtest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 3
    except FfvdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
