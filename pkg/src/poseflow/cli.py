"""Command-line entry point: ``poseflow <subcommand> ...``.

Exit codes: 0 success, 2 usage, 3 missing file, 4 config/schema violation,
5 dimension mismatch, 6 malformed file, 7 training diverged.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, evaluation, flow, rotation
from .errors import (
    ConfigError,
    DivergedError,
    FormatError,
    HyperparameterMismatchError,
    RecordLengthError,
    ShapeError,
)
from .training import TrainConfig, train

EXIT_MISSING, EXIT_SCHEMA, EXIT_DIM, EXIT_FORMAT, EXIT_DIVERGED = 3, 4, 5, 6, 7

LAYOUT_NOTE = (
    "Poses are flat 126-vectors (21 joints x 6D): the first 63 entries hold every "
    "joint's first basis vector (joint j at 3j..3j+2), the last 63 every joint's "
    "second basis vector. Log-densities are in nats."
)


class CliError(Exception):
    def __init__(self, code, kind, msg):
        super().__init__(msg)
        self.code, self.kind = code, kind


def _existing(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(EXIT_MISSING, "missing-file", f"no such file: {path}")
    return p


def _load_json(path):
    try:
        with open(_existing(path)) as f:
            return json.load(f)
    except json.JSONDecodeError as e:
        raise CliError(EXIT_SCHEMA, "schema", f"{path}: invalid JSON ({e})") from None


def _train_config(args) -> TrainConfig:
    d = _load_json(args.config) if getattr(args, "config", None) else {}
    overrides = {
        "max_epochs": args.max_epochs, "seed": args.seed, "lr": args.lr,
        "batch_size": args.batch_size, "patience": args.patience, "dtype": args.dtype,
    }
    if not isinstance(d, dict):
        raise ConfigError("train config must be a JSON object")
    d = dict(d)
    d.update({k: v for k, v in overrides.items() if v is not None})
    if args.no_augment:
        d["use_augmentation"] = False
    return TrainConfig.from_dict(d)


def _write_csv(path, header, rows):
    with (open(path, "w", newline="") if path else contextlib.nullcontext(sys.stdout)) as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v) -> str:
    return repr(float(v))


def cmd_gen_data(args):
    spec = (data.SyntheticGeneratorSpec.from_dict(_load_json(args.spec)) if args.spec
            else data.default_synthetic_spec(args.seed or 0))
    if args.spec and args.seed is not None:
        spec.seed = args.seed
    ds = data.generate_synthetic(spec, args.n)
    data.save_dataset(ds, args.out)
    if args.write_spec:
        spec.save(args.write_spec)


def cmd_train(args):
    cfg = _train_config(args)
    ds = data.load_dataset(_existing(args.data))
    cfg.checkpoint_path = str(args.out)
    handler = None
    if args.log:
        handler = logging.FileHandler(args.log, mode="w")
        handler.setFormatter(logging.Formatter("%(message)s"))
        logging.getLogger("poseflow").addHandler(handler)
        logging.getLogger("poseflow").setLevel(logging.INFO)
    try:
        _, report = train(ds, cfg)
    finally:
        if handler:
            logging.getLogger("poseflow").removeHandler(handler)
            handler.close()
    report_path = args.report or str(Path(args.out).with_suffix(".report.json"))
    report.save(report_path)
    if report.stop_reason == "divergence":
        raise CliError(EXIT_DIVERGED, "diverged",
                       f"training diverged; best epoch {report.best_epoch} kept in {args.out}")


def cmd_sample(args):
    ckpt = data.load_checkpoint(_existing(args.ckpt))
    rng = np.random.default_rng(args.seed)
    x, lp = flow.sample(ckpt.model, args.n, rng)
    header = ["log_prob"] + [f"x{i}" for i in range(ckpt.model.dim)]
    _write_csv(args.out, header, ([_fmt(p)] + [_fmt(v) for v in row] for p, row in zip(lp, x)))


def _read_pose_csv(path, dim):
    rows = []
    with open(_existing(path)) as f:
        reader = csv.reader(f)
        first = next(reader, None)
        if first is None:
            return np.empty((0, dim))
        skip = 0
        if first and first[0].strip() == "log_prob":
            skip = 1
        else:
            try:
                [float(c) for c in first]
                reader = [first] + list(reader)
            except ValueError:
                pass  # some other header line
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            cells = row[skip:]
            if len(cells) != dim:
                raise RecordLengthError(f"{path}:{lineno}: record length {len(cells)}, expected {dim}")
            try:
                rows.append([float(c) for c in cells])
            except ValueError as e:
                raise FormatError(f"{path}:{lineno}: {e}") from None
    return np.array(rows, dtype=np.float64).reshape(-1, dim)


def cmd_logprob(args):
    ckpt = data.load_checkpoint(_existing(args.ckpt))
    model = ckpt.model
    x = _read_pose_csv(args.input, model.dim)
    if x.shape[0] == 0:
        _write_csv(args.out, ["raw_logprob", "ortho_logprob"], [])
        return
    raw = flow.log_prob(model, x).log_prob
    ortho = flow.log_prob(model, rotation.orthonormalize_pose(x, model.dim // 6)).log_prob
    _write_csv(args.out, ["raw_logprob", "ortho_logprob"],
               ([_fmt(r), _fmt(o)] for r, o in zip(raw, ortho)))


def _check_dims(ckpt, ds):
    if ckpt.model.dim != ds.dim:
        raise ShapeError(f"model dimension {ckpt.model.dim} != dataset record length {ds.dim}")


def cmd_eval_ks(args):
    ckpt = data.load_checkpoint(_existing(args.ckpt))
    ds = data.load_dataset(_existing(args.data))
    _check_dims(ckpt, ds)
    cmp = evaluation.density_comparison(ckpt.model, ds, args.n, args.seed)
    with open(args.out, "w") as f:
        json.dump(cmp.summary(), f, indent=2)
    if args.histogram:
        evaluation.write_density_histogram(cmp, args.histogram)


def cmd_eval_marginals(args):
    ckpt = data.load_checkpoint(_existing(args.ckpt))
    ds = data.load_dataset(_existing(args.data))
    _check_dims(ckpt, ds)
    rows = evaluation.marginal_export(ckpt.model, ds, args.joint, args.n, args.seed)
    evaluation.write_marginals(rows, args.out)


def cmd_ablation(args):
    cfg = _train_config(args)
    ds = data.load_dataset(_existing(args.data))
    result = evaluation.ablation_run(ds, cfg, args.n, args.eval_seed)
    summary = args.summary or str(Path(args.out).with_suffix(".summary.json"))
    evaluation.write_ablation(result, args.out, summary)


def _add_train_overrides(p):
    p.add_argument("--config", help="JSON train config; unknown keys are rejected")
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--no-augment", action="store_true",
                   help="train on orthonormal poses without inverse Gram-Schmidt noise")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="poseflow", description="RealNVP pose prior over 6D joint rotations. " + LAYOUT_NOTE)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic pose dataset",
                       description="Sample a synthetic pose dataset from per-joint rotation-vector "
                                   "mixtures and write it as a .pose6d file. " + LAYOUT_NOTE)
    p.add_argument("--spec", help="generator spec JSON (default: built-in 21-joint spec)")
    p.add_argument("--n", type=int, required=True, help="number of poses")
    p.add_argument("--seed", type=int, help="generator seed (overrides the spec's seed)")
    p.add_argument("--out", required=True, help="output .pose6d file")
    p.add_argument("--write-spec", help="also write the generator spec JSON here")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a flow on a dataset",
                       description="Maximum-likelihood training with Adam and early stopping. "
                                   "Losses are negative log-densities in nats per pose. " + LAYOUT_NOTE)
    _add_train_overrides(p)
    p.add_argument("--data", required=True, help=".pose6d dataset")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--report", help="TrainReport JSON (default: <out>.report.json)")
    p.add_argument("--log", help="plain-text progress log (epoch, train NLL, val NLL)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw poses from a trained prior",
                       description="Write CSV rows 'log_prob,x0..x125': the log-density (nats) "
                                   "computed in the sampling pass, then the raw pose. " + LAYOUT_NOTE)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("logprob", help="score poses",
                       description="Read poses from CSV (plain 126 columns, or the output of "
                                   "'sample') and write 'raw_logprob,ortho_logprob' in nats; the "
                                   "second column scores the Gram-Schmidt orthonormalized pose. "
                                   + LAYOUT_NOTE)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="output CSV (default: stdout)")
    p.set_defaults(func=cmd_logprob)

    p = sub.add_parser("eval-ks", help="density-of-densities KS comparison",
                       description="KS statistics between log-densities (nats) of prior samples "
                                   "(raw and orthonormalized) and of data poses. " + LAYOUT_NOTE)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="ks.json")
    p.add_argument("--histogram", help="optional histogram CSV")
    p.set_defaults(func=cmd_eval_ks)

    p = sub.add_parser("eval-marginals", help="per-joint rotation-vector marginals",
                       description="CSV 'source,x,y,z': rotation vectors (radians) of one joint "
                                   "for n prior samples and n data poses. " + LAYOUT_NOTE)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--joint", type=int, required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_marginals)

    p = sub.add_parser("ablation", help="augmentation ablation",
                       description="Train with and without inverse Gram-Schmidt augmentation and "
                                   "write 'model,raw_logprob,ortho_logprob,reference' (nats). "
                                   + LAYOUT_NOTE)
    _add_train_overrides(p)
    p.add_argument("--data", required=True)
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--eval-seed", type=int, default=0)
    p.add_argument("--out", required=True, help="ablation CSV")
    p.add_argument("--summary", help="summary JSON (default: <out>.summary.json)")
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(args.threads)
    try:
        with limiter:
            args.func(args)
    except CliError as e:
        err = e
    except ConfigError as e:
        err = CliError(EXIT_SCHEMA, "schema", str(e))
    except (ShapeError, RecordLengthError, HyperparameterMismatchError) as e:
        err = CliError(EXIT_DIM, "dimension", str(e))
    except FormatError as e:
        err = CliError(EXIT_FORMAT, "format", str(e))
    except DivergedError as e:
        err = CliError(EXIT_DIVERGED, "diverged", str(e))
    else:
        return 0
    print(f"poseflow: error[{err.kind}]: {err}", file=sys.stderr)
    return err.code


if __name__ == "__main__":
    sys.exit(main())
