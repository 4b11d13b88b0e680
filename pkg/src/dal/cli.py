"""Command line: ``dal generate | train | eval | inspect | report``.

Settings come from an optional flat ``key=value`` file (``--config``), then
from ``--key value`` flags, which win.  Every command that writes outputs also
writes the resolved settings next to them as ``config.txt``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .data import (
    Checkpoint,
    SyntheticConfig,
    generate_synthetic,
    load_checkpoint,
    load_features,
    save_checkpoint,
)
from .errors import ConfigError, DALError, DimensionMismatch, MissingLabels
from .evaluation import EvalReport, association_rate, evaluate_reps, pool_tracklets, true_match_rate_or_none
from .training import MetricsRow, RunConfig, Trainer, embed_all

log = logging.getLogger("dal")

METRICS_HEADER = ["iter", "loss_I", "loss_C", "loss_total", "assoc_rate", "true_match_rate"]
EVAL_HEADER = ["iter", "map", "assoc_rate", "true_match_rate", "rank1", "rank5", "rank10", "rank20"]
CHECKPOINT_NAME = "checkpoint.dalc"
METRICS_NAME = "metrics.csv"
CONFIG_NAME = "config.txt"


# -- key=value configuration ----------------------------------------------


def read_config_file(path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value
    return out


def _coerce(name: str, text: str, default):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            parts = [p for p in text.replace(" ", "").split(",") if p]
            return tuple(int(p) for p in parts)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            value = float(text)
            if not math.isfinite(value):
                raise ValueError(text)
            return value
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def _format(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def resolve(cls, file_values: dict[str, str], overrides: dict[str, str], ignore=()):
    """Build a dataclass from defaults, then file values, then overrides."""
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for source in (file_values, overrides):
        for key, text in source.items():
            if key in ignore:
                continue
            if key not in known:
                raise ConfigError(f"unknown setting {key!r}")
            kwargs[key] = _coerce(key, text, getattr(defaults, key))
    return dataclasses.replace(defaults, **kwargs)


def write_config(path, obj, extra: dict | None = None) -> None:
    lines = [f"{f.name} = {_format(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {_format(value)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# generate-only keys that may share a config file with train
_GENERATE_FIELDS = {f.name for f in dataclasses.fields(SyntheticConfig)} | {"frames_min", "frames_max", "output_dir"}
_TRAIN_FIELDS = set(RunConfig.field_names())


def _flag_values(args, names) -> dict[str, str]:
    return {n: v for n in names if (v := getattr(args, n, None)) is not None}


# -- subcommands -----------------------------------------------------------


def cmd_generate(args) -> int:
    values = read_config_file(args.config) if args.config else {}
    values = {k: v for k, v in values.items() if k not in _TRAIN_FIELDS - _GENERATE_FIELDS}
    flags = _flag_values(args, _GENERATE_FIELDS)
    merged = {**values, **flags}
    out_dir = Path(merged.pop("output_dir", "data"))
    lo = merged.pop("frames_min", None)
    hi = merged.pop("frames_max", None)
    cfg = resolve(SyntheticConfig, {}, merged)
    if lo is not None or hi is not None:
        base = cfg.frames_per_tracklet
        cfg = dataclasses.replace(
            cfg,
            frames_per_tracklet=(
                _coerce("frames_min", lo, 0) if lo is not None else base[0],
                _coerce("frames_max", hi, 0) if hi is not None else base[1],
            ),
        )
    cfg.validate()
    ds = generate_synthetic(cfg, out_dir)
    write_config(out_dir / CONFIG_NAME, cfg, {"output_dir": out_dir})
    print(f"wrote {ds.n_frames} frames, {sum(ds.sizes)} tracklets over {ds.n_cameras} cameras to {out_dir}")
    return 0


def _metrics_line(row: MetricsRow) -> list[str]:
    tm = "" if row.true_match_rate is None else repr(row.true_match_rate)
    return [str(row.iteration), repr(row.loss_I), repr(row.loss_C), repr(row.loss_total), repr(row.assoc_rate), tm]


def train_config(args) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    values = {k: v for k, v in values.items() if k not in _GENERATE_FIELDS - _TRAIN_FIELDS}
    cfg = resolve(RunConfig, values, _flag_values(args, _TRAIN_FIELDS))
    if not cfg.features or not cfg.manifest:
        raise ConfigError("features and manifest paths are required")
    cfg.validate()
    return cfg


def cmd_train(args) -> int:
    cfg = train_config(args)
    ds = load_features(cfg.features, cfg.manifest)
    table = ds.unlabelled()
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / CONFIG_NAME, cfg)

    if args.resume:
        trainer = Trainer.from_checkpoint(table, cfg, load_checkpoint(args.resume))
    else:
        trainer = Trainer.create(table, cfg)

    monitor = None
    if ds.has_labels:
        ids = ds.tracklet_identities()
        monitor = lambda bank: true_match_rate_or_none(bank, ids)  # noqa: E731

    metrics_path = out / METRICS_NAME
    append = bool(args.resume) and metrics_path.exists()
    with open(metrics_path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if not append:
            writer.writerow(METRICS_HEADER)

        def on_row(row: MetricsRow) -> None:
            writer.writerow(_metrics_line(row))
            fh.flush()
            log.info("iter %d loss %.4f assoc %.3f", row.iteration, row.loss_total, row.assoc_rate)

        stop = cfg.max_iter if args.until is None else min(args.until, cfg.max_iter)
        trainer.run(stop, monitor, on_row)

    save_checkpoint(out / CHECKPOINT_NAME, trainer.checkpoint())
    print(f"trained {trainer.iteration} iterations; association rate {association_rate(trainer.bank):.4f}")
    print(f"checkpoint: {out / CHECKPOINT_NAME}")
    return 0


def evaluate_checkpoint(ck: Checkpoint, ds) -> EvalReport:
    if not ds.has_labels:
        raise MissingLabels("manifest has no identity_id column; evaluation needs identities")
    if ck.head.d_in != ds.dim:
        raise DimensionMismatch(f"checkpoint head expects dim {ck.head.d_in}, dataset has {ds.dim}")
    if list(ck.bank.sizes) != list(ds.sizes):
        raise DimensionMismatch(f"checkpoint anchors cover tracklets {ck.bank.sizes}, dataset has {list(ds.sizes)}")
    emb = embed_all(ck.head, ds.features)
    ids = ds.tracklet_identities()
    cmc, mAP = evaluate_reps(pool_tracklets(emb, ds.cameras, ds.tracklets, ds.sizes), ids)
    return EvalReport(cmc, mAP, association_rate(ck.bank), true_match_rate_or_none(ck.bank, ids), ck.iteration)


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    report = evaluate_checkpoint(ck, load_features(args.features, args.manifest))
    tm = "undefined" if report.true_match_rate is None else f"{report.true_match_rate:.4f}"
    print(f"iteration      {report.iteration}")
    for r in (1, 5, 10, 20):
        print(f"rank-{r:<9d} {report.rank(r):.4f}")
    print(f"mAP            {report.map:.4f}")
    print(f"assoc rate     {report.association_rate:.4f}")
    print(f"true-match     {tm}")
    if args.output:
        with open(args.output, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(EVAL_HEADER)
            w.writerow(
                [report.iteration, repr(report.map), repr(report.association_rate),
                 "" if report.true_match_rate is None else repr(report.true_match_rate)]
                + [repr(report.rank(r)) for r in (1, 5, 10, 20)]
            )
    return 0


def inspect_summary(ck: Checkpoint) -> str:
    bank = ck.bank
    lines = [
        f"iteration: {ck.iteration}",
        f"precision: {ck.precision}",
        f"head: {ck.head.kind} {ck.head.d_in}->{ck.head.d_out}"
        + (f" hidden {ck.head.hidden}" if ck.head.kind == "onehidden" else ""),
        f"parameter count: {ck.head.n_params}",
    ]
    for name, arr in zip(_param_names(ck.head.kind), ck.head.unpack() if ck.head.n_params else ()):
        lines.append(f"  ||{name}|| = {float(np.linalg.norm(arr)):.6g}")
    lines.append(f"optimizer step: {ck.optimizer.t}, lr {ck.optimizer.schedule.rate(ck.optimizer.t):.6g}")
    lines.append(f"update rate: {bank.eta}")
    lines.append("anchors per camera: " + " ".join(f"N_{k}={n}" for k, n in enumerate(bank.sizes)))
    lines.append("merge state:")
    for k in range(bank.n_cameras):
        pc = bank.peer_camera[k]
        peers = {int(c): int((pc == c).sum()) for c in np.unique(pc) if c >= 0}
        detail = ", ".join(f"camera {c}: {n}" for c, n in sorted(peers.items())) or "none"
        lines.append(f"  camera {k}: merged {int((pc >= 0).sum())}, unmerged {int((pc < 0).sum())} (peers: {detail})")
    total = sum(bank.sizes)
    lines.append(f"merged anchors: {bank.merged_count()} of {total}")
    lines.append(f"association rate: {association_rate(bank):.6f}")
    return "\n".join(lines)


def _param_names(kind: str) -> tuple[str, ...]:
    return {"identity": (), "linear": ("W", "b"), "onehidden": ("W1", "b1", "W2", "b2")}[kind]


def cmd_inspect(args) -> int:
    print(inspect_summary(load_checkpoint(args.checkpoint)))
    return 0


REPORT_HEADER = ["run", "iter", "assoc_rate", "true_match_rate", "loss_I", "loss_C", "loss_total"]


def read_metrics(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != METRICS_HEADER:
            raise ConfigError(f"{path}: not a metrics file (header {reader.fieldnames})")
        rows = list(reader)
    iters = [int(r["iter"]) for r in rows]
    if any(b <= a for a, b in zip(iters, iters[1:])):
        raise ConfigError(f"{path}: iterations are not increasing")
    return rows


def cmd_report(args) -> int:
    """Long-format curves (one row per run and iteration) for external plotting."""
    out = open(args.output, "w", newline="", encoding="utf-8") if args.output else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for run in args.runs:
            path = Path(run)
            if path.is_dir():
                path = path / METRICS_NAME
            name = path.parent.name or str(path.parent)
            for r in read_metrics(path):
                w.writerow([name, r["iter"], r["assoc_rate"], r["true_match_rate"], r["loss_I"], r["loss_C"], r["loss_total"]])
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


# -- argument parsing ------------------------------------------------------


def _add_fields(parser, defaults, names=None, skip=()):
    for f in dataclasses.fields(defaults):
        if f.name in skip or (names is not None and f.name not in names):
            continue
        default = getattr(defaults, f.name)
        parser.add_argument(f"--{f.name}", dest=f.name, metavar=type(default).__name__.upper(),
                            help=f"default: {_format(default)}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dal", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-camera dataset")
    g.add_argument("--config")
    g.add_argument("--output_dir", "-o")
    _add_fields(g, SyntheticConfig(), skip={"frames_per_tracklet"})
    g.add_argument("--frames_min")
    g.add_argument("--frames_max")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="run association training")
    t.add_argument("--config")
    t.add_argument("--resume", help="continue from this checkpoint")
    t.add_argument("--until", type=int, help="stop (and checkpoint) at this iteration; the schedule still spans max_iter")
    _add_fields(t, RunConfig())
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="CMC/mAP and association metrics of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--features", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--output", "-o", help="also write a one-row CSV")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("inspect", help="summarise a checkpoint")
    i.add_argument("checkpoint")
    i.set_defaults(func=cmd_inspect)

    r = sub.add_parser("report", help="merge metrics files into a plotting CSV")
    r.add_argument("runs", nargs="+", help="run directories or metrics.csv files")
    r.add_argument("--output", "-o")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except DALError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: IOError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
