"""``talon`` command line: train, eval, zeroshot, analyze, ablate, synth.

Exit codes: 0 success, 1 runtime error, 2 usage or configuration error. Errors are
written to stderr as a single JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import bench
from .checkpoint import CheckpointError, load_checkpoint, model_from_state, save_checkpoint, state_from_model
from .config import (
    SWITCHES,
    ConfigError,
    RunConfig,
    load_synth_spec,
    run_config_from_kv,
)
from .series import CsvSchema, MultivariateSeries, SeriesError, chronological_split, load_csv, synth_generate, write_csv

log = logging.getLogger("talon")

CKPT_NAME = "model.tlnc"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ----------------------------------------------------------------------- helpers


def _threads(cli_value: int | None, config_value: int = 1) -> int:
    env = os.environ.get("TALON_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"bad TALON_THREADS value {env!r}") from exc
    return max(1, cli_value or config_value)


def _horizons(text: str) -> tuple[int, ...]:
    try:
        hs = tuple(int(h) for h in text.split(",") if h.strip())
    except ValueError as exc:
        raise ConfigError(f"bad horizons {text!r}") from exc
    if not hs or min(hs) < 1:
        raise ConfigError(f"bad horizons {text!r}")
    return hs


def _switch_list(text: str) -> list[str]:
    names = [s.strip() for s in text.split(",") if s.strip()]
    for s in names:
        for part in s.split("+"):
            if part not in SWITCHES:
                raise ConfigError(f"unknown switch {part!r}", {"switch": part})
    return names


def load_series(run: RunConfig) -> tuple[MultivariateSeries, np.ndarray | None, str]:
    """Data source of a run: CSV or synthetic spec. Returns (series, regime labels, dataset name)."""
    if run.csv:
        schema = CsvSchema(run.date_column, run.value_columns)
        return load_csv(run.csv, schema), None, Path(run.csv).stem
    if run.synth:
        spec, seed = load_synth_spec(run.synth)
        series, labels = synth_generate(spec, seed)
        return series, labels, Path(run.synth).stem
    raise ConfigError("config needs data.csv or data.synth")


def split(run: RunConfig, series: MultivariateSeries):
    return chronological_split(series, counts=run.split_counts, fractions=run.split_fractions)


def _run_from_ckpt(state) -> RunConfig:
    raw = state.extra.get("run_config_kv")
    run = run_config_from_kv(raw) if raw else RunConfig()
    run.model = state.config
    return run


def _data_series(path: str, run: RunConfig) -> tuple[MultivariateSeries, str]:
    return load_csv(path, CsvSchema(run.date_column, run.value_columns)), Path(path).stem


def _eval_split(series: MultivariateSeries, run: RunConfig, which: str, use_counts: bool = True) -> MultivariateSeries:
    if which == "all":
        return series
    if not use_counts:
        # an unseen target has its own length; split it by fractions
        return chronological_split(series, fractions=run.split_fractions)[2]
    return split(run, series)[2]


def _out_dirs(out: str) -> tuple[Path, Path]:
    root = Path(out)
    return root / "reports", root / "ckpt"


# ---------------------------------------------------------------------- commands


def cmd_train(args) -> int:
    kv = _read_kv(args.config)
    run = run_config_from_kv(kv)
    if args.out:
        run.out = args.out
    torch.set_num_threads(_threads(args.threads, run.threads))
    series, _, name = load_series(run)
    tr, va, _ = split(run, series)
    result = bench.train_on_series(run.model, tr, va, stride=run.train_stride)
    reports, ckpts = _out_dirs(run.out)
    build = bench.build_id()
    extra = {"run_config": run.to_dict(), "run_config_kv": kv, "build": build, "dataset": name}
    save_checkpoint(state_from_model(result.model, result.rng_state, result.steps, extra), ckpts / CKPT_NAME)
    write_loss_curve(result.curve, reports / "loss_curve.csv")
    _emit({"checkpoint": str(ckpts / CKPT_NAME), "steps": result.steps, "best_val": result.best_val})
    return 0


def write_loss_curve(curve, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = ["step", "L", "L_MSE", "L_MoE", "L_align", "val_MSE"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in curve:
            w.writerow([row[c] if isinstance(row[c], (int, str)) else repr(row[c]) for c in cols])


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    run = _run_from_ckpt(state)
    torch.set_num_threads(_threads(args.threads, run.threads))
    horizons = _horizons(args.horizons) if args.horizons else run.horizons
    series, name = _data_series(args.data, run)
    if args.protocol == "one-for-all":
        model = model_from_state(state)
        reports = bench.rolling_eval(model, _eval_split(series, run, args.split), horizons, name).reports
    else:
        tr, va, te = split(run, series)
        reports = bench.one_for_one(run.model, tr, va, te, horizons, name, stride=run.train_stride)
    return _write(reports, args.out or run.out, f"eval-{args.protocol}-{name}", state, run)


def cmd_zeroshot(args) -> int:
    state = load_checkpoint(args.ckpt)
    run = _run_from_ckpt(state)
    torch.set_num_threads(_threads(args.threads, run.threads))
    horizons = _horizons(args.horizons) if args.horizons else run.horizons
    series, name = _data_series(args.target, run)
    source = state.extra.get("dataset", "source")
    model = model_from_state(state)
    reports = bench.zero_shot_eval(model, _eval_split(series, run, args.split, use_counts=False), horizons, source, name).reports
    return _write(reports, args.out or run.out, f"zeroshot-{source}-{name}", state, run)


def cmd_analyze(args) -> int:
    state = load_checkpoint(args.ckpt)
    run = _run_from_ckpt(state)
    torch.set_num_threads(_threads(args.threads, run.threads))
    series, name = _data_series(args.data, run)
    labels = _read_labels(args.labels) if args.labels else None
    model = model_from_state(state)
    reports_dir = Path(args.out or run.out) / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    meta = {"run_config": run.to_dict(), "build": bench.build_id(), "dataset": name}
    if args.what == "experts":
        hist = bench.expert_distribution(model, series, labels)
        payload = {**meta, "overall": hist.overall, "counts": hist.counts,
                   "per_regime": {str(k): v for k, v in hist.per_regime.items()}}
        path = reports_dir / f"experts-{name}.json"
        path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    else:
        dump = reports_dir / f"embeddings-{name}.csv"
        rep = bench.embedding_distance(model, series, args.max_windows, dump_path=dump)
        payload = {**meta, "mean_l2": rep.mean_l2, "mean_cosine": rep.mean_cosine, "n_tokens": rep.n_tokens,
                   "normalized": rep.normalized, "dump": str(dump)}
        path = reports_dir / f"embeddings-{name}.json"
        path.write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    _emit({"report": str(path)})
    return 0


def cmd_ablate(args) -> int:
    kv = _read_kv(args.config)
    run = run_config_from_kv(kv)
    if args.out:
        run.out = args.out
    torch.set_num_threads(_threads(args.threads, run.threads))
    variants = [()] + [tuple(v.split("+")) for v in _switch_list(args.switches or "")]
    horizons = _horizons(args.horizons) if args.horizons else run.horizons
    series, _, name = load_series(run)
    tr, va, te = split(run, series)
    rows = bench.ablate(run.model, variants, tr, va, te, horizons, name, stride=run.train_stride)
    jl, cs = bench.write_reports(rows, Path(run.out) / "reports", f"ablate-{name}", run.to_dict())
    _emit({"reports": [str(jl), str(cs)], "variants": len(variants)})
    return 0


def cmd_synth(args) -> int:
    spec, seed = load_synth_spec(args.spec)
    if args.seed is not None:
        seed = args.seed
    series, labels = synth_generate(spec, seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(series, out)
    sidecar = out.with_suffix(".labels.csv")
    names = [r.name for r in spec.regimes]
    with open(sidecar, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["date", "label", "regime"])
        for t, lab in zip(series.timestamps, labels):
            w.writerow([t, int(lab), names[int(lab)]])
    _emit({"csv": str(out), "labels": str(sidecar)})
    return 0


# ------------------------------------------------------------------------- plumbing


def _read_kv(path: str) -> dict[str, str]:
    from .config import parse_kv

    return parse_kv(Path(path).read_text(encoding="utf-8"))


def _read_labels(path: str) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        return np.array([int(row["label"]) for row in csv.DictReader(fh)], dtype=np.int64)


def _write(reports, out: str, name: str, state, run: RunConfig) -> int:
    build = state.extra.get("build") or bench.build_id()
    jl, cs = bench.write_reports(reports, Path(out) / "reports", name, run.to_dict(), build)
    _emit({"reports": [str(jl), str(cs)], "records": len(reports)})
    return 0


def _emit(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="talon", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None, help="worker threads (TALON_THREADS overrides)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _Parser(add_help=False)
    # accepted after the subcommand too; SUPPRESS keeps a top-level value from being reset
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)

    t = sub.add_parser("train", parents=[common], help="train a model and write a checkpoint and loss curve")
    t.add_argument("--config", required=True)
    t.add_argument("--out")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--horizons")
    e.add_argument("--protocol", choices=["one-for-all", "one-for-one"], default="one-for-all")
    e.add_argument("--split", choices=["test", "all"], default="test")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    z = sub.add_parser("zeroshot", parents=[common], help="evaluate a checkpoint on an unseen dataset")
    z.add_argument("--ckpt", required=True)
    z.add_argument("--target", required=True)
    z.add_argument("--horizons")
    z.add_argument("--split", choices=["test", "all"], default="test")
    z.add_argument("--out")
    z.set_defaults(fn=cmd_zeroshot)

    a = sub.add_parser("analyze", parents=[common], help="routing or embedding diagnostics")
    a.add_argument("what", choices=["experts", "embeddings"])
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--labels", help="regime label sidecar written by `talon synth`")
    a.add_argument("--max-windows", type=int, default=None)
    a.add_argument("--out")
    a.set_defaults(fn=cmd_analyze)

    b = sub.add_parser("ablate", parents=[common], help="train and evaluate ablation variants")
    b.add_argument("--config", required=True)
    b.add_argument("--switches", default="", help="comma list; join switches with '+' for one combined variant")
    b.add_argument("--horizons")
    b.add_argument("--out")
    b.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic regime corpus")
    s.add_argument("--spec", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.set_defaults(fn=cmd_synth)
    return p


def _fail(code: int, exc: BaseException) -> int:
    args = getattr(exc, "args", ())
    payload = {"error": type(exc).__name__, "message": str(exc)}
    if len(args) > 1 and isinstance(args[1], dict):
        payload["message"] = str(args[0])
        payload.update(args[1])
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(2, exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        return _fail(2, exc)
    except (FileNotFoundError, IsADirectoryError, PermissionError) as exc:
        return _fail(1, exc)
    except (CheckpointError, SeriesError, bench.BenchError, RuntimeError, ValueError, OSError) as exc:
        return _fail(1, exc)


if __name__ == "__main__":
    sys.exit(main())
