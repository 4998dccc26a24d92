"""``clearct`` command line: synth, pretrain, embed, train, eval, attention, sweep, quickstart.

Exit codes: 0 ok, 2 configuration, 3 checkpoint, 4 data, 5 protocol violation.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import workflow as wf
from .config import SCHEMA, ConfigError, RunConfig
from .contrastive import LAMBDA_PRESETS, PretrainState, iter_log_lines
from .ctio import (SyntheticSpec, VolumeFormatError, EmbeddingFormatError, generate_synthetic, read_manifest,
                   write_dataset)
from .estimators import ABMILClassifier
from .harness import (SplitViolation, attention_csv, attention_svg, export_attention, lambda_sweep,
                      sweep_csv)
from .metrics import MetricsReport
from .nn import CheckpointError, encoder_from_arrays, read_checkpoint, write_checkpoint
from .pipeline import DataError, embed_scans, load_bags, load_volumes

EXIT_OK, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DATA, EXIT_PROTOCOL = 0, 2, 3, 4, 5
WINDOW_CHOICES = {"abdominal": ("abdominal",), "lung": ("lung",), "both": ("abdominal", "lung")}


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def data_root(cfg: RunConfig) -> Path:
    root = cfg.get("data", "root") or os.environ.get("CLEAR_DATA_DIR") or "data"
    return Path(root)


def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        for sec in SCHEMA:
            cfg.set(sec, "seed", args.seed)
    for sec, key, attr in (("pretrain", "method", "method"), ("pretrain", "lambda", "lam"),
                           ("pretrain", "epochs", "epochs"), ("pretrain", "pairing", "pairing"),
                           ("data", "root", "data")):
        value = getattr(args, attr, None)
        if value is not None:
            cfg.set(sec, key, value)
    if getattr(args, "degenerate_as_half", False):
        cfg.set("eval", "degenerate_as_half", True)
    return cfg


def _print_config(cfg: RunConfig, out=None) -> None:
    out = out or sys.stdout
    print("# resolved configuration", file=out)
    print(cfg.dumps(), file=out)


def _manifest(args, cfg: RunConfig) -> Path:
    path = Path(args.manifest) if getattr(args, "manifest", None) else data_root(cfg) / "manifest.csv"
    if not path.exists():
        raise CLIError(EXIT_DATA, f"manifest not found: {path}")
    return path


def _read_manifest(path: Path):
    try:
        return read_manifest(path)
    except (ValueError, OSError) as exc:
        raise CLIError(EXIT_DATA, str(exc)) from None


def _load_volumes(manifest: Path, entries):
    try:
        return load_volumes(manifest, entries)
    except (DataError, VolumeFormatError) as exc:
        raise CLIError(EXIT_DATA, str(exc)) from None


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_config(args)
    if args.spec:
        try:
            spec = SyntheticSpec.from_dict(json.loads(Path(args.spec).read_text())).validate()
        except (OSError, ValueError, TypeError, KeyError) as exc:
            raise CLIError(EXIT_CONFIG, f"bad synthetic spec {args.spec}: {exc}") from None
        if args.seed is not None:
            spec = SyntheticSpec.from_dict({**spec.to_dict(), "seed": args.seed})
    else:
        try:
            spec = wf.synthetic_spec(cfg)
        except ValueError as exc:
            raise CLIError(EXIT_CONFIG, str(exc)) from None
    _print_config(cfg)
    print("# synthetic spec\n" + json.dumps(spec.to_dict(), sort_keys=True))
    out = Path(args.out) if args.out else data_root(cfg)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise CLIError(EXIT_CONFIG, f"output directory {out} is not writable: {exc}") from None
    volumes, entries = generate_synthetic(spec)
    write_dataset(out, spec, volumes, entries)
    counts = {c: sum(c in e.labels for e in entries) for c in spec.class_names}
    print(f"patients: {len({e.patient_id for e in entries})}")
    print(f"scans: {len(entries)}")
    print("class counts: " + ", ".join(f"{c}={n}" for c, n in counts.items()))
    print(f"manifest: {out / 'manifest.csv'}")
    return EXIT_OK


def _load_state(path: Path, cfg: RunConfig) -> PretrainState:
    try:
        arrays = read_checkpoint(path)
        if "state/step" not in arrays:
            raise CheckpointError(f"{path}: not a resumable pretraining checkpoint")
        return PretrainState.from_arrays(arrays, wf.contrastive_config(cfg))
    except OSError as exc:
        raise CLIError(EXIT_CHECKPOINT, f"cannot read checkpoint: {exc}") from None
    except (CheckpointError, ValueError) as exc:
        raise CLIError(EXIT_CHECKPOINT, str(exc)) from None


def cmd_pretrain(args) -> int:
    cfg = _load_config(args)
    _print_config(cfg)
    manifest = _manifest(args, cfg)
    entries = _read_manifest(manifest)
    volumes = _load_volumes(manifest, entries)
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".loss.csv")
    state = None
    rows: list[dict] = []
    if args.resume:
        state = _load_state(Path(args.resume), cfg)
        expected = wf.encoder_config(cfg, volumes[0].voxels.shape[1:])
        if state.pair.query_encoder.config != expected:
            raise CLIError(EXIT_CHECKPOINT, f"{args.resume}: encoder configuration differs from the run "
                                            f"configuration ({state.pair.query_encoder.config} vs {expected})")
        if log_path.exists():
            rows = [r for r in wf.read_loss_log(log_path) if r["step"] < state.step]
        state.log = list(rows)
        print(f"resuming at epoch {state.epoch}, step {state.step}")
    try:
        state = wf.pretrain(cfg, volumes, entries, state)
    except SplitViolation as exc:
        raise CLIError(EXIT_PROTOCOL, f"split violation: {exc}") from None
    out.parent.mkdir(parents=True, exist_ok=True)
    write_checkpoint(out, state.to_arrays())
    log_path.write_text("\n".join(iter_log_lines(state.log)) + "\n")
    last = state.log[-1]["loss"] if state.log else float("nan")
    print(f"steps: {state.step}  epochs: {state.epoch}  final loss: {last:.6f}")
    print(f"checkpoint: {out}\nloss log: {log_path}")
    return EXIT_OK


def _load_encoder(path: Path):
    try:
        return encoder_from_arrays(read_checkpoint(path))
    except OSError as exc:
        raise CLIError(EXIT_CHECKPOINT, f"cannot read checkpoint: {exc}") from None
    except (CheckpointError, ValueError) as exc:
        raise CLIError(EXIT_CHECKPOINT, str(exc)) from None


def cmd_embed(args) -> int:
    cfg = _load_config(args)
    _print_config(cfg)
    encoder = _load_encoder(Path(args.ckpt))
    manifest = _manifest(args, cfg)
    entries = _read_manifest(manifest)
    windows = WINDOW_CHOICES[args.window]
    try:
        paths = embed_scans(encoder, manifest, entries, windows, args.out)
    except (DataError, VolumeFormatError) as exc:
        raise CLIError(EXIT_DATA, str(exc)) from None
    print(f"wrote {len(paths)} embedding files ({len(entries)} scans x {len(windows)} windows, "
          f"d={encoder.config.embed_dim}) to {args.out}")
    return EXIT_OK


def _bags(args, cfg: RunConfig):
    manifest = _manifest(args, cfg)
    entries = _read_manifest(manifest)
    classes, task_kind = wf.classes_for(manifest)
    cfg.set("downstream", "task_kind", task_kind)
    try:
        bags = load_bags(entries, args.embeddings, cfg.get("downstream", "windows"), classes, task_kind)
    except (DataError, EmbeddingFormatError) as exc:
        raise CLIError(EXIT_DATA, str(exc)) from None
    return entries, classes, bags


def cmd_train(args) -> int:
    cfg = _load_config(args)
    entries, classes, bags = _bags(args, cfg)
    _print_config(cfg)
    try:
        plan, result = wf.downstream(cfg, bags, entries, classes)
    except SplitViolation as exc:
        raise CLIError(EXIT_PROTOCOL, f"split violation: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for f, model in enumerate(result.models):
        write_checkpoint(out / f"fold{f}.clwt", model.to_arrays())
    with open(out / "splits.csv", "w") as fh:
        fh.write("patient_id,assignment\n")
        for pid in sorted({b.patient_id for b in bags}):
            fh.write(f"{pid},{plan.fold_of(pid)}\n")
    with open(out / "predictions.csv", "w") as fh:
        fh.write("fold,scan_id,patient_id," + ",".join(f"score_{c}" for c in classes) + ","
                 + ",".join(f"label_{c}" for c in classes) + "\n")
        for f, (idx, scores, labels) in enumerate(zip(result.fold_bags, result.fold_scores, result.fold_labels)):
            for i, s, lab in zip(idx, scores, labels):
                fh.write(f"{f},{bags[i].scan_id},{bags[i].patient_id}," + ",".join(repr(float(v)) for v in s)
                         + "," + ",".join(str(int(v)) for v in lab) + "\n")
    (out / "metrics.csv").write_text(result.report.to_csv())
    (out / "summary.csv").write_text(result.report.summary_csv())
    (out / "run.ini").write_text(cfg.dumps())
    mean, std = result.report.mean_std("auc")
    print(f"macro AUC {mean:.4f} +/- {std:.4f} over {result.report.n_folds} folds")
    if result.report.undefined:
        print(f"undefined metrics (excluded from averages): {len(result.report.undefined)}")
    print(f"reports: {out / 'metrics.csv'}, {out / 'summary.csv'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    _print_config(cfg)
    try:
        report = MetricsReport.from_csv(Path(args.report).read_text())
    except (OSError, ValueError, KeyError) as exc:
        raise CLIError(EXIT_DATA, f"cannot read metrics report {args.report}: {exc}") from None
    text = report.summary_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_attention(args) -> int:
    cfg = _load_config(args)
    entries, classes, bags = _bags(args, cfg)
    _print_config(cfg)
    models_dir = Path(args.models)
    try:
        plan = wf.split_plan(cfg, entries)
    except SplitViolation as exc:
        raise CLIError(EXIT_PROTOCOL, f"split violation: {exc}") from None
    fold = plan.folds[args.fold]
    try:
        model = ABMILClassifier.from_arrays(read_checkpoint(models_dir / f"fold{args.fold}.clwt"))
    except OSError as exc:
        raise CLIError(EXIT_CHECKPOINT, f"cannot read model: {exc}") from None
    except CheckpointError as exc:
        raise CLIError(EXIT_CHECKPOINT, str(exc)) from None
    records = [export_attention(b, model) for b in bags if b.patient_id in fold.test]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "attention.csv").write_text(attention_csv(records))
    if args.svg:
        for r in records:
            (out / f"{r.scan_id or r.patient_id}.svg").write_text(attention_svg(r))
    lesion = [r for r in records if len(r.key_positions)]
    if lesion:
        mass = float(np.mean([r.key_mass for r in lesion]))
        base = float(np.mean([r.uniform_baseline for r in lesion]))
        print(f"key-slice attention mass {mass:.4f} vs uniform {base:.4f} ({mass / base:.2f}x) "
              f"over {len(lesion)} lesion-bearing test bags")
    print(f"attention: {out / 'attention.csv'} ({len(records)} bags)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    if args.lambdas:
        cfg.set("eval", "lambdas", args.lambdas)
    _print_config(cfg)
    manifest = _manifest(args, cfg)
    entries = _read_manifest(manifest)
    classes, task_kind = wf.classes_for(manifest)
    cfg.set("downstream", "task_kind", task_kind)
    volumes = _load_volumes(manifest, entries)
    task = "lesion-class"

    def run(lam: float, seed: int) -> dict:
        c = cfg.copy()
        c.set("pretrain", "lambda", lam)
        state = wf.pretrain(c, volumes, entries)
        enc = state.pair.query_encoder
        bags = wf.bags_in_memory(enc, volumes, entries, c.get("downstream", "windows"), classes, task_kind)
        _, result = wf.downstream(c, bags, entries, classes, enc)
        print(f"lambda={lam:g}: macro AUC {result.report.macro('auc'):.4f}")
        return {task: result.report}

    try:
        rows = lambda_sweep(cfg.get("eval", "lambdas"), cfg.get("pretrain", "seed"), [task], run)
    except SplitViolation as exc:
        raise CLIError(EXIT_PROTOCOL, f"split violation: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.csv").write_text(sweep_csv(rows))
    print(f"sweep table: {out / 'sweep.csv'}")
    return EXIT_OK


def cmd_quickstart(args) -> int:
    """synth -> pretrain -> embed -> train -> eval in one directory."""
    out = Path(args.out)
    common = ["--seed", str(args.seed)] if args.seed is not None else []
    if args.config:
        common += ["--config", args.config]
    t0 = time.perf_counter()
    steps = [
        ["synth", "--out", str(out / "data")],
        ["pretrain", "--data", str(out / "data"), "--out", str(out / "encoder.clwt"), "--epochs", str(args.epochs)],
        ["embed", "--data", str(out / "data"), "--ckpt", str(out / "encoder.clwt"), "--window", "both",
         "--out", str(out / "embeddings")],
        ["train", "--data", str(out / "data"), "--embeddings", str(out / "embeddings"), "--out", str(out / "run")],
        ["eval", "--report", str(out / "run" / "metrics.csv"), "--out", str(out / "run" / "summary.csv")],
    ]
    for argv in steps:
        print(f"== clearct {' '.join(argv[:1])}")
        code = main(argv[:1] + common + argv[1:])
        if code != EXIT_OK:
            return code
    print(f"quickstart finished in {time.perf_counter() - t0:.1f} s")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------


def _lambda(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError(f"lambda must be non-negative (presets: {', '.join(map(str, LAMBDA_PRESETS))})")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clearct", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="override every seed in the configuration")
    common.add_argument("--threads", type=int, help="cap BLAS worker threads")
    common.add_argument("--data", help="dataset directory (default [data] root, $CLEAR_DATA_DIR or ./data)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic CT cohort")
    p.add_argument("--spec", help="JSON synthetic spec (defaults come from [data])")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common], help="contrastive encoder pretraining")
    p.add_argument("--manifest")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss CSV (default <out>.loss.csv)")
    p.add_argument("--method", choices=("lecl", "moco"))
    p.add_argument("--lambda", dest="lam", type=_lambda, help="lesion weight; presets 0, 1, 3, 5")
    p.add_argument("--pairing", choices=("lesion", "none"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", parents=[common], help="write frozen slice embeddings")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest")
    p.add_argument("--window", choices=tuple(WINDOW_CHOICES), default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("train", parents=[common], help="per-fold MIL training and test metrics")
    p.add_argument("--manifest")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--degenerate-as-half", action="store_true", help="report single-class AUC as 0.5")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="summarise a per-fold metrics CSV")
    p.add_argument("--report", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attention", parents=[common], help="export attention of a trained fold model")
    p.add_argument("--manifest")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--models", required=True, help="directory written by train")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--svg", action="store_true", help="also write one SVG plot per bag")
    p.set_defaults(func=cmd_attention)

    p = sub.add_parser("sweep", parents=[common], help="lambda ablation table")
    p.add_argument("--manifest")
    p.add_argument("--lambdas", help="comma-separated lambda values")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("quickstart", parents=[common], help="end-to-end run on a fresh synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=5)
    p.set_defaults(func=cmd_quickstart)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    limiter = contextlib.nullcontext()
    if args.threads:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=args.threads)
    try:
        with limiter:
            return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
