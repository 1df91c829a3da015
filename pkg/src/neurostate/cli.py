"""Command-line entry points.

Subcommands: pretrain, finetune, eval, gradcheck, export-filters,
synth.  Reports are line-delimited text (tab-separated fields or one
JSON record per line) and figures are rendered next to them.  Exit
codes: 0 ok, 1 runtime failure, 2 config error, 3 check failure.

Every run writes ``run_record.json`` with the config hash, package
version, and all seeds so results can be traced back to their inputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import config_hash
from .checkpoint import load as load_ckpt
from .config import (
    ConfigError,
    FINETUNE_SCHEMA,
    build_adapt_config,
    load_pretrain_file,
    read_kv_file,
    resolve,
)
from .encoder import export_filter_banks
from .finetune import finetune_loop, load_task
from .gradcheck import run_gradcheck
from .metrics import summarize
from .montage import default_template
from .pipeline import PipelineError, prepare_recording, read_manifest, read_recording
from .plots import plot_channel_bank, plot_confusion, plot_loss_curves
from .pretrain import PretrainError, model_from_checkpoint, run_pretraining
from .synthdata import generate_corpus

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_CHECK = 3

# ConfigError is caught first; every remaining ValueError subclass
# (pipeline, montage, encoder, adaptation, checkpoint, metrics) plus
# I/O trouble is a runtime failure
RUNTIME_ERRORS = (ValueError, PretrainError, OSError, json.JSONDecodeError)


def write_run_record(out_dir, command: str, config: dict, seeds: dict) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "package_version": __version__,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "written_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_dir / "run_record.json"
    with open(path, "w") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def _load_pretrain_segments(manifest_path, window_s: float):
    """Pre-training consumes every manifest row; splits matter downstream."""
    segments = []
    for entry in read_manifest(manifest_path):
        recording = read_recording(entry.path)
        kept, _ = prepare_recording(recording, window_s=window_s)
        segments.extend(kept)
    if not segments:
        raise PipelineError(f"no usable segments in {manifest_path}")
    return segments


def cmd_pretrain(args) -> int:
    config, values = load_pretrain_file(args.config)
    out_dir = Path(values["out.dir"])
    segments = _load_pretrain_segments(values["data.manifest"], values["data.window_s"])
    write_run_record(out_dir, "pretrain", dict(values), {"train.seed": config.seed})
    result = run_pretraining(segments, config, out_dir, resume=args.resume)
    for summary in result["epochs"]:
        print(f"epoch\t{summary['epoch']}\tloss_total\t{summary['mean_loss_total']:.6f}")
    log_path = out_dir / "train_log.jsonl"
    if log_path.exists():
        figure = plot_loss_curves(log_path, out_dir / "loss_curve.png")
        print(f"figure\t{figure}")
    print(f"checkpoint\t{out_dir / 'checkpoint_last.bin'}")
    return EXIT_OK


def _finetune_values(args) -> dict:
    """Config file plus flag overrides, all funneled through one schema."""
    raw = read_kv_file(args.config) if args.config else {}
    flag_map = {
        "checkpoint": args.ckpt,
        "data.manifest": args.task,
        "out.dir": args.out,
        "data.window_s": args.window_s,
        "task.encoders": args.encoders,
        "task.merge_mode": args.merge,
        "task.hidden_factor": args.hidden_factor,
        "task.dropout": args.dropout,
        "task.lr": args.lr,
        "task.epochs": args.epochs,
        "task.batch_size": args.batch_size,
        "task.seeds": args.seeds,
        "task.freeze_encoders": "true" if args.freeze_encoders else None,
    }
    for key, flag in flag_map.items():
        if flag is not None:
            raw[key] = str(flag)
    return resolve(FINETUNE_SCHEMA, raw)


def cmd_finetune(args) -> int:
    values = _finetune_values(args)
    try:
        adapt = build_adapt_config(values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    out_dir = Path(values["out.dir"])
    write_run_record(out_dir, "finetune", dict(values), {"task.seeds": list(adapt.seeds)})
    ckpt = load_ckpt(values["checkpoint"])
    task = load_task(values["data.manifest"], window_s=values["data.window_s"])

    curves: list[dict] = []
    report = finetune_loop(ckpt, task, adapt, log=curves.append)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.jsonl", "w") as f:
        for record in report["per_seed"]:
            f.write(json.dumps(record, sort_keys=True) + "\n")
            print(json.dumps(record, sort_keys=True))
        aggregate = {"aggregate": report["aggregate"], "n_classes": report["n_classes"]}
        f.write(json.dumps(aggregate, sort_keys=True) + "\n")
        print(json.dumps(aggregate, sort_keys=True))

    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for seed in adapt.seeds:
        rows = [c for c in curves if c["seed"] == seed]
        ax.plot([r["epoch"] for r in rows],
                [r["val_balanced_accuracy"] for r in rows],
                label=f"seed {seed}", lw=1.0)
    ax.set_xlabel("epoch")
    ax.set_ylabel("val balanced accuracy")
    ax.legend(frameon=False, fontsize=7)
    fig.tight_layout()
    fig.savefig(out_dir / "adaptation_curve.png", dpi=150)
    plt.close(fig)
    print(f"figure\t{out_dir / 'adaptation_curve.png'}")
    return EXIT_OK


def _read_predictions(
    path,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None, list[str]]:
    with open(path) as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise PipelineError(f"empty predictions file {path}")
    header = lines[0].split("\t")
    if header not in (["y_true", "y_pred"], ["y_true", "y_pred", "score"]):
        raise PipelineError(
            f"predictions header must be y_true<TAB>y_pred[<TAB>score], got {header}"
        )
    rows = [ln.split("\t") for ln in lines[1:]]
    if not rows:
        raise PipelineError(f"no data rows in predictions file {path}")
    ragged = [lineno for lineno, r in enumerate(rows, start=2) if len(r) != len(header)]
    if ragged:
        raise PipelineError(
            f"{path}: expected {len(header)} columns, offending lines {ragged[:5]}"
        )
    labels = {r[0] for r in rows} | {r[1] for r in rows}
    try:
        classes = sorted(labels, key=int)
    except ValueError:
        # free-form class names; lexical order fixes which one the score
        # column treats as positive
        classes = sorted(labels)
    index = {c: i for i, c in enumerate(classes)}
    y_true = np.array([index[r[0]] for r in rows])
    y_pred = np.array([index[r[1]] for r in rows])
    scores = None
    if len(header) == 3:
        try:
            scores = np.array([float(r[2]) for r in rows])
        except ValueError as exc:
            raise PipelineError(f"{path}: non-numeric score column ({exc})") from exc
    return y_true, y_pred, scores, classes


def cmd_eval(args) -> int:
    y_true, y_pred, scores, classes = _read_predictions(args.predictions)
    record = summarize(y_true, y_pred, scores=scores)
    out_dir = Path(args.out)
    write_run_record(out_dir, "eval", {"predictions": str(args.predictions)}, {})
    with open(out_dir / "metrics.tsv", "w") as f:
        f.write("metric\tvalue\n")
        for name, value in record.items():
            f.write(f"{name}\t{value:.10f}\n")
            print(f"{name}\t{value:.10f}")
    figure = plot_confusion(y_true, y_pred, out_dir / "confusion.png",
                            class_names=classes)
    print(f"figure\t{figure}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results, all_ok = run_gradcheck(seed=args.seed, tol=args.tol)
    lines = [
        f"{r.name}\t{r.max_rel_err:.3e}\t{'ok' if r.ok(args.tol) else 'FAIL'}"
        for r in results
    ]
    for line in lines:
        print(line)
    print(f"gradcheck\t{'pass' if all_ok else 'FAIL'}\tparams\t{len(results)}")
    if args.out:
        out_dir = Path(args.out)
        write_run_record(out_dir, "gradcheck", {"tol": args.tol}, {"seed": args.seed})
        with open(out_dir / "gradcheck.tsv", "w") as f:
            f.write("parameter\tmax_rel_err\tstatus\n")
            f.write("\n".join(lines) + "\n")
    return EXIT_OK if all_ok else EXIT_CHECK


def cmd_export_filters(args) -> int:
    ckpt = load_ckpt(args.ckpt)
    model = model_from_checkpoint(ckpt)
    template = default_template()
    out_dir = Path(args.out)
    write_run_record(out_dir, "export-filters", {"ckpt": str(args.ckpt)},
                     {"train.seed": ckpt.seeds.get("seed")})
    encoders = {"shared": model.shared_encoder}
    encoders.update(model.state_encoders.items())
    for name, encoder in encoders.items():
        table = out_dir / f"filters_{name}.tsv"
        rows = export_filter_banks(encoder, template, table)
        print(f"table\t{table}\trows\t{rows}")
        if args.figures:
            bank = encoder.bank_c.detach().numpy()
            figure = plot_channel_bank(bank, out_dir / f"filters_{name}.png", template)
            print(f"figure\t{figure}")
    return EXIT_OK


def cmd_synth(args) -> int:
    channel_names = None
    if args.channel_list:
        with open(args.channel_list) as f:
            channel_names = [ln.strip() for ln in f if ln.strip()]
    out_dir = Path(args.out)
    config = {
        "states": args.states.split(","),
        "segments_per_state": args.segments_per_state,
        "snr": args.snr,
        "duration_s": args.duration_s,
        "rate": args.rate,
        "channels": channel_names if channel_names else "template-60",
    }
    write_run_record(out_dir, "synth", config, {"seed": args.seed})
    manifest = generate_corpus(
        out_dir,
        states=tuple(args.states.split(",")),
        channel_names=channel_names,
        segments_per_state=args.segments_per_state,
        snr=args.snr,
        seed=args.seed,
        rate=args.rate,
        duration_s=args.duration_s,
    )
    print(f"manifest\t{manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="neurostate",
        description="Hierarchical EEG encoder: training, adaptation, reports.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="run the parallel pre-training loop")
    p.add_argument("--config", required=True, help="key=value config file")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="adapt a checkpoint to a labeled task")
    p.add_argument("--config", default=None, help="key=value config file")
    p.add_argument("--ckpt", default=None)
    p.add_argument("--task", default=None, help="task manifest TSV")
    p.add_argument("--out", default=None)
    p.add_argument("--encoders", default=None, help="e.g. shared,affect")
    p.add_argument("--merge", default=None, choices=[None, "mean", "aggr5", "all"])
    p.add_argument("--hidden-factor", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--seeds", default=None, help="e.g. 0,1,2,3,4")
    p.add_argument("--freeze-encoders", action="store_true")
    p.add_argument("--window-s", type=float, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="recompute metrics from a predictions file")
    p.add_argument("--predictions", required=True,
                   help="TSV with y_true, y_pred, optional score")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-filters", help="write spatial filter tables")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--figures", action="store_true", help="also render topographies")
    p.set_defaults(func=cmd_export_filters)

    p = sub.add_parser("synth", help="generate a labeled synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--states", default="affect,motor,others")
    p.add_argument("--segments-per-state", type=int, default=20)
    p.add_argument("--snr", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration-s", type=float, default=10.0)
    p.add_argument("--rate", type=float, default=200.0)
    p.add_argument("--channel-list", default=None,
                   help="file with one channel name per line (default: full template)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
