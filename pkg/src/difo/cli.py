"""``difo`` command line: pretrain, adapt, eval.

Runs live under ``$DIFO_RUN_ROOT/<run name>`` (``./runs`` when the variable
is unset). Each command writes one self-contained output directory holding
its products plus ``config.ini`` (the resolved config), ``seed.txt`` and a
versioned ``manifest.txt`` with a checksum per file.

Exit codes: 0 success, 2 config or usage error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adaptation import ABLATIONS, EpochRecord, adapt
from .arrays import FORMAT_VERSION, read_manifest
from .config import SETTINGS, RunConfig, default_config, load_config, with_setting
from .data import DomainDataset, export_dataset, generate_shift_pair, load_dataset, open_set_split, \
    partial_set_split
from .errors import ConfigError, DataError, NumericalError
from .evaluation import accuracy, confusion_matrix, mean_class_accuracy, open_set_scores, per_class_accuracy, \
    train_oracle, weight_sweep
from .target import forward, load_model, predict, pretrain_source, save_model
from .vil import PromptContext, get_backend

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4
RUN_ROOT_ENV = "DIFO_RUN_ROOT"
REPORTS = ("accuracy", "confusion", "mmd", "sweep")
CLI_ABLATIONS = tuple(a for a in ABLATIONS if a != "pc")


class MissingArtifact(Exception):
    pass


# --------------------------------------------------------------------- helpers


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def _run_dir(cfg: RunConfig, override) -> Path:
    return Path(override) if override else run_root() / cfg.name


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_run_record(out: Path, cfg: RunConfig, command: str, **info) -> None:
    """Config snapshot, seed record and a manifest of every file under ``out``."""
    (out / "config.ini").write_text(cfg.to_ini())
    (out / "seed.txt").write_text(f"seed = {cfg.seed}\ntorch_threads = 1\n")
    lines = [f"format_version = {FORMAT_VERSION}", "kind = run", f"command = {command}",
             f"difo_version = {__version__}"]
    lines += [f"{k} = {v}" for k, v in info.items()]
    for file in sorted(p for p in out.rglob("*") if p.is_file() and p != out / "manifest.txt"):
        lines.append(f"file.{file.relative_to(out).as_posix()} = sha256:{_sha256(file)}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")


def _split_data(cfg: RunConfig, setting: str):
    """Source and target datasets for ``setting`` plus the generator world."""
    source, target, world = generate_shift_pair(cfg.shift_spec)
    data = cfg.values["data"]
    if setting == "partial":
        target = partial_set_split(target, data["keep_classes"])
    elif setting == "open":
        known = data["known_classes"]
        source = DomainDataset(source.inputs[source.labels < known], source.labels[source.labels < known],
                               source.domain_name, source.class_names[:known])
        target = open_set_split(target, known)
    return source, target, world


def _pretrain_dir(run_dir: Path, setting: str) -> Path:
    return run_dir / ("pretrain-open" if setting == "open" else "pretrain")


def _adapt_dir(run_dir: Path, setting: str, ablate) -> Path:
    return run_dir / ("adapt-" + setting + "".join(f"-ablate_{a}" for a in sorted(set(ablate))))


def _fresh_dir(path: Path) -> Path:
    # a rerun replaces the command's own output directory wholesale
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
    return path


def _write_tsv(path: Path, header, rows) -> None:
    def cell(v):
        return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)

    lines = ["\t".join(header)] + ["\t".join(cell(v) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n")


def _line_plot(path: Path, xs, series: dict, xlabel: str, ylabel: str, hline=None) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    if hline is not None:
        ax.axhline(hline[1], color="k", linestyle="--", label=hline[0])
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


# -------------------------------------------------------------------- commands


def cmd_init(args) -> int:
    text = default_config().to_ini()
    if args.path == "-":
        sys.stdout.write(text)
    else:
        Path(args.path).write_text(text)
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = with_setting(load_config(args.config), args.setting)
    setting = cfg.values["data"]["setting"]
    source, target, _ = _split_data(cfg, setting)
    result = pretrain_source(source, cfg.source)
    out = _fresh_dir(_pretrain_dir(_run_dir(cfg, args.run_dir), setting))
    save_model(result.model, out / "source", seed=cfg.seed, epoch=cfg.source.epochs,
               heldout_accuracy=repr(result.heldout_accuracy))
    _write_tsv(out / "pretrain.tsv", ["metric", "value"],
               [["heldout_accuracy", result.heldout_accuracy]] +
               [[f"loss_epoch_{i + 1}", v] for i, v in enumerate(result.epoch_losses)])
    write_run_record(out, cfg, "pretrain", setting=setting)
    print(f"held-out source accuracy {result.heldout_accuracy:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_adapt(args) -> int:
    cfg = with_setting(load_config(args.config), args.setting)
    setting = cfg.values["data"]["setting"]
    run_dir = _run_dir(cfg, args.run_dir)
    pre = _pretrain_dir(run_dir, setting)
    if not (pre / "source" / "manifest.txt").is_file():
        raise MissingArtifact(f"missing source checkpoint {pre / 'source'}; run 'difo pretrain' first")
    pre_cfg = load_config(pre / "config.ini")
    for section in ("data", "target_model"):
        ours = {k: v for k, v in cfg.section(section).items() if k != "setting"}
        theirs = {k: v for k, v in pre_cfg.section(section).items() if k != "setting"}
        if ours != theirs or pre_cfg.seed != cfg.seed:
            raise ConfigError(f"[{section}] differs from the config the source checkpoint was trained with")
    source_model = load_model(pre / "source")

    _, target, world = _split_data(cfg, setting)
    vil = get_backend(cfg.values["vil_backend"]["backend"])(world, cfg.vil)
    template = vil.init_prompt(seed=cfg.seed)
    if setting == "open":
        template = template.restrict(source_model.n_classes)
    config = cfg.adaptation.ablate(*args.ablate)

    ev = cfg.values["evaluation"]
    oracle = None
    if ev["track_mmd"] and setting != "open":
        oracle = train_oracle(target, cfg.source)
    out = _fresh_dir(_adapt_dir(run_dir, setting, args.ablate))
    log = out / "epochs.jsonl"
    log.write_text("")

    def on_epoch(record, *_):
        with log.open("a") as fh:
            fh.write(record.to_json() + "\n")

    try:
        model, prompt, records = result = adapt(
            source_model, vil, target.inputs, config, prompt=template, labels=target.labels,
            oracle_logits=None if oracle is None else forward(oracle, target.inputs).numpy(),
            mmd_samples=ev["mmd_samples"], on_epoch=on_epoch)
    except NumericalError as exc:
        (out / "failure.json").write_text(json.dumps(exc.record, sort_keys=True) + "\n")
        raise

    save_model(model, out / "model", seed=cfg.seed, epoch=config.epochs, setting=setting)
    save_model(source_model, out / "source", seed=cfg.seed, epoch=0)
    if oracle is not None:
        save_model(oracle, out / "oracle", seed=cfg.seed, epoch=cfg.source.epochs)
    prompt.save(out / "prompt")
    template.save(out / "template_prompt")
    vil.save(out / "vil")
    result.bank.save(out / "bank")
    export_dataset(target, out / "target_data")
    final = records[-1].target_accuracy if records else accuracy(predict(model, target.inputs), target.labels)
    write_run_record(out, cfg, "adapt", setting=setting, ablate=",".join(sorted(set(args.ablate))) or "none",
                     epochs=len(records))
    print(f"{len(records)} epochs, final target accuracy {final:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def _load_checkpoint(path: Path):
    """``(model, run_dir_or_None)`` from an adapt output directory or a bare model store."""
    if not (path / "manifest.txt").is_file():
        raise MissingArtifact(f"no checkpoint at {path}")
    if read_manifest(path).get("kind") == "run":
        if not (path / "model" / "manifest.txt").is_file():
            raise MissingArtifact(f"{path} holds no adapted model")
        return load_model(path / "model"), path
    return load_model(path), None


def _needs(run, *names):
    if run is None:
        raise MissingArtifact("this report needs an adapt output directory as --checkpoint")
    for name in names:
        if not (run / name).exists():
            raise MissingArtifact(f"missing {run / name}")


def report_accuracy(model, data, run, out: Path) -> None:
    preds = predict(model, data.inputs)
    if data.n_classes == model.n_classes + 1 and data.class_names[-1] == "unknown":
        threshold = None
        if run is not None and (run / "config.ini").is_file():
            value = load_config(run / "config.ini").values["evaluation"]["open_threshold"]
            threshold = None if value == "median" else float(value)
        s = open_set_scores(preds, data.labels, model.n_classes, threshold)
        rows = [["known_accuracy", s["known"]], ["unknown_accuracy", s["unknown"]], ["os", s["os"]],
                ["entropy_threshold", s["threshold"]]]
    else:
        per_class = per_class_accuracy(preds, data.labels, data.n_classes)
        rows = [["accuracy", accuracy(preds, data.labels)],
                ["mean_class_accuracy", mean_class_accuracy(preds, data.labels, data.n_classes)]]
        rows += [[f"class_accuracy.{name}", v] for name, v in zip(data.class_names, per_class)]
    _write_tsv(out / "accuracy.tsv", ["metric", "value"], rows)


def report_confusion(model, data, run, out: Path) -> None:
    n = max(model.n_classes, data.n_classes)
    names = list(data.class_names) + [f"class_{c}" for c in range(data.n_classes, n)]
    cm = confusion_matrix(predict(model, data.inputs), data.labels, n)
    _write_tsv(out / "confusion.tsv", ["true\\predicted"] + names,
               [[names[i]] + list(cm[i]) for i in range(n)])


def report_mmd(model, data, run, out: Path) -> None:
    _needs(run, "epochs.jsonl")
    records = [EpochRecord.from_json(line) for line in (run / "epochs.jsonl").read_text().splitlines() if line]
    if not records or records[0].mmd_to_oracle is None:
        raise MissingArtifact(f"{run / 'epochs.jsonl'} has no MMD values (track_mmd off or open setting)")
    rows = [[r.epoch, r.mmd_to_oracle, r.mmd_vil_to_oracle] for r in records]
    _write_tsv(out / "mmd.tsv", ["epoch", "tgt", "cus_vil"], rows)
    _line_plot(out / "mmd.png", [r[0] for r in rows], {"TGT": [r[1] for r in rows], "CUS-ViL": [r[2] for r in rows]},
               "epoch", "MMD to oracle logits")


def report_sweep(model, data, run, out: Path) -> None:
    _needs(run, "source", "vil", "template_prompt")
    from .vil import ToyViLModel

    source = load_model(run / "source")
    vil = ToyViLModel.load(run / "vil")
    prompt = PromptContext.load(run / "template_prompt")
    grid = np.round(np.linspace(0, 1, 11), 10)
    accs = weight_sweep(source, vil, prompt, data, grid)
    adapted = accuracy(predict(model, data.inputs), data.labels)
    _write_tsv(out / "sweep.tsv", ["weight", "accuracy"], [[w, a] for w, a in zip(grid, accs)] + [["adapted", adapted]])
    _line_plot(out / "sweep.png", grid, {"source + ViL": accs}, "ViL weight w", "target accuracy",
               hline=("adapted", adapted))


_REPORTERS = {"accuracy": report_accuracy, "confusion": report_confusion, "mmd": report_mmd, "sweep": report_sweep}


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    model, run = _load_checkpoint(checkpoint)
    data_path = Path(args.data) if args.data else (run / "target_data" if run is not None else None)
    if data_path is None or not (data_path / "manifest.txt").is_file():
        raise MissingArtifact(f"no dataset store at {data_path}")
    data = load_dataset(data_path)
    if data.dim != model.dims["d_in"]:
        raise DataError(f"dataset has {data.dim} features, model expects {model.dims['d_in']}")
    out = Path(args.out) if args.out else checkpoint / "reports"
    out.mkdir(parents=True, exist_ok=True)
    for name in dict.fromkeys(args.report or ["accuracy"]):
        _REPORTERS[name](model, data, run, out)
        print(f"wrote {out / name}.tsv")
    return EXIT_OK


# ------------------------------------------------------------------------ main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="difo", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"difo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", help="write a config file with every default filled in")
    p.add_argument("path", nargs="?", default="-", help="output path, '-' for stdout")
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("pretrain", help="train the source model")
    p.add_argument("--config", required=True)
    p.add_argument("--setting", choices=SETTINGS, help="overrides [data] setting")
    p.add_argument("--run-dir", help=f"overrides ${RUN_ROOT_ENV}/<run name>")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("adapt", help="adapt the source model to the target domain")
    p.add_argument("--config", required=True)
    p.add_argument("--ablate", action="append", choices=CLI_ABLATIONS, default=[],
                   help="switch off a component; repeatable")
    p.add_argument("--setting", choices=SETTINGS, help="overrides [data] setting")
    p.add_argument("--run-dir", help=f"overrides ${RUN_ROOT_ENV}/<run name>")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="write report tables and plots")
    p.add_argument("--checkpoint", required=True, help="adapt output directory or a model store")
    p.add_argument("--data", help="dataset store (default: the run's target_data)")
    p.add_argument("--report", action="append", choices=REPORTS, help="repeatable; default accuracy")
    p.add_argument("--out", help="output directory (default: <checkpoint>/reports)")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    torch.set_num_threads(1)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"difo: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MissingArtifact, FileNotFoundError, DataError) as exc:
        print(f"difo: missing or invalid artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericalError as exc:
        print(f"difo: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
