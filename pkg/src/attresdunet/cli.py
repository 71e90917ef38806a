"""Command-line entry point.

Every subcommand writes ``run.json`` (resolved config, seed, version) into its
output directory. Artifacts are written to a temporary name and renamed into
place, so a failed run never leaves a half-written file behind.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ConfigParseError, RunConfig, config_from_record, load_config
from .dataio import (
    SPLITS,
    SplitSpec,
    gen_synthetic,
    read_dataset,
    read_manifest,
    read_mask_png,
    split_dataset,
    write_dataset,
    write_mask_png,
)
from .experiments import Splits, directional_checks, format_table, prepare_splits, run_ablation, summarize
from .model import accounting_report, build_model
from .objective import image_metrics, mean_metrics
from .pipeline import normalize_center, prepare, shades_of_gray
from .trainer import evaluate, format_report, predict, train

log = logging.getLogger("attresdunet")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class CommandError(RuntimeError):
    """A failure with a message meant for the user."""


def _atomic_write(path: Path, data) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data.encode() if isinstance(data, str) else data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def _write_provenance(out_dir: Path, command: str, config: RunConfig) -> None:
    record = {
        "command": command,
        "version": __version__,
        "seed": config.seed,
        "config": config.to_dict(),
        "config_text": config.to_text(),
    }
    _atomic_write(out_dir / "run.json", json.dumps(record, indent=2, default=list) + "\n")


# --------------------------------------------------------------------------
# argument handling


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="key = value config file")
    parser.add_argument("--seed", type=int, help="run seed (model init and batch order)")
    parser.add_argument("--data-dir", type=Path)
    parser.add_argument("--out-dir", type=Path)
    parser.add_argument("--variant", choices=("half", "full"))
    parser.add_argument("--no-cc", action="store_true", help="skip color constancy")
    parser.add_argument("--no-residual", action="store_true", help="drop ConvBlock shortcuts")
    parser.add_argument("--threshold", type=float)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="attresdunet", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic dataset with an 80/10/10 manifest")
    _common(p)
    p.add_argument("-n", "--num-samples", type=int)

    p = sub.add_parser("preprocess", help="color constancy and centering of a dataset directory")
    _common(p)

    p = sub.add_parser("train", help="train and write checkpoint plus history")
    _common(p)
    p.add_argument("--epochs", type=int)

    for name, text in (("eval", "metric report on a split"), ("predict", "write predicted mask PNGs")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--checkpoint", type=Path)
        p.add_argument("--split", default="test", choices=SPLITS + ("all",))
        if name == "eval":
            p.add_argument("--pred-dir", type=Path, help="score mask PNGs from this directory instead of a model")

    p = sub.add_parser("ablate", help="four-arm toy ablation")
    _common(p)

    p = sub.add_parser("inspect", help="parameter and FLOP counts")
    _common(p)
    p.add_argument("--json", action="store_true")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = []
    for item in args.set:
        if "=" not in item:
            raise ConfigParseError(f"--set expects KEY=VALUE, got {item!r}")
        overrides.append(tuple(s.strip() for s in item.split("=", 1)))
    if args.seed is not None:
        overrides.append(("seed", str(args.seed)))
    if args.variant:
        overrides.append(("model.variant", f"{args.variant}_attention"))
    if args.no_cc:
        overrides.append(("cc.enabled", "false"))
    if args.no_residual:
        overrides.append(("model.residual", "false"))
    if args.threshold is not None:
        overrides.append(("train.threshold", str(args.threshold)))
    if getattr(args, "epochs", None) is not None:
        overrides.append(("train.max_epochs", str(args.epochs)))
    if getattr(args, "num_samples", None) is not None:
        overrides.append(("data.n_samples", str(args.num_samples)))
    config = load_config(args.config, overrides)
    # the run seed drives both initialisation and batch order
    return replace(config, train=replace(config.train, seed=config.seed))


def _require(value, flag: str):
    if value is None:
        raise CommandError(f"{flag} is required for this command")
    return value


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args, config: RunConfig) -> None:
    out = _require(args.out_dir, "--out-dir")
    samples = gen_synthetic(config.data.n_samples, config.model.input_extent, config.data.seed)
    assignment = {}
    if samples:
        for name, part in zip(SPLITS, split_dataset(samples, SplitSpec(seed=config.data.split_seed))):
            assignment.update({s.id: name for s in part})
    write_dataset(out, samples, assignment)
    _write_provenance(out, "gen-data", config)
    print(f"wrote {len(samples)} samples to {out}")


def cmd_preprocess(args, config: RunConfig) -> None:
    src, out = _require(args.data_dir, "--data-dir"), _require(args.out_dir, "--out-dir")
    samples = read_dataset(src)
    cc = config.cc.build()
    arrays, offsets = {}, []
    processed = []
    for s in samples:
        image = shades_of_gray(s.image, cc) if cc is not None else s.image
        centered, off = normalize_center(image)
        arrays[s.id] = centered
        offsets.append([s.id, *off.tolist()])
        processed.append(replace(s, image=image))
    write_dataset(out, processed, dict(read_manifest(src)))
    with tempfile.TemporaryFile() as fh:
        np.savez(fh, **arrays)
        fh.seek(0)
        _atomic_write(out / "centered.npz", fh.read())
    lines = ["id,r,g,b"] + [f"{i},{r:.8f},{g:.8f},{b:.8f}" for i, r, g, b in offsets]
    _atomic_write(out / "offsets.csv", "\n".join(lines) + "\n")
    _write_provenance(out, "preprocess", config)
    print(f"preprocessed {len(samples)} samples into {out}")


def _load_splits(args, config: RunConfig) -> Splits:
    """Train/val/test arrays from ``--data-dir`` or, without it, fresh synthetic data."""
    cc, policy = config.cc.build(), config.augment.build()
    if args.data_dir is None:
        samples = gen_synthetic(config.data.n_samples, config.model.input_extent, config.data.seed)
        return prepare_splits(samples, config.data.split_seed, cc, policy, config.seed)
    train_s, val_s, test_s = (read_dataset(args.data_dir, split) for split in SPLITS)
    if not train_s or not val_s:
        raise CommandError(f"{args.data_dir}/manifest.csv assigns no train or no val samples")
    return Splits(prepare(train_s, cc, policy, config.seed), prepare(val_s, cc), prepare(test_s, cc))


def cmd_train(args, config: RunConfig) -> None:
    out = _require(args.out_dir, "--out-dir")
    splits = _load_splits(args, config)
    model = build_model(config.model, config.seed)

    def echo(rec):
        log.info("epoch %d: train %.4f val %.4f dsc %.4f lr %.1e", rec.epoch, rec.train_loss, rec.val_loss, rec.val_dsc, rec.lr)

    model, history = train(model, splits.train, splits.val, config.train, echo)
    out.mkdir(parents=True, exist_ok=True)
    _write_provenance(out, "train", config)
    _atomic_write(out / "history.jsonl", history.to_text())
    tmp = out / ".model.ardu.tmp"
    save_checkpoint(model, tmp)
    os.replace(tmp, out / "model.ardu")
    s = history.summary()
    print(f"best epoch {s['best_epoch']} val loss {s['best_val_loss']:.4f} val DSC {s['best_val_dsc']:.4f}")
    if history.diverged:
        raise CommandError("training diverged; best checkpoint written")


def _checkpoint_config(args, config: RunConfig) -> RunConfig:
    """Without ``--config``, use the config recorded next to the checkpoint."""
    record = args.checkpoint.parent / "run.json"
    if args.config is None and record.exists():
        stored = config_from_record(record)
        return replace(config, model=stored.model, cc=stored.cc)
    return config


def _split_samples(data_dir: Path, split: str):
    samples = read_dataset(data_dir, None if split == "all" else split)
    if not samples:
        raise CommandError(f"split {split!r} of {data_dir} is empty")
    return samples


def cmd_eval(args, config: RunConfig) -> None:
    data_dir, out = _require(args.data_dir, "--data-dir"), _require(args.out_dir, "--out-dir")
    samples = _split_samples(data_dir, args.split)
    threshold = config.train.threshold
    if args.pred_dir is not None:
        rows = []
        for s in samples:
            pred = read_mask_png(args.pred_dir / f"{s.id}.png")
            rows.append({"id": s.id, **image_metrics(pred.astype(np.float32), s.mask, threshold)})
        report = {"per_image": rows, "mean": mean_metrics(rows), "threshold": threshold}
    else:
        config = _checkpoint_config(args, config)
        model = load_checkpoint(_require(args.checkpoint, "--checkpoint"), config.model)
        data = prepare(samples, config.cc.build())
        report = evaluate(model, data, threshold, config.train.batch_size)
    text = format_report(report)
    _write_provenance(out, "eval", config)
    _atomic_write(out / "report.tsv", text)
    _atomic_write(out / "metrics.json", json.dumps(report, indent=2) + "\n")
    print(text.splitlines()[-1])


def cmd_predict(args, config: RunConfig) -> None:
    data_dir, out = _require(args.data_dir, "--data-dir"), _require(args.out_dir, "--out-dir")
    config = _checkpoint_config(args, config)
    model = load_checkpoint(_require(args.checkpoint, "--checkpoint"), config.model)
    samples = _split_samples(data_dir, args.split)
    data = prepare(samples, config.cc.build())
    probs = predict(model, data.images, config.train.batch_size)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for sid, prob in zip(data.ids, probs):
        tmp = out / "masks" / f".{sid}.png"
        write_mask_png(tmp, prob >= config.train.threshold)
        os.replace(tmp, out / "masks" / f"{sid}.png")
    _write_provenance(out, "predict", config)
    print(f"wrote {len(probs)} masks to {out / 'masks'}")


def cmd_ablate(args, config: RunConfig) -> None:
    out = _require(args.out_dir, "--out-dir")
    if args.data_dir is None:
        samples = gen_synthetic(config.data.n_samples, config.model.input_extent, config.data.seed)
    else:
        samples = read_dataset(args.data_dir)
    train_cfg = replace(config.train, max_epochs=config.ablate.max_epochs)
    seeds = [config.seed + k for k in range(config.ablate.seeds)]

    def progress(r):
        log.info("%s seed %d: val DSC %.4f best epoch %d", r.arm.name, r.seed, r.val["dsc"], r.best_epoch)

    results = run_ablation(samples, config.model, train_cfg, seeds, config.data.split_seed, progress=progress)
    summary = summarize(results)
    checks = directional_checks(summary)
    table = format_table(summary, checks)
    runs = [
        {"arm": r.arm.name, "seed": r.seed, "val": r.val, "best_epoch": r.best_epoch, "epochs_run": r.epochs_run}
        for r in results
    ]
    checks_json = [{"name": c.name, "lhs": c.lhs, "rhs": c.rhs, "slack": c.slack, "passed": c.passed} for c in checks]
    _write_provenance(out, "ablate", config)
    _atomic_write(out / "ablation.json", json.dumps({"runs": runs, "summary": summary, "checks": checks_json}, indent=2) + "\n")
    _atomic_write(out / "ablation.txt", table)
    print(table, end="")


def cmd_inspect(args, config: RunConfig) -> None:
    report = accounting_report(config.model)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(
            f"variant {report['variant']} at {report['input_extent'][0]}x{report['input_extent'][1]}\n"
            f"params  {report['params']:,} ({report['params_millions']:.2f} M; "
            f"reference {report['reference_params_millions']:.1f} M, ratio {report['params_ratio']:.3f})\n"
            f"GFLOPs  {report['gflops']:.2f} (reference {report['reference_gflops']:.1f}, "
            f"ratio {report['gflops_ratio']:.3f})\n"
            f"within 20%: {'yes' if report['within_20_percent'] else 'no'}"
        )
    if args.out_dir is not None:
        _write_provenance(args.out_dir, "inspect", config)
        _atomic_write(args.out_dir / "accounting.json", json.dumps(report, indent=2) + "\n")


COMMANDS = {
    "gen-data": cmd_gen_data,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "ablate": cmd_ablate,
    "inspect": cmd_inspect,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        config = resolve_config(args)
        COMMANDS[args.command](args, config)
    except (CommandError, OSError, ValueError) as exc:  # config, checkpoint and shape errors are ValueErrors
        print(f"attresdunet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
