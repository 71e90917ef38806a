"""Toy-task data preparation and the four-arm ablation."""

from __future__ import annotations

import logging
import statistics
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .dataio import ImageSample, SplitSpec, split_dataset
from .model import ModelConfig, build_model
from .pipeline import ArrayDataset, AugmentPolicy, ColorConstancyConfig, prepare
from .trainer import TrainConfig, TrainHistory, evaluate, train

log = logging.getLogger(__name__)


@dataclass
class Splits:
    train: ArrayDataset
    val: ArrayDataset
    test: ArrayDataset


def prepare_splits(
    samples: Sequence[ImageSample],
    split_seed: int = 0,
    cc: Optional[ColorConstancyConfig] = ColorConstancyConfig(),
    policy: Optional[AugmentPolicy] = None,
    augment_seed: int = 0,
) -> Splits:
    """Split 80/10/10 and preprocess; only the training split is expanded."""
    tr, va, te = split_dataset(list(samples), SplitSpec(seed=split_seed))
    return Splits(prepare(tr, cc, policy, augment_seed), prepare(va, cc), prepare(te, cc))


@dataclass(frozen=True)
class Arm:
    name: str
    variant: str
    color_constancy: bool
    residual: bool


# Two panels: attention variant (with CC, no shortcuts), then CC and
# residual shortcuts on the full-attention variant.
ARMS = (
    Arm("half_attention", "half_attention", True, False),
    Arm("full_attention", "full_attention", True, False),
    Arm("full_attention -cc", "full_attention", False, False),
    Arm("full_attention +res", "full_attention", True, True),
)
PANELS = ((0, 1), (2, 1, 3))


@dataclass
class ArmResult:
    arm: Arm
    seed: int
    val: dict
    best_epoch: int
    epochs_run: int
    history: TrainHistory


def run_arm(
    arm: Arm,
    seed: int,
    samples: Sequence[ImageSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    split_seed: int = 0,
    on_epoch: Optional[Callable] = None,
) -> ArmResult:
    cfg = replace(model_config, variant=arm.variant, residual=arm.residual)
    splits = prepare_splits(samples, split_seed, ColorConstancyConfig() if arm.color_constancy else None)
    model = build_model(cfg, seed)
    model, history = train(model, splits.train, splits.val, replace(train_config, seed=seed), on_epoch)
    report = evaluate(model, splits.val, train_config.threshold, train_config.batch_size)
    return ArmResult(arm, seed, report["mean"], history.best_epoch, len(history.epochs), history)


def run_ablation(
    samples: Sequence[ImageSample],
    model_config: ModelConfig,
    train_config: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2),
    split_seed: int = 0,
    arms: Sequence[Arm] = ARMS,
    progress: Optional[Callable[[ArmResult], None]] = None,
) -> list[ArmResult]:
    results = []
    for arm in arms:
        for seed in seeds:
            result = run_arm(arm, seed, samples, model_config, train_config, split_seed)
            log.info("arm %s seed %d: val DSC %.4f, best epoch %d", arm.name, seed, result.val["dsc"], result.best_epoch)
            if progress is not None:
                progress(result)
            results.append(result)
    return results


def summarize(results: Sequence[ArmResult]) -> dict[str, dict]:
    """Per-arm mean validation metrics and median best epoch."""
    out: dict[str, dict] = {}
    for arm in dict.fromkeys(r.arm for r in results):
        rows = [r for r in results if r.arm == arm]
        out[arm.name] = {
            **{k: float(np.mean([r.val[k] for r in rows])) for k in rows[0].val},
            "dsc_std": float(np.std([r.val["dsc"] for r in rows])),
            "median_best_epoch": float(statistics.median(r.best_epoch for r in rows)),
            "seeds": len(rows),
        }
    return out


@dataclass(frozen=True)
class DirectionalCheck:
    name: str
    lhs: float
    rhs: float
    slack: float

    @property
    def passed(self) -> bool:
        return self.lhs >= self.rhs - self.slack


def directional_checks(summary: dict[str, dict], dsc_slack: float = 0.02, epoch_slack: float = 3.0) -> list[DirectionalCheck]:
    """Expected orderings between arms, each with a tolerance.

    The best-epoch check is phrased as ``-res >= +res`` so that every check
    reads ``lhs >= rhs - slack``.
    """
    half, full = summary["half_attention"], summary["full_attention"]
    no_cc, res = summary["full_attention -cc"], summary["full_attention +res"]
    return [
        DirectionalCheck("full >= half attention (val DSC)", full["dsc"], half["dsc"], dsc_slack),
        DirectionalCheck("+cc >= -cc (val DSC)", full["dsc"], no_cc["dsc"], dsc_slack),
        DirectionalCheck(
            "residual converges no later (median best epoch)",
            full["median_best_epoch"], res["median_best_epoch"], epoch_slack,
        ),
    ]


def format_table(summary: dict[str, dict], checks: Sequence[DirectionalCheck] = ()) -> str:
    """Two-panel comparison in percent, plus the directional checks."""
    header = f"{'arm':<22}{'DSC':>8}{'IOU':>8}{'Recall':>8}{'Prec.':>8}{'best ep':>9}"
    rule = "-" * len(header)
    lines = [header, rule]
    names = [a.name for a in ARMS]
    for panel in PANELS:
        for i in panel:
            row = summary.get(names[i])
            if row is None:
                continue
            lines.append(
                f"{names[i]:<22}{100 * row['dsc']:>8.2f}{100 * row['iou']:>8.2f}"
                f"{100 * row['recall']:>8.2f}{100 * row['precision']:>8.2f}{row['median_best_epoch']:>9.1f}"
            )
        lines.append(rule)
    for c in checks:
        lines.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.lhs:.4f} vs {c.rhs:.4f} (slack {c.slack})")
    return "\n".join(lines) + "\n"
