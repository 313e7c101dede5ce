"""Cross-validated training, evaluation and the six-variant ablation sweep."""

from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import LABELS, ORGANS, FoldSplit, split_folds
from .errors import ConfigurationError, FormatError
from .metrics import MetricsReport, OrganScore, aggregate_folds, score_masks
from .networks import Network, NetworkConfig, VariantId, predict_mask
from .training import StagePlan, TrainConfig, stack_batch, staged_train

logger = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    """What a JSON config file holds: network shape, optimizer, stage budgets."""

    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    stage_epochs: list | int | None = None  # None -> train.epochs for every stage

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"network", "train", "stage_epochs"}
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        net_fields = {f.name for f in fields(NetworkConfig)}
        bad = set(d.get("network", {})) - net_fields
        if bad:
            raise ConfigurationError(f"unknown NetworkConfig fields: {sorted(bad)}")
        return cls(
            NetworkConfig(**d.get("network", {})),
            TrainConfig.from_dict(d.get("train", {})),
            d.get("stage_epochs"),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc.msg}", exc.pos) from None

    def plan(self, variant: VariantId) -> StagePlan:
        epochs = self.train.epochs if self.stage_epochs is None else self.stage_epochs
        if isinstance(epochs, list) and not VariantId(variant).is_cascade:
            epochs = epochs[:2]
        return StagePlan.for_variant(variant, epochs)


def evaluate(net: Network, samples: Sequence, organs=ORGANS, batch_size: int = 8) -> list:
    """Fold-level scores: pixels pooled over every sample."""
    preds, gts = [], []
    for lo in range(0, len(samples), batch_size):
        images, masks = stack_batch(samples[lo:lo + batch_size])
        preds.extend(predict_mask(net, images))
        gts.extend(masks)
    return score_masks(preds, gts, organs)


def scores_to_json(scores: Sequence[OrganScore]) -> list:
    return [
        {
            "organ": LABELS[s.organ],
            "label": s.organ,
            "dice": None if math.isnan(s.dice) else s.dice,
            "jaccard": None if math.isnan(s.jaccard) else s.jaccard,
            "defined": s.defined,
        }
        for s in scores
    ]


def scores_from_json(rows: list) -> list:
    return [
        OrganScore(
            r["label"],
            math.nan if r["dice"] is None else r["dice"],
            math.nan if r["jaccard"] is None else r["jaccard"],
            r["defined"],
        )
        for r in rows
    ]


def fold_report_json(variant: VariantId, fold: int, scores) -> str:
    doc = {"variant": VariantId(variant).name, "fold": fold, "scores": scores_to_json(scores)}
    return json.dumps(doc, indent=2) + "\n"


def mean_dice(scores: Sequence[OrganScore]) -> float:
    vals = [s.dice for s in scores if s.defined]
    return float(np.mean(vals)) if vals else math.nan


@dataclass
class FoldResult:
    variant: VariantId
    fold: int
    test_scores: list
    train_scores: list
    network: Network | None = None


def run_fold(
    variant: VariantId,
    samples: Sequence,
    split: FoldSplit,
    fold: int,
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
) -> FoldResult:
    """Staged training on every fold but ``fold``, then scoring on both sides."""
    train, test = split.train_test(samples, fold)
    if not train or not test:
        raise ConfigurationError(f"fold {fold} leaves an empty train or test set")
    result = staged_train(variant, train, config.plan(variant), config.train, config.network, out_dir)
    test_scores = evaluate(result.network, test)
    train_scores = evaluate(result.network, train)
    if out_dir is not None:
        out = Path(out_dir)
        (out / "final.ckpt").write_bytes(result.checkpoints[-1])
        (out / "validation.json").write_text(fold_report_json(variant, fold, test_scores))
    return FoldResult(VariantId(variant), fold, test_scores, train_scores, result.network)


def worker_count() -> int:
    raw = os.environ.get("SECP_THREADS", "")
    try:
        n = int(raw) if raw else 1
    except ValueError:
        raise ConfigurationError(f"SECP_THREADS must be an integer, got {raw!r}") from None
    return max(1, n)


@dataclass
class AblationResult:
    reports: dict  # variant label -> MetricsReport
    folds: dict  # (variant, fold) -> FoldResult

    def train_mean_dice(self, variant: VariantId) -> float:
        vals = [mean_dice(r.train_scores) for (v, _), r in self.folds.items() if v == variant]
        return float(np.nanmean(vals))


def run_ablation(
    samples: Sequence,
    config: ExperimentConfig,
    k: int = 5,
    variants: Sequence[VariantId] = tuple(VariantId),
    threads: int | None = None,
) -> AblationResult:
    """Every variant on every fold; jobs may run in parallel but results are
    keyed by (variant, fold), so output order never depends on scheduling."""
    split = split_folds([s.patient_id for s in samples], k, config.train.seed)
    jobs = [(VariantId(v), f) for v in variants for f in range(k)]
    threads = threads or worker_count()

    def job(key):
        v, f = key
        logger.info("ablation: %s fold %d", v.name, f)
        r = run_fold(v, samples, split, f, config)
        r.network = None
        return key, r

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = dict(pool.map(job, jobs))
    else:
        done = dict(job(key) for key in jobs)
    results = {key: done[key] for key in jobs}
    reports = {
        VariantId(v).label: aggregate_folds([results[(VariantId(v), f)].test_scores for f in range(k)])
        for v in variants
    }
    return AblationResult(reports, results)
