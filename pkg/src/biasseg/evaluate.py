"""Metrics and stratified reporting.

Dice/IoU on binary masks, rank-based ROC-AUC, a linear probe over frozen
pooled image features, per-group/modality/attribute breakdowns with gap
statistics, and the ablation harness that trains and compares the four
loss-term variants under shared seeds.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .autodiff import Tensor
from .data import Dataset
from .errors import ContractError, ShapeError, UndefinedMetricError
from .hitl import binarize, error_region, sample_corrective_points
from .model import ModelParams, PromptPoint, encode_image, model_forward
from .uncertainty import UncertaintyHyper, uncertainty_record

# Seed tags for the evaluation protocol. Fixed constants (not derived from any
# training seed) so every trained variant is scored against the identical
# prompts and the identical simulated clicks -- paired comparisons.
_EVAL_PROMPT_TAG = 0xE7A1
_EVAL_CLICK_TAG = 0xC11C


def frozen_view(params: ModelParams) -> ModelParams:
    """Same parameter buffers, requires_grad off: inference without a graph."""
    return ModelParams(
        params.hyper,
        {n: Tensor(t.data, requires_grad=False) for n, t in params.tensors.items()},
    )


# -- mask metrics ---------------------------------------------------------------


def dice_iou(M: np.ndarray, Y: np.ndarray) -> Tuple[float, float]:
    """Dice and IoU between binary masks; both-empty counts as a perfect (1, 1)."""
    M = np.asarray(M)
    Y = np.asarray(Y)
    if M.shape != Y.shape:
        raise ShapeError(f"mask shapes differ: {M.shape} vs {Y.shape}")
    m = M.astype(bool)
    y = Y.astype(bool)
    inter = int(np.count_nonzero(m & y))
    size_sum = int(np.count_nonzero(m)) + int(np.count_nonzero(y))
    if size_sum == 0:
        return 1.0, 1.0
    union = int(np.count_nonzero(m | y))
    return 2.0 * inter / size_sum, inter / union


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability a random positive outscores a random negative, ties at 1/2.

    Computed from average ranks, which is exactly the pairwise-concordance
    count (and equals trapezoidal ROC integration).
    """
    s = np.asarray(scores, dtype=np.float64)
    lab = np.asarray(labels)
    if s.shape != lab.shape or s.ndim != 1:
        raise ShapeError("scores and labels must be equal-length 1-D sequences")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores must be finite")
    n_pos = int(np.count_nonzero(lab == 1))
    n_neg = int(np.count_nonzero(lab == 0))
    if n_pos + n_neg != lab.size:
        raise ContractError("labels must be binary 0/1")
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(s.size, dtype=np.float64)
    ranks[order] = np.arange(1, s.size + 1)
    # average the ranks within tied groups
    for v in np.unique(s):
        tied = s == v
        if np.count_nonzero(tied) > 1:
            ranks[tied] = ranks[tied].mean()
    rank_sum_pos = float(ranks[lab == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


# -- evaluation protocol ----------------------------------------------------------


def eval_point_prompt(mask: np.ndarray, key: int) -> PromptPoint:
    """One foreground point drawn from a per-sample seeded stream.

    The stream depends only on `key` (the sample's position in its split), so
    different trained models are always scored against identical prompts.
    """
    ys, xs = np.nonzero(np.asarray(mask))
    if xs.size == 0:
        raise ContractError("cannot place a foreground prompt on an empty mask")
    rng = np.random.default_rng(np.random.SeedSequence([_EVAL_PROMPT_TAG, int(key)]))
    j = int(rng.integers(xs.size))
    return PromptPoint(int(xs[j]), int(ys[j]), "positive")


@dataclass
class PredictionRecord:
    sample_id: str
    mask: np.ndarray  # H×W uint8 prediction
    dice: float
    iou: float
    u_vl: float


def predict_dataset(
    params: ModelParams,
    dataset: Dataset,
    clicks: int = 0,
    hyper=None,
) -> List[PredictionRecord]:
    """Score every sample with the seeded point prompt; optionally refine.

    With clicks > 0, each round binarizes the current prediction, draws one
    corrective point from the error region (seeded per sample), appends it to
    the prompt, and reruns the model. A sample whose error region is already
    empty keeps its prediction.
    """
    hyper = hyper or UncertaintyHyper()
    fro = frozen_view(params)
    out_records: List[PredictionRecord] = []
    for i, rec in enumerate(dataset.records):
        concept = dataset.concepts[rec.concept_id]
        modality = dataset.modalities[rec.modality_id]
        points = [eval_point_prompt(rec.mask, i)]
        out = model_forward(fro, rec.image, concept, modality, points=points)
        click_rng = np.random.default_rng(np.random.SeedSequence([_EVAL_CLICK_TAG, i]))
        for _ in range(clicks):
            region = error_region(binarize(out.P.data), rec.mask)
            extra = sample_corrective_points(region, 1, click_rng)
            if not extra:
                break
            points = points + extra
            out = model_forward(fro, rec.image, concept, modality, points=points)
        M = binarize(out.P.data)
        d, j = dice_iou(M, rec.mask)
        urec = uncertainty_record(
            out.z_img.data, out.P.data, out.z_bar_vlm.data[0], 0.0, hyper
        )
        out_records.append(
            PredictionRecord(sample_id=rec.id, mask=M, dice=d, iou=j, u_vl=urec.u_vl)
        )
    return out_records


# -- stratified reporting ----------------------------------------------------------


@dataclass
class StratifiedReport:
    overall: Dict[str, float]
    by_group: Dict[str, Dict[str, float]]
    by_modality: Dict[str, Dict[str, float]]
    by_attribute: Dict[str, Dict[str, float]]
    gaps: Dict[str, Dict[str, float]]
    n_total: int

    def to_dict(self) -> dict:
        return {
            "overall": self.overall,
            "by_group": self.by_group,
            "by_modality": self.by_modality,
            "by_attribute": self.by_attribute,
            "gaps": self.gaps,
            "n_total": self.n_total,
        }


def _cell_means(pairs: List[Tuple[float, float]]) -> Dict[str, float]:
    d = float(np.mean([p[0] for p in pairs]))
    j = float(np.mean([p[1] for p in pairs]))
    return {"dice": d, "iou": j, "n": len(pairs)}


def stratified_report(
    predictions: Mapping[str, np.ndarray], dataset: Dataset
) -> StratifiedReport:
    """Per-cell Dice/IoU means over prevalence group, modality and attribute."""
    per_group: Dict[str, List[Tuple[float, float]]] = {}
    per_mod: Dict[str, List[Tuple[float, float]]] = {}
    per_attr: Dict[str, List[Tuple[float, float]]] = {}
    all_pairs: List[Tuple[float, float]] = []
    for rec in dataset.records:
        if rec.id not in predictions:
            raise ContractError(f"missing prediction for sample {rec.id}")
        d, j = dice_iou(predictions[rec.id], rec.mask)
        pair = (d, j)
        all_pairs.append(pair)
        per_group.setdefault(rec.prevalence_group, []).append(pair)
        per_mod.setdefault(dataset.modalities[rec.modality_id], []).append(pair)
        per_attr.setdefault(dataset.attributes[rec.attribute_id], []).append(pair)

    by_group = {k: _cell_means(v) for k, v in sorted(per_group.items())}
    by_modality = {k: _cell_means(v) for k, v in sorted(per_mod.items())}
    by_attribute = {k: _cell_means(v) for k, v in sorted(per_attr.items())}

    def gap(cells: Dict[str, Dict[str, float]], metric: str) -> float:
        vals = [c[metric] for c in cells.values()]
        return float(max(vals) - min(vals))

    gaps = {
        "by_group": {m: gap(by_group, m) for m in ("dice", "iou")},
        "by_modality": {m: gap(by_modality, m) for m in ("dice", "iou")},
        "by_attribute": {m: gap(by_attribute, m) for m in ("dice", "iou")},
    }
    overall = {
        "dice": float(np.mean([p[0] for p in all_pairs])),
        "iou": float(np.mean([p[1] for p in all_pairs])),
    }
    return StratifiedReport(
        overall=overall,
        by_group=by_group,
        by_modality=by_modality,
        by_attribute=by_attribute,
        gaps=gaps,
        n_total=len(all_pairs),
    )


def write_report(report: StratifiedReport, out_dir, stem: str = "report") -> None:
    """Emit the report as <stem>.json and <stem>.csv (one row per cell)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"{stem}.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    with open(out_dir / f"{stem}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["stratification", "cell", "n", "dice", "iou"])
        w.writerow(["overall", "all", report.n_total,
                    f"{report.overall['dice']:.6f}", f"{report.overall['iou']:.6f}"])
        for strat_name, cells in (
            ("group", report.by_group),
            ("modality", report.by_modality),
            ("attribute", report.by_attribute),
        ):
            for cell, stats in cells.items():
                w.writerow([strat_name, cell, stats["n"],
                            f"{stats['dice']:.6f}", f"{stats['iou']:.6f}"])


# -- linear probe -------------------------------------------------------------------


def pooled_features(params: ModelParams, dataset: Dataset) -> np.ndarray:
    """Frozen encoder features, global-average pooled to one length-C row each."""
    fro = frozen_view(params)
    rows = [encode_image(fro, rec.image).data.mean(axis=(1, 2)) for rec in dataset.records]
    return np.stack(rows).astype(np.float64)


def linear_probe(
    train_features: np.ndarray,
    train_labels: Sequence[int],
    test_features: np.ndarray,
    test_labels: Sequence[int],
    label_groups: Mapping[int, str],
    seed: int = 0,
    steps: int = 400,
    lr: float = 0.5,
) -> Dict[str, object]:
    """Multinomial logistic regression on frozen features, grouped accuracies.

    Full-batch gradient descent on softmax cross-entropy; features are
    standardized with train-split statistics. Reports overall test accuracy
    plus per-group and macro accuracy over the label groups.
    """
    X = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    Xt = np.asarray(test_features, dtype=np.float64)
    yt = np.asarray(test_labels, dtype=np.int64)
    classes = np.unique(y)
    if classes.size < 2:
        raise UndefinedMetricError("probe training labels contain a single class")
    k = int(classes.max()) + 1

    mu = X.mean(axis=0)
    sd = X.std(axis=0) + 1e-8
    X = (X - mu) / sd
    Xt = (Xt - mu) / sd
    X = np.hstack([X, np.ones((X.shape[0], 1))])
    Xt = np.hstack([Xt, np.ones((Xt.shape[0], 1))])

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x1BE]))
    W = rng.normal(0.0, 1e-2, size=(X.shape[1], k))
    onehot = np.eye(k)[y]
    for _ in range(steps):
        logits = X @ W
        logits -= logits.max(axis=1, keepdims=True)
        p = np.exp(logits)
        p /= p.sum(axis=1, keepdims=True)
        W -= lr * (X.T @ (p - onehot)) / X.shape[0]

    pred = np.argmax(Xt @ W, axis=1)
    correct = pred == yt
    overall = float(correct.mean())
    per_group: Dict[str, float] = {}
    for g in sorted(set(label_groups.values())):
        sel = np.array([label_groups[int(c)] == g for c in yt])
        if np.any(sel):
            per_group[g] = float(correct[sel].mean())
    macro = float(np.mean(list(per_group.values())))
    return {"overall": overall, "per_group": per_group, "macro": macro}


# -- ablation harness ----------------------------------------------------------------

VARIANTS: Tuple[Tuple[str, bool, bool], ...] = (
    ("baseline", False, False),
    ("weighting", True, False),
    ("hitl", False, True),
    ("full", True, True),
)


def _mean_cells(reports: List[StratifiedReport]) -> dict:
    """Seed-average the overall and per-group numbers of several reports."""
    out = {
        "overall_dice": float(np.mean([r.overall["dice"] for r in reports])),
        "overall_iou": float(np.mean([r.overall["iou"] for r in reports])),
        "group_gap_dice": float(np.mean([r.gaps["by_group"]["dice"] for r in reports])),
    }
    for g in ("head", "medium", "tail"):
        cells = [r.by_group[g] for r in reports if g in r.by_group]
        if cells:
            out[f"{g}_dice"] = float(np.mean([c["dice"] for c in cells]))
            out[f"{g}_iou"] = float(np.mean([c["iou"] for c in cells]))
    return out


def ablation_run(
    base_config,
    train_ds: Dataset,
    test_ds: Dataset,
    seeds: Sequence[int],
    out_dir=None,
) -> Dict[str, dict]:
    """Train baseline/+weighting/+hitl/full under shared seeds and compare.

    The full variant is additionally scored with one simulated corrective
    click per test sample ("full+click"). A variant that fails to train is
    recorded with its error and the remaining variants still run.
    """
    from . import train as _train  # deferred: trainer imports this module's metrics

    if len(seeds) < 2:
        raise ContractError("ablation needs at least 2 seeds")
    table: Dict[str, dict] = {}
    reports: Dict[str, List[StratifiedReport]] = {}
    for name, weighting, hitl_flag in VARIANTS:
        per_seed_reports: List[StratifiedReport] = []
        click_reports: List[StratifiedReport] = []
        try:
            for seed in seeds:
                cfg = replace(
                    base_config,
                    seed=int(seed),
                    uncertainty_weighting=weighting,
                    hitl=hitl_flag,
                )
                run_dir = None
                if out_dir is not None:
                    run_dir = Path(out_dir) / f"{name}_seed{seed}"
                params, _ = _train.train(cfg, train_ds, eval_ds=None, out_dir=run_dir)
                preds = predict_dataset(params, test_ds, clicks=0, hyper=cfg.hyper)
                per_seed_reports.append(
                    stratified_report({p.sample_id: p.mask for p in preds}, test_ds)
                )
                if name == "full":
                    cpreds = predict_dataset(params, test_ds, clicks=1, hyper=cfg.hyper)
                    click_reports.append(
                        stratified_report({p.sample_id: p.mask for p in cpreds}, test_ds)
                    )
        except Exception as e:  # noqa: BLE001 - per-variant continuation is the contract
            table[name] = {"error": f"{type(e).__name__}: {e}"}
            continue
        reports[name] = per_seed_reports
        table[name] = _mean_cells(per_seed_reports)
        if name == "full" and click_reports:
            reports["full+click"] = click_reports
            table["full+click"] = _mean_cells(click_reports)

    if out_dir is not None:
        _write_ablation_table(table, Path(out_dir))
    return table


def _write_ablation_table(table: Dict[str, dict], out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.json").write_text(
        json.dumps(table, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    cols = [
        "overall_dice", "overall_iou", "head_dice", "medium_dice", "tail_dice",
        "head_iou", "medium_iou", "tail_iou", "group_gap_dice",
    ]
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["variant"] + cols)
        for name in ("baseline", "weighting", "hitl", "full", "full+click"):
            if name not in table:
                continue
            row = table[name]
            if "error" in row:
                w.writerow([name, "error:" + row["error"]])
            else:
                w.writerow([name] + [f"{row[c]:.6f}" if c in row else "" for c in cols])
