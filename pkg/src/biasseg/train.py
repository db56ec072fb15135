"""Training loop and its loss terms.

Each step runs a first forward pass per sample with one random foreground
point prompt, computes per-sample uncertainty, selects the hardest fraction
of the batch, refines those samples with simulated corrective clicks, and
optimizes the weighted sum of three terms:

  segmentation  sum_i v_i * w_i * dice_loss_i   (w_i = exp(lambda_u * u_i))
  refinement    sum over the hard set of v_i * refined dice_loss_i
  next-token    mean NLL of the text tokens under the semantic head

v_i flags samples that actually carry a mask; w_i is treated as a constant
(no gradient flows through the weight itself). Emits JSON-lines step logs,
per-epoch summaries, and .bcvl checkpoints at epoch boundaries.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .errors import ConfigError, ContractError, DivergenceError, VocabularyError
from .evaluate import dice_iou, eval_point_prompt, frozen_view
from .hitl import binarize, error_region, sample_corrective_points, select_hard, refine_pass
from .model import Hyper, ModelParams, PromptPoint, model_forward, save_checkpoint
from .uncertainty import UncertaintyHyper, soft_dice_loss, uncertainty_record

# Learning-rate presets. The toy rate drives the desk-scale model here; the
# two "full_*" entries record the rates used by large pretrained backbones
# (stage-one alignment, stage-two refinement) and are far too small for a
# model of this size.
LR_PRESETS: Dict[str, float] = {
    "toy": 1e-3,
    "full_stage1": 1e-5,
    "full_stage2": 5e-6,
}

# seed-stream tags so the independent random decisions never share a stream
_TAG_SHUFFLE = 0x5841
_TAG_PROMPT = 0x9D07
_TAG_CLICK = 0xC10B
_TAG_TEXT_ONLY = 0x7E27


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    lr: float = LR_PRESETS["toy"]
    epochs: int = 1
    seed: int = 0
    hyper: UncertaintyHyper = field(default_factory=UncertaintyHyper)
    arch: Hyper = field(default_factory=Hyper)
    r: float = 0.3
    uncertainty_weighting: bool = True
    hitl: bool = True
    vlm_loss: bool = True
    loss_weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    n_corrective: int = 1
    weight_decay: float = 0.01
    # fraction of training samples treated as text-only (v_i = 0): the mask
    # is hidden from every loss and the sample never enters the hard set
    text_only_ratio: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not (self.lr > 0 and np.isfinite(self.lr)):
            raise ConfigError("lr must be positive and finite")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not (0 < self.r <= 1):
            raise ConfigError("r must lie in (0, 1]")
        if self.n_corrective < 1:
            raise ConfigError("n_corrective must be >= 1")
        if len(self.loss_weights) != 3 or any(
            not np.isfinite(w) or w < 0 for w in self.loss_weights
        ):
            raise ConfigError("loss_weights must be three finite non-negative numbers")
        if not (0 <= self.text_only_ratio < 1):
            raise ConfigError("text_only_ratio must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "lr": self.lr,
            "epochs": self.epochs,
            "seed": self.seed,
            "r": self.r,
            "uncertainty_weighting": self.uncertainty_weighting,
            "hitl": self.hitl,
            "vlm_loss": self.vlm_loss,
            "loss_weights": list(self.loss_weights),
            "n_corrective": self.n_corrective,
            "weight_decay": self.weight_decay,
            "text_only_ratio": self.text_only_ratio,
            "hyper": {
                "beta_vl": self.hyper.beta_vl,
                "lambda_u": self.hyper.lambda_u,
                "eps1": self.hyper.eps1,
                "eps_d": self.hyper.eps_d,
            },
            "arch": {
                "C": self.arch.C,
                "d": self.arch.d,
                "heads": self.arch.heads,
                "V": self.arch.V,
                "L_max": self.arch.L_max,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        hyper = UncertaintyHyper(**d.pop("hyper", {}))
        arch_d = d.pop("arch", {})
        arch = Hyper(**arch_d) if arch_d else Hyper()
        if "loss_weights" in d:
            d["loss_weights"] = tuple(d["loss_weights"])
        try:
            return cls(hyper=hyper, arch=arch, **d)
        except TypeError as e:
            raise ConfigError(f"unknown config key: {e}") from None


# -- optimizer ---------------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay; slots keyed by parameter name."""

    def __init__(
        self,
        params: ModelParams,
        lr: float,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.01,
    ):
        self.params = params
        self.lr = float(lr)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = float(weight_decay)
        self.t = 0
        self.m = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}
        self.v = {n: np.zeros_like(t.data) for n, t in params.tensors.items()}

    def step(self) -> None:
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for name, tensor in self.params.tensors.items():
            g = tensor.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * tensor.data
            tensor.data -= self.lr * update


# -- loss terms --------------------------------------------------------------------


def _zero_scalar() -> Tensor:
    return Tensor(np.float64(0.0))


def loss_aur(
    dice_losses: Sequence[Optional[Tensor]],
    weights: Sequence[float],
    v_flags: Sequence[int],
    weighting: bool = True,
) -> Tensor:
    """sum_i v_i * w_i * dice_loss_i; with weighting off, w_i is forced to 1."""
    if not (len(dice_losses) == len(weights) == len(v_flags)):
        raise ContractError("dice_losses, weights and v_flags must align")
    total = _zero_scalar()
    for l, w, v in zip(dice_losses, weights, v_flags):
        if not v:
            continue
        if l is None:
            raise ContractError("valid sample (v=1) is missing its dice loss")
        coeff = float(w) if weighting else 1.0
        total = total + l * coeff
    return total


def loss_hitl(refine_losses: Sequence[Tensor], v_flags: Sequence[int]) -> Tensor:
    """sum over the hard set of v_i * refined dice loss (empty set -> 0)."""
    if len(refine_losses) != len(v_flags):
        raise ContractError("refine_losses and v_flags must align")
    total = _zero_scalar()
    for l, v in zip(refine_losses, v_flags):
        if v:
            total = total + l
    return total


def loss_vlm(
    next_token_logits: Tensor,
    targets: np.ndarray,
    pad_mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Mean negative log-likelihood of the targets; pad positions excluded.

    Row j of the logits scores the token that should appear at position j+1,
    so callers pass rows already aligned with their targets. All positions
    padded yields 0 by convention.
    """
    targets = np.asarray(targets, dtype=np.int64)
    n, V = next_token_logits.shape
    if targets.shape != (n,):
        raise ContractError(f"targets must have shape ({n},), got {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= V):
        raise VocabularyError("target token id outside the vocabulary")
    keep = np.ones(n, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
    if keep.shape != (n,):
        raise ContractError("pad mask must align with targets")
    rows = np.nonzero(keep)[0]
    if rows.size == 0:
        return _zero_scalar()
    # stable log-softmax: subtract the detached row max, pick target entries
    row_max = np.max(next_token_logits.data, axis=1, keepdims=True)
    shifted = next_token_logits - Tensor(np.broadcast_to(row_max, (n, V)).copy())
    lse = ad.log(ad.tsum(ad.exp(shifted), axis=1, keepdims=True))  # (n, 1)
    picked = shifted[rows, targets[rows]]  # (k,)
    lse_rows = lse[rows, np.zeros(rows.size, dtype=np.int64)]  # (k,)
    return ad.tmean(lse_rows - picked)


def total_loss(
    l_aur: Tensor, l_hitl: Tensor, l_vlm: Tensor,
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Tensor:
    a, b, c = (float(w) for w in weights)
    return l_aur * a + l_hitl * b + l_vlm * c


def _vlm_term(out) -> Tensor:
    """Token-mean NLL of one sample's text segment."""
    lo = out.l1 - 1
    rows = out.next_token_logits[lo: lo + len(out.token_ids)]
    return loss_vlm(rows, np.asarray(out.token_ids))


# -- the loop ----------------------------------------------------------------------


@dataclass
class TrainLog:
    steps: List[dict] = field(default_factory=list)
    epochs: List[dict] = field(default_factory=list)
    refine_passes: int = 0


def _finite_or_none(x: float) -> Optional[float]:
    x = float(x)
    return x if np.isfinite(x) else None


def train(
    config: TrainConfig,
    train_ds: Dataset,
    eval_ds: Optional[Dataset] = None,
    out_dir=None,
    dtype=np.float64,
) -> Tuple[ModelParams, TrainLog]:
    """Run the full loop; returns final parameters and the in-memory log.

    With out_dir set, also writes steps.jsonl (one record per step),
    summary.json (per-epoch aggregates plus the resolved config), and
    epoch_<n>.bcvl checkpoints. Deterministic given (config, dataset).
    """
    n = len(train_ds)
    if n == 0:
        raise ContractError("training set is empty")

    params = ModelParams.init(config.seed, config.arch, dtype=dtype)
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _TAG_SHUFFLE]))
    prompt_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _TAG_PROMPT]))
    click_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _TAG_CLICK]))

    text_only: set = set()
    if config.text_only_ratio > 0:
        k = int(np.floor(config.text_only_ratio * n))
        pick_rng = np.random.default_rng(np.random.SeedSequence([config.seed, _TAG_TEXT_ONLY]))
        text_only = set(pick_rng.choice(n, size=k, replace=False).tolist())

    log = TrainLog()
    steps_file = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        steps_file = open(out_dir / "steps.jsonl", "w", encoding="utf-8")

    def emit(record: dict) -> None:
        log.steps.append(record)
        if steps_file is not None:
            steps_file.write(json.dumps(record) + "\n")
            steps_file.flush()

    step = 0
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.monotonic()
            order = shuffle_rng.permutation(n)
            epoch_losses: List[float] = []
            for start in range(0, n, config.batch_size):
                batch = [int(i) for i in order[start: start + config.batch_size]]
                step += 1

                outs, prompts, dice_losses, records, v_flags = [], [], [], [], []
                for i in batch:
                    rec = train_ds[i]
                    v = 0 if i in text_only else 1
                    if v:
                        ys, xs = np.nonzero(rec.mask)
                        j = int(prompt_rng.integers(xs.size))
                        pt = PromptPoint(int(xs[j]), int(ys[j]), "positive")
                    else:
                        h, w = rec.image.shape
                        pt = PromptPoint(w // 2, h // 2, "positive")
                    out = model_forward(
                        params, rec.image,
                        train_ds.concepts[rec.concept_id],
                        train_ds.modalities[rec.modality_id],
                        points=[pt],
                    )
                    l_dice = soft_dice_loss(out.P, rec.mask, config.hyper.eps_d) if v else None
                    urec = uncertainty_record(
                        out.z_img.data, out.P.data, out.z_bar_vlm.data[0],
                        l_dice.item() if v else 0.0, config.hyper,
                    )
                    outs.append(out)
                    prompts.append(pt)
                    dice_losses.append(l_dice)
                    records.append(urec)
                    v_flags.append(v)

                if any(not np.isfinite(r.u) for r in records):
                    emit({
                        "step": step, "epoch": epoch,
                        "loss_aur": None, "loss_hitl": None, "loss_vlm": None,
                        "loss": None, "mean_u": None, "mean_w": None,
                        "hard_indices": [], "hard_ids": [],
                    })
                    raise DivergenceError(step, float("nan"))

                weights = [r.w for r in records]
                l_aur = loss_aur(dice_losses, weights, v_flags,
                                 weighting=config.uncertainty_weighting)

                hard_positions: List[int] = []
                refine_losses: List[Tensor] = []
                if config.hitl:
                    valid = [p for p, v in enumerate(v_flags) if v]
                    if valid:
                        hs = select_hard([records[p].u for p in valid], config.r)
                        hard_positions = [valid[q] for q in hs.indices]
                    for p in hard_positions:
                        rec = train_ds[batch[p]]
                        region = error_region(binarize(outs[p].P.data), rec.mask)
                        extra = sample_corrective_points(region, config.n_corrective, click_rng)
                        _, l_ref = refine_pass(
                            params, rec.image,
                            train_ds.concepts[rec.concept_id],
                            train_ds.modalities[rec.modality_id],
                            [prompts[p]], extra,
                            ground_truth=rec.mask, eps_d=config.hyper.eps_d,
                        )
                        log.refine_passes += 1
                        refine_losses.append(l_ref)
                l_hitl = loss_hitl(refine_losses, [1] * len(refine_losses))

                if config.vlm_loss:
                    terms = [_vlm_term(out) for out in outs]
                    l_vlm = sum(terms, _zero_scalar()) * (1.0 / len(terms))
                else:
                    l_vlm = _zero_scalar()

                loss = total_loss(l_aur, l_hitl, l_vlm, config.loss_weights)
                loss_val = float(loss.data)

                record = {
                    "step": step,
                    "epoch": epoch,
                    "loss_aur": _finite_or_none(l_aur.data),
                    "loss_hitl": _finite_or_none(l_hitl.data),
                    "loss_vlm": _finite_or_none(l_vlm.data),
                    "loss": _finite_or_none(loss_val),
                    "mean_u": _finite_or_none(np.mean([r.u for r in records])),
                    "mean_w": _finite_or_none(np.mean(weights)),
                    "hard_indices": hard_positions,
                    "hard_ids": [train_ds[batch[p]].id for p in hard_positions],
                }
                emit(record)
                if not np.isfinite(loss_val):
                    raise DivergenceError(step, loss_val)

                params.zero_grads()
                ad.backward(loss)
                opt.step()
                epoch_losses.append(loss_val)

            summary = {
                "epoch": epoch,
                "train_loss_mean": float(np.mean(epoch_losses)),
                "seconds": round(time.monotonic() - t0, 3),
            }
            if eval_ds is not None:
                summary.update(_epoch_eval(params, eval_ds))
            log.epochs.append(summary)
            if out_dir is not None:
                save_checkpoint(params, out_dir / f"epoch_{epoch}.bcvl")
                (out_dir / "summary.json").write_text(
                    json.dumps(
                        {
                            "config": config.to_dict(),
                            "epochs": log.epochs,
                            "refine_passes": log.refine_passes,
                            "n_parameters": params.n_parameters(),
                        },
                        indent=2,
                    )
                    + "\n",
                    encoding="utf-8",
                )
    finally:
        if steps_file is not None:
            steps_file.close()

    # Checkpoints hold 32-bit floats, so hand back exactly what a reload of
    # the final checkpoint would produce; the higher-precision accumulators
    # only matter while steps are still being taken.
    params = ModelParams(
        params.hyper,
        {
            name: Tensor(t.data.astype(np.float32), requires_grad=True)
            for name, t in params.tensors.items()
        },
    )
    return params, log


def _epoch_eval(params: ModelParams, eval_ds: Dataset) -> dict:
    """Mean Dice/IoU over a split with the seeded evaluation prompts."""
    fro = frozen_view(params)
    dices, ious = [], []
    for i, rec in enumerate(eval_ds.records):
        out = model_forward(
            fro, rec.image,
            eval_ds.concepts[rec.concept_id],
            eval_ds.modalities[rec.modality_id],
            points=[eval_point_prompt(rec.mask, i)],
        )
        d, j = dice_iou(binarize(out.P.data), rec.mask)
        dices.append(d)
        ious.append(j)
    return {"eval_dice_mean": float(np.mean(dices)), "eval_iou_mean": float(np.mean(ious))}
