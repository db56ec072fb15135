"""Hard-sample selection, error regions, and corrective-point refinement.

During training an oracle plays the annotator: the highest-uncertainty slice
of each batch gets one corrective click sampled from the prediction/label
disagreement region, and the model reruns with the click appended to its
prompt. At inference the clicks come from a person instead; the machinery is
identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, ContractError, ShapeError
from .model import ForwardOutput, ModelParams, PromptPoint, model_forward
from .uncertainty import soft_dice_loss

BINARIZE_THRESHOLD = 0.5


@dataclass
class HardSet:
    indices: List[int]  # batch positions, highest uncertainty first
    scores: List[float]  # matching u values, descending
    r: float


@dataclass
class ErrorRegion:
    E: np.ndarray  # H×W uint8, the XOR map
    false_negatives: np.ndarray  # Y=1, M=0
    false_positives: np.ndarray  # Y=0, M=1


def binarize(P: np.ndarray, threshold: float = BINARIZE_THRESHOLD) -> np.ndarray:
    return (np.asarray(P) >= threshold).astype(np.uint8)


def select_hard(u_batch: Sequence[float], r: float = 0.3) -> HardSet:
    """Top max(1, floor(r*B)) batch positions by uncertainty; ties to lower index."""
    B = len(u_batch)
    if B < 1:
        raise ContractError("cannot select hard samples from an empty batch")
    u = [float(x) for x in u_batch]
    if not all(math.isfinite(x) for x in u):
        raise ContractError("uncertainty values must be finite")
    k = max(1, math.floor(r * B))
    order = sorted(range(B), key=lambda i: (-u[i], i))[:k]
    return HardSet(indices=order, scores=[u[i] for i in order], r=r)


def error_region(M: np.ndarray, Y: np.ndarray) -> ErrorRegion:
    """Pixelwise disagreement M xor Y, split into FN and FP parts."""
    M = np.asarray(M)
    Y = np.asarray(Y)
    if M.shape != Y.shape:
        raise ShapeError(f"mask shapes differ: {M.shape} vs {Y.shape}")
    m = M.astype(bool)
    y = Y.astype(bool)
    fn = (y & ~m).astype(np.uint8)
    fp = (m & ~y).astype(np.uint8)
    return ErrorRegion(E=(fn | fp).astype(np.uint8), false_negatives=fn, false_positives=fp)


def sample_corrective_points(
    region: ErrorRegion, n: int, rng: np.random.Generator
) -> List[PromptPoint]:
    """Uniform draw without replacement from E; FN pixels become positive
    clicks, FP pixels negative. Empty E yields an empty list."""
    if n < 1:
        raise ConfigError(f"corrective point count must be >= 1, got {n}")
    coords = np.argwhere(region.E != 0)  # (row, col) pairs in row-major order
    if coords.shape[0] == 0:
        return []
    count = min(n, coords.shape[0])
    chosen = rng.choice(coords.shape[0], size=count, replace=False)
    points = []
    for idx in np.sort(chosen):
        row, col = coords[idx]
        polarity = "positive" if region.false_negatives[row, col] else "negative"
        points.append(PromptPoint(x=int(col), y=int(row), polarity=polarity))
    return points


def refine_pass(
    params: ModelParams,
    image: np.ndarray,
    concept: str,
    modality: str,
    original_points: Sequence[PromptPoint],
    corrective_points: Sequence[PromptPoint],
    ground_truth: Optional[np.ndarray] = None,
    eps_d: float = 1e-6,
) -> Tuple[ForwardOutput, Optional[object]]:
    """Rerun the model with original + corrective points as one prompt.

    Returns the refined forward output and, when ground truth is given, the
    refined Dice loss (a differentiable scalar).
    """
    all_points = list(original_points) + list(corrective_points)
    out = model_forward(params, image, concept, modality, points=all_points)
    l_refine = None
    if ground_truth is not None:
        l_refine = soft_dice_loss(out.P, ground_truth, eps_d)
    return out, l_refine
