"""Adaptive per-sample uncertainty and the exponential loss weight.

The chain: confidence-weighted global visual embedding -> cosine agreement
with the projected semantic vector -> semantic uncertainty u_vl -> joint
uncertainty u (adding the Dice loss) -> weight w = exp(lambda_u * u).

Only the Dice loss carries gradient; the weight is a constant coefficient by
design (otherwise the weighted objective would feed back into itself), so the
embedding/cosine stages run on plain arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class UncertaintyHyper:
    beta_vl: float = 0.5  # semantic term coefficient in the joint uncertainty
    lambda_u: float = 1.0  # temperature of the exponential weight
    eps1: float = 1e-6  # stabilizer for the confidence-mass denominator
    eps_d: float = 1e-6  # dice smoothing

    def __post_init__(self):
        if self.beta_vl < 0 or self.lambda_u < 0:
            raise ConfigError("beta_vl and lambda_u must be non-negative")
        if self.eps1 <= 0 or self.eps_d <= 0:
            raise ConfigError("eps1 and eps_d must be positive")


@dataclass
class UncertaintyRecord:
    s_vl: float
    u_vl: float
    l_dice: float
    u: float
    w: float


def masked_global_embedding(Z: np.ndarray, P: np.ndarray, eps1: float = 1e-6) -> np.ndarray:
    """Per channel: sum(Z[c] * P) / (sum(P) + eps1). Z: C×H×W, P: H×W in [0,1]."""
    Z = np.asarray(Z, dtype=np.float64)
    P = np.asarray(P, dtype=np.float64)
    if Z.ndim != 3 or P.ndim != 2 or Z.shape[1:] != P.shape:
        raise ShapeError(f"embedding shapes incompatible: {Z.shape} vs {P.shape}")
    denom = P.sum() + eps1
    return (Z * P[None, :, :]).sum(axis=(1, 2)) / denom


def semantic_uncertainty(z_img_bar: np.ndarray, z_vlm_bar: np.ndarray, eps1: float = 1e-6):
    """Cosine agreement s_vl and its complement u_vl = 1 - s_vl."""
    a = np.asarray(z_img_bar, dtype=np.float64).ravel()
    b = np.asarray(z_vlm_bar, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"embedding lengths differ: {a.shape} vs {b.shape}")
    s_vl = float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + eps1))
    return s_vl, 1.0 - s_vl


def soft_dice_loss(P, Y, eps_d: float = 1e-6) -> Tensor:
    """1 - (2*sum(P*Y) + eps_d) / (sum(P) + sum(Y) + eps_d), differentiable in P."""
    if not isinstance(P, Tensor):
        P = Tensor(np.asarray(P, dtype=np.float64))
    y = np.asarray(Y, dtype=P.dtype)
    if P.shape != y.shape:
        raise ShapeError(f"prediction {P.shape} vs ground truth {y.shape}")
    yt = Tensor(y)
    inter = ad.tsum(P * yt)
    denom = ad.tsum(P) + float(y.sum())
    return 1.0 - (2.0 * inter + eps_d) / (denom + eps_d)


def joint_uncertainty(u_vl: float, l_dice: float, hyper: UncertaintyHyper) -> float:
    return hyper.beta_vl * u_vl + l_dice


def sample_weight(u: float, hyper: UncertaintyHyper) -> float:
    """exp(lambda_u * u); used as a constant coefficient (no gradient)."""
    return float(np.exp(hyper.lambda_u * u))


def uncertainty_record(
    z_img: np.ndarray,
    P: np.ndarray,
    z_vlm_bar: np.ndarray,
    l_dice: float,
    hyper: UncertaintyHyper,
) -> UncertaintyRecord:
    """Full pipeline for one sample; inputs are detached arrays.

    z_img is the low-resolution feature map; it is bilinearly upsampled to
    P's resolution before the confidence-weighted average.
    """
    z_up = ad.bilinear_upsample_array(np.asarray(z_img, dtype=np.float64), P.shape)
    z_bar = masked_global_embedding(z_up, P, hyper.eps1)
    s_vl, u_vl = semantic_uncertainty(z_bar, z_vlm_bar, hyper.eps1)
    u = joint_uncertainty(u_vl, float(l_dice), hyper)
    w = sample_weight(u, hyper)
    return UncertaintyRecord(s_vl=s_vl, u_vl=u_vl, l_dice=float(l_dice), u=u, w=w)
