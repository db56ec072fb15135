"""Finite-difference verification of the autodiff backward pass.

Central differences at 64-bit precision, step 1e-3. Each checked op builds a
scalar loss from randomized inputs, runs backward, and compares the analytic
gradient against the numeric one coordinate by coordinate. Inputs for kinked
or singular ops (relu, div, log, sqrt) are sampled away from the bad set so
the comparison is meaningful.
"""

from __future__ import annotations

from typing import Callable, Dict, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FD_STEP = 1e-3


def numeric_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient of a scalar function at x (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def rel_error(a: np.ndarray, n: np.ndarray, floor: float = 1e-4) -> float:
    """Max elementwise |a - n| / max(|a|, |n|, floor)."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_op(
    build_loss: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[np.ndarray],
    step: float = FD_STEP,
) -> float:
    """Compare analytic vs numeric gradients for every input; return max rel error."""
    tensors = [Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
    loss = build_loss(tensors)
    ad.backward(loss)
    worst = 0.0
    for idx, t in enumerate(tensors):
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

        def f(x, _idx=idx):
            probe = [Tensor(t2.data) for t2 in tensors]
            probe[_idx] = Tensor(x)
            return build_loss(probe).item()

        numeric = numeric_gradient(f, t.data.copy(), step)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


# -- randomized input factories ----------------------------------------------


def _away_from_zero(rng: np.random.Generator, shape, margin: float) -> np.ndarray:
    """Uniform values with |x| >= margin (keeps relu/div/log smooth locally)."""
    signs = rng.choice([-1.0, 1.0], size=shape)
    mags = rng.uniform(margin, 1.0, size=shape)
    return signs * mags


def op_checks(seed: int) -> Dict[str, float]:
    """Run every per-op finite-difference check; return {op: max rel error}."""
    rng = np.random.default_rng(seed)
    results: Dict[str, float] = {}

    def coeffs(shape):
        return rng.uniform(-1.0, 1.0, size=shape)

    # add / sub / mul: smooth everywhere
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    c = coeffs((3, 4))
    results["add"] = check_op(lambda ts: ad.tsum((ts[0] + ts[1]) * Tensor(c)), [a, b])
    results["sub"] = check_op(lambda ts: ad.tsum((ts[0] - ts[1]) * Tensor(c)), [a, b])
    results["mul"] = check_op(lambda ts: ad.tsum((ts[0] * ts[1]) * Tensor(c)), [a, b])

    # div: denominator bounded away from zero
    denom = _away_from_zero(rng, (3, 4), 0.3)
    results["div"] = check_op(lambda ts: ad.tsum((ts[0] / ts[1]) * Tensor(c)), [a, denom])

    # scalar broadcast paths
    s = rng.normal(size=(1,))
    results["add_scalar"] = check_op(lambda ts: ad.tsum((ts[0] + ts[1]) * Tensor(c)), [a, s])
    results["mul_scalar"] = check_op(lambda ts: ad.tsum((ts[0] * ts[1]) * Tensor(c)), [a, s])

    # pointwise nonlinearities
    x = rng.normal(size=(2, 5))
    cx = coeffs((2, 5))
    results["exp"] = check_op(lambda ts: ad.tsum(ad.exp(ts[0]) * Tensor(cx)), [x * 0.5])
    results["sigmoid"] = check_op(lambda ts: ad.tsum(ad.sigmoid(ts[0]) * Tensor(cx)), [x * 2.0])
    results["softmax"] = check_op(lambda ts: ad.tsum(ad.softmax(ts[0], axis=-1) * Tensor(cx)), [x])
    pos = rng.uniform(0.5, 2.0, size=(2, 5))
    results["log"] = check_op(lambda ts: ad.tsum(ad.log(ts[0]) * Tensor(cx)), [pos])
    results["sqrt"] = check_op(lambda ts: ad.tsum(ad.sqrt(ts[0]) * Tensor(cx)), [pos])
    xr = _away_from_zero(rng, (2, 5), 0.05)
    results["relu"] = check_op(lambda ts: ad.tsum(ad.relu(ts[0]) * Tensor(cx)), [xr])

    # reductions / shape (coefficient tensors drawn once, outside the closures)
    c4, c3, c12, c43 = coeffs((4,)), coeffs((3,)), coeffs((12,)), coeffs((4, 3))
    results["sum_axis"] = check_op(
        lambda ts: ad.tsum(ad.tsum(ts[0], axis=0) * Tensor(c4)), [rng.normal(size=(3, 4))]
    )
    results["mean"] = check_op(
        lambda ts: ad.tsum(ad.tmean(ts[0], axis=1) * Tensor(c3)), [rng.normal(size=(3, 4))]
    )
    results["reshape"] = check_op(
        lambda ts: ad.tsum(ad.reshape(ts[0], (12,)) * Tensor(c12)), [rng.normal(size=(3, 4))]
    )
    results["transpose"] = check_op(
        lambda ts: ad.tsum(ad.transpose(ts[0]) * Tensor(c43)), [rng.normal(size=(3, 4))]
    )
    c53, c22, c63 = coeffs((5, 3)), coeffs((2, 2)), coeffs((6, 3))
    results["concat"] = check_op(
        lambda ts: ad.tsum(ad.concat([ts[0], ts[1]], axis=0) * Tensor(c53)),
        [rng.normal(size=(2, 3)), rng.normal(size=(3, 3))],
    )
    results["slice"] = check_op(
        lambda ts: ad.tsum(ts[0][1:3, :2] * Tensor(c22)), [rng.normal(size=(4, 4))]
    )
    idx = rng.integers(0, 4, size=6)
    results["gather_rows"] = check_op(
        lambda ts: ad.tsum(ad.gather_rows(ts[0], idx) * Tensor(c63)), [rng.normal(size=(4, 3))]
    )

    # linear algebra
    m1 = rng.normal(size=(3, 4))
    m2 = rng.normal(size=(4, 2))
    c32, c34, c233 = coeffs((3, 2)), coeffs((3, 4)), coeffs((2, 3, 3))
    results["matmul"] = check_op(lambda ts: ad.tsum((ts[0] @ ts[1]) * Tensor(c32)), [m1, m2])
    results["add_row_bias"] = check_op(
        lambda ts: ad.tsum(ad.add_row_bias(ts[0], ts[1]) * Tensor(c34)),
        [rng.normal(size=(3, 4)), rng.normal(size=(4,))],
    )
    results["add_channel_bias"] = check_op(
        lambda ts: ad.tsum(ad.add_channel_bias(ts[0], ts[1]) * Tensor(c233)),
        [rng.normal(size=(2, 3, 3)), rng.normal(size=(2,))],
    )

    # spatial
    xim = rng.normal(size=(2, 6, 6))
    ker = rng.normal(size=(3, 2, 3, 3)) * 0.5
    c366, c333, c275 = coeffs((3, 6, 6)), coeffs((3, 3, 3)), coeffs((2, 7, 5))
    results["conv2d_s1"] = check_op(
        lambda ts: ad.tsum(ad.conv2d(ts[0], ts[1], stride=1) * Tensor(c366)), [xim, ker]
    )
    results["conv2d_s2"] = check_op(
        lambda ts: ad.tsum(ad.conv2d(ts[0], ts[1], stride=2) * Tensor(c333)), [xim, ker]
    )
    small = rng.normal(size=(2, 3, 3))
    results["bilinear_upsample"] = check_op(
        lambda ts: ad.tsum(ad.bilinear_upsample(ts[0], (7, 5)) * Tensor(c275)), [small]
    )

    return results


def run_op_gradcheck(seeds: Sequence[int], tolerance: float = 1e-4) -> Dict[str, float]:
    """Aggregate per-op worst rel errors across seeds. Raises nothing; callers assert."""
    worst: Dict[str, float] = {}
    for seed in seeds:
        for op, err in op_checks(seed).items():
            worst[op] = max(worst.get(op, 0.0), err)
    return worst


# -- full composed model -------------------------------------------------------


def fd_model_params(seed: int, hyper=None):
    """64-bit model parameters safe for finite differencing.

    Rectifier kinks poison central differences, so the construction pins every
    relu pre-activation at least 0.1 away from zero: weights are scaled down
    to bound the data-dependent term, and biases alternate between +/- bands
    per channel. Half of each layer is live, half dead, both with a guaranteed
    margin — a 1e-3 parameter perturbation moves no unit across zero.
    """
    from .model import Hyper, ModelParams, VOCAB

    if hyper is None:
        hyper = Hyper(C=8, d=8, heads=2, V=len(VOCAB), L_max=16)
    params = ModelParams.init(seed, hyper, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x0FD]))

    def alternating_bias(n, base, jitter):
        mags = base + rng.uniform(0.0, jitter, size=n)
        signs = np.where(np.arange(n) % 2 == 0, 1.0, -1.0)
        return signs * mags

    for name, t in params.tensors.items():
        if name == "enc.conv1.w":
            t.data *= 0.10
        elif name in ("enc.conv2.w", "enc.conv3.w"):
            t.data *= 0.05
        elif name.endswith(".b") or "emb" in name or name == "pool.zq":
            pass
        else:
            t.data *= 0.25
    params.tensors["enc.conv1.b"].data[:] = alternating_bias(hyper.C, 0.40, 0.2)
    params.tensors["enc.conv2.b"].data[:] = alternating_bias(hyper.C, 0.35, 0.2)
    params.tensors["enc.conv3.b"].data[:] = alternating_bias(hyper.C, 0.35, 0.2)
    params.tensors["sem.mlp.b1"].data[:] = alternating_bias(2 * hyper.d, 3.0, 0.5)
    return params


def full_model_check(seed: int, step: float = FD_STEP, max_coords: int = 32) -> float:
    """FD-check d(loss)/d(theta) through the whole forward pass at 16×16.

    The loss is a fixed random linear functional of the mask logits and the
    next-token logits, touching every pathway. Tensors larger than max_coords
    are spot-checked on a seeded coordinate sample; smaller ones exhaustively.
    Returns the max relative error over all checked coordinates.
    """
    from . import autodiff as ad2
    from .data import CONCEPTS, MODALITIES
    from .model import ModelParams, PromptPoint, model_forward

    params = fd_model_params(seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xFDFD]))
    image = rng.uniform(0.0, 1.0, size=(16, 16))
    points = [
        PromptPoint(int(rng.integers(0, 16)), int(rng.integers(0, 16)), "positive"),
        PromptPoint(int(rng.integers(0, 16)), int(rng.integers(0, 16)), "negative"),
    ]
    concept = CONCEPTS[rng.integers(0, len(CONCEPTS))]
    modality = MODALITIES[rng.integers(0, len(MODALITIES))]
    c_logits = rng.uniform(-1.0, 1.0, size=(16, 16)) / 64.0
    c_tok = None  # shaped after the first forward pass

    def loss_value(p) -> float:
        out = model_forward(p, image, concept, modality, points=points)
        val = ad2.tsum(out.logits * Tensor(c_logits)) + ad2.tsum(
            out.next_token_logits * Tensor(c_tok)
        )
        return val

    probe = model_forward(params, image, concept, modality, points=points)
    c_tok = rng.uniform(-1.0, 1.0, size=probe.next_token_logits.shape) / 16.0

    loss = loss_value(params)
    ad.backward(loss)

    # Detached twin sharing the same buffers: in-place nudges show up in its
    # forward passes without building a graph.
    frozen = ModelParams(params.hyper, {n: Tensor(t.data) for n, t in params.tensors.items()})

    worst = 0.0
    for name in sorted(params.tensors):
        t = params.tensors[name]
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        n = t.data.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        flat = t.data.reshape(-1)
        for idx in coords:
            orig = flat[idx]
            flat[idx] = orig + step
            fp = loss_value(frozen).item()
            flat[idx] = orig - step
            fm = loss_value(frozen).item()
            flat[idx] = orig
            numeric = (fp - fm) / (2.0 * step)
            worst = max(worst, rel_error(analytic.reshape(-1)[idx], numeric))
    return worst
