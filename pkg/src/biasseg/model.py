"""Prompt-conditioned segmentation model with a semantic side channel.

Two pathways over one conv trunk:

* vision: 3 conv blocks (stride 1/2/2) produce dense features z_img at 1/4
  resolution; a cross-attention decoder turns prompt embeddings into a mask.
* semantic: pooled image patch tokens plus a text template ("segment the
  <concept> in <modality>") run through one causal self-attention block,
  yielding hidden states z_vlm and next-token logits; an attention pool with
  a learned query compresses z_vlm to one vector, which a linear projection
  maps into the vision channel space where it joins the prompt rows.

Everything is built from autodiff ops so one backward() call reaches every
parameter. Vectors ride as 1×d matrices throughout (row convention).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import CONCEPTS, MODALITIES
from .errors import (
    CheckpointFormatError,
    ConfigError,
    CorruptDataError,
    InvalidPromptError,
    ShapeError,
    VocabularyError,
)

VOCAB: Tuple[str, ...] = ("<pad>", "segment", "the", "in") + CONCEPTS + MODALITIES

CHECKPOINT_MAGIC = b"BCVL"
CHECKPOINT_VERSION = 1


def token_id(word: str) -> int:
    try:
        return VOCAB.index(word)
    except ValueError:
        raise VocabularyError(f"unknown token {word!r}") from None


def template_token_ids(concept: str, modality: str) -> List[int]:
    """Token ids for the fixed prompt template."""
    return [token_id(w) for w in ("segment", "the", concept, "in", modality)]


@dataclass(frozen=True)
class Hyper:
    C: int = 32  # vision channels
    d: int = 32  # semantic width
    heads: int = 2
    V: int = 24  # vocabulary capacity (>= len(VOCAB))
    L_max: int = 16
    downsample: int = 4  # structural: stride pattern 1/2/2

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"semantic width {self.d} not divisible by {self.heads} heads")
        if self.V < len(VOCAB):
            raise ConfigError(f"vocab capacity {self.V} < required {len(VOCAB)}")
        if self.downsample != 4:
            raise ConfigError("encoder stride pattern fixes downsample to 4")


@dataclass
class PromptPoint:
    x: int
    y: int
    polarity: str  # "positive" | "negative"


@dataclass
class ForwardOutput:
    logits: Tensor  # H×W
    P: Tensor  # H×W, sigmoid(logits)
    z_img: Tensor  # C×h×w
    z_vlm: Tensor  # L×d
    z_bar_vlm: Tensor  # 1×C projected semantic vector
    next_token_logits: Tensor  # L×V
    token_ids: List[int]  # text segment of the sequence
    l1: int  # number of image tokens


def _tensor_specs(hyper: Hyper) -> List[Tuple[str, Tuple[int, ...], int]]:
    """(name, shape, fan_in) for every parameter, in creation order."""
    C, d, V, L, H = hyper.C, hyper.d, hyper.V, hyper.L_max, hyper.heads
    dk = d // H
    specs: List[Tuple[str, Tuple[int, ...], int]] = [
        ("enc.conv1.w", (C, 1, 3, 3), 9),
        ("enc.conv1.b", (C,), 9),
        ("enc.conv2.w", (C, C, 3, 3), C * 9),
        ("enc.conv2.b", (C,), C * 9),
        ("enc.conv3.w", (C, C, 3, 3), C * 9),
        ("enc.conv3.b", (C,), C * 9),
        ("prompt.pos_emb", (C,), C),
        ("prompt.neg_emb", (C,), C),
        ("prompt.corner1_emb", (C,), C),
        ("prompt.corner2_emb", (C,), C),
        ("prompt.coord.w", (2, C), 2),
        ("sem.tok_emb", (V, d), d),
        ("sem.pos_emb", (L, d), d),
        ("sem.img_proj.w", (C, d), C),
        ("sem.img_proj.b", (d,), C),
    ]
    for h in range(H):
        specs += [
            (f"sem.attn.h{h}.wq", (d, dk), d),
            (f"sem.attn.h{h}.wk", (d, dk), d),
            (f"sem.attn.h{h}.wv", (d, dk), d),
        ]
    specs += [
        ("sem.attn.wo", (d, d), d),
        ("sem.mlp.w1", (d, 2 * d), d),
        ("sem.mlp.b1", (2 * d,), d),
        ("sem.mlp.w2", (2 * d, d), 2 * d),
        ("sem.mlp.b2", (d,), 2 * d),
        ("sem.lm_head.w", (d, V), d),
        ("sem.lm_head.b", (V,), d),
        ("pool.zq", (1, d), d),
    ]
    for h in range(H):
        specs += [
            (f"pool.h{h}.wq", (d, dk), d),
            (f"pool.h{h}.wk", (d, dk), d),
            (f"pool.h{h}.wv", (d, dk), d),
        ]
    specs += [
        ("pool.wo", (d, d), d),
        ("proj.w", (d, C), d),
        ("proj.b", (C,), d),
        ("dec.wq", (C, C), C),
        ("dec.wk", (C, C), C),
        ("dec.wv", (C, C), C),
        ("dec.coord.w", (2, C), 2),
        ("dec.head.w", (C, 1), C),
        ("dec.head.b", (1,), C),
    ]
    return specs


class ModelParams:
    """Named parameter tensors plus the structural hyperparameters."""

    def __init__(self, hyper: Hyper, tensors: Dict[str, Tensor]):
        self.hyper = hyper
        self.tensors = tensors

    @classmethod
    def init(cls, seed: int, hyper: Hyper = Hyper(), dtype=np.float32) -> "ModelParams":
        """He-scaled normal weights, zero biases.

        Zero biases matter for the mask head: a random output bias shifts
        every pixel's logit by the same amount, so training would start from
        an arbitrary all-foreground or all-background mask instead of a
        balanced one.
        """
        rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, 0xB1A5]))
        tensors: Dict[str, Tensor] = {}
        for name, shape, fan_in in _tensor_specs(hyper):
            if name.endswith(".b"):
                values = np.zeros(shape)
            else:
                values = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            tensors[name] = Tensor(values.astype(dtype), requires_grad=True)
        return cls(hyper, tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.hyper,
            {n: Tensor(t.data.astype(dtype), requires_grad=True) for n, t in self.tensors.items()},
        )

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    @property
    def dtype(self):
        return self["enc.conv1.w"].dtype

    def n_parameters(self) -> int:
        return sum(t.size for t in self.tensors.values())


# -- vision encoder ------------------------------------------------------------


def encode_image(params: ModelParams, image: np.ndarray) -> Tensor:
    """(H,W) grayscale -> C×(H/4)×(W/4) features."""
    img = np.asarray(image)
    if img.ndim != 2:
        raise ShapeError(f"expected a 2-D grayscale image, got shape {img.shape}")
    h, w = img.shape
    ds = params.hyper.downsample
    if h % ds or w % ds:
        raise ShapeError(f"image size {h}x{w} not divisible by downsample factor {ds}")
    x = Tensor(img.astype(params.dtype).reshape(1, h, w))
    x = ad.relu(ad.add_channel_bias(ad.conv2d(x, params["enc.conv1.w"], 1), params["enc.conv1.b"]))
    x = ad.relu(ad.add_channel_bias(ad.conv2d(x, params["enc.conv2.w"], 2), params["enc.conv2.b"]))
    x = ad.relu(ad.add_channel_bias(ad.conv2d(x, params["enc.conv3.w"], 2), params["enc.conv3.b"]))
    return x


# -- prompt encoder ------------------------------------------------------------


def _coord_row(params: ModelParams, x: float, y: float, image_size: Tuple[int, int]) -> Tensor:
    h, w = image_size
    coords = Tensor(np.array([[x / w, y / h]], dtype=params.dtype))
    return coords @ params["prompt.coord.w"]


def encode_prompt(
    params: ModelParams,
    image_size: Tuple[int, int],
    points: Optional[Sequence[PromptPoint]] = None,
    box: Optional[Tuple[float, float, float, float]] = None,
) -> Tensor:
    """Points or a box -> N×C prompt rows (polarity/corner embedding + coords)."""
    h, w = image_size
    rows: List[Tensor] = []
    if points is not None:
        if len(points) == 0:
            raise InvalidPromptError("point prompt requires at least one point")
        for p in points:
            if not (0 <= p.x < w and 0 <= p.y < h):
                raise InvalidPromptError(f"point ({p.x},{p.y}) outside {w}x{h} image")
            if p.polarity == "positive":
                emb = params["prompt.pos_emb"]
            elif p.polarity == "negative":
                emb = params["prompt.neg_emb"]
            else:
                raise InvalidPromptError(f"unknown polarity {p.polarity!r}")
            rows.append(_coord_row(params, p.x, p.y, image_size) + emb.reshape(1, -1))
    if box is not None:
        x0, y0, x1, y1 = box
        for x, y in ((x0, y0), (x1, y1)):
            if not (0 <= x < w and 0 <= y < h):
                raise InvalidPromptError(f"box corner ({x},{y}) outside {w}x{h} image")
        rows.append(_coord_row(params, x0, y0, image_size) + params["prompt.corner1_emb"].reshape(1, -1))
        rows.append(_coord_row(params, x1, y1, image_size) + params["prompt.corner2_emb"].reshape(1, -1))
    if not rows:
        raise InvalidPromptError("prompt requires points or a box")
    return ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]


# -- semantic pathway ----------------------------------------------------------


def _multihead(params: ModelParams, prefix: str, q_in: Tensor, kv_in: Tensor, causal: bool) -> Tensor:
    heads = params.hyper.heads
    dk = params.hyper.d // heads
    scale = 1.0 / float(np.sqrt(dk))
    mask_const = None
    if causal:
        L = kv_in.shape[0]
        mask_const = Tensor(np.triu(np.full((L, L), -1e9, dtype=params.dtype), k=1))
    outs = []
    for h in range(heads):
        qh = q_in @ params[f"{prefix}.h{h}.wq"]
        kh = kv_in @ params[f"{prefix}.h{h}.wk"]
        vh = kv_in @ params[f"{prefix}.h{h}.wv"]
        scores = (qh @ kh.T) * scale
        if mask_const is not None:
            scores = scores + mask_const
        outs.append(ad.softmax(scores, axis=-1) @ vh)
    merged = ad.concat(outs, axis=1) if heads > 1 else outs[0]
    return merged @ params[f"{prefix}.wo"]


def pooled_image_tokens(params: ModelParams, z_img: Tensor) -> Tensor:
    """2×2 grid of patch means over z_img, projected to the semantic width: 4×d."""
    c, h, w = z_img.shape
    if h < 2 or w < 2:
        raise ShapeError(f"feature map {h}x{w} too small for 2x2 patch pooling")
    bh, bw = h // 2, w // 2
    cells = []
    for gi in (0, 1):
        for gj in (0, 1):
            rs = slice(gi * bh, h if gi else bh)
            cs = slice(gj * bw, w if gj else bw)
            cells.append(ad.tmean(z_img[:, rs, cs], axis=(1, 2)).reshape(1, -1))
    grid = ad.concat(cells, axis=0)  # 4×C
    return ad.add_row_bias(grid @ params["sem.img_proj.w"], params["sem.img_proj.b"])


def semantic_forward(
    params: ModelParams, z_img: Tensor, token_ids: Sequence[int]
) -> Tuple[Tensor, Tensor, int]:
    """Image tokens + text tokens through one causal block -> (z_vlm, next_token_logits, l1)."""
    V = params.hyper.V
    for t in token_ids:
        if not 0 <= t < V:
            raise VocabularyError(f"token id {t} outside vocabulary of size {V}")
    img_tok = pooled_image_tokens(params, z_img)
    l1 = img_tok.shape[0]
    txt_tok = ad.gather_rows(params["sem.tok_emb"], list(token_ids))
    seq = ad.concat([img_tok, txt_tok], axis=0)
    L = seq.shape[0]
    if L > params.hyper.L_max:
        raise ShapeError(f"sequence length {L} exceeds maximum {params.hyper.L_max}")
    x = seq + params["sem.pos_emb"][:L]
    x = x + _multihead(params, "sem.attn", x, x, causal=True)
    hidden = ad.relu(ad.add_row_bias(x @ params["sem.mlp.w1"], params["sem.mlp.b1"]))
    z_vlm = x + ad.add_row_bias(hidden @ params["sem.mlp.w2"], params["sem.mlp.b2"])
    logits = ad.add_row_bias(z_vlm @ params["sem.lm_head.w"], params["sem.lm_head.b"])
    return z_vlm, logits, l1


def attention_pool(params: ModelParams, z_vlm: Tensor) -> Tensor:
    """Learned-query multi-head attention over z_vlm rows -> 1×d."""
    if z_vlm.data.ndim != 2 or z_vlm.shape[1] != params.hyper.d:
        raise ShapeError(f"z_vlm must be L×{params.hyper.d}, got {z_vlm.shape}")
    return _multihead(params, "pool", params["pool.zq"], z_vlm, causal=False)


def project_semantic(params: ModelParams, pooled: Tensor) -> Tensor:
    """Linear map from semantic width into vision channels: 1×C."""
    return ad.add_row_bias(pooled @ params["proj.w"], params["proj.b"])


# -- mask decoder ---------------------------------------------------------------


def _position_features(params: ModelParams, z_img: Tensor) -> Tensor:
    """Flattened per-position features with coordinate terms: (h·w)×C."""
    c, h, w = z_img.shape
    flat = ad.transpose(z_img.reshape(c, h * w))
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    coords = np.stack([(xx.ravel() + 0.5) / w, (yy.ravel() + 0.5) / h], axis=1)
    return flat + Tensor(coords.astype(params.dtype)) @ params["dec.coord.w"]


def decode_mask(
    params: ModelParams,
    z_img: Tensor,
    z_vp: Tensor,
    z_bar_vlm: Tensor,
    image_size: Tuple[int, int],
) -> Tuple[Tensor, Tensor]:
    """Cross-attend the enhanced prompt to the feature grid; emit (logits, P)."""
    C = params.hyper.C
    if z_vp.data.ndim != 2 or z_vp.shape[1] != C:
        raise ShapeError(f"prompt rows must be N×{C}, got {z_vp.shape}")
    if z_bar_vlm.shape != (1, C):
        raise ShapeError(f"semantic vector must be 1×{C}, got {z_bar_vlm.shape}")
    c, h, w = z_img.shape
    if c != C:
        raise ShapeError(f"feature channels {c} != {C}")

    feat = _position_features(params, z_img)  # (hw)×C
    prompt = ad.concat([z_vp, z_bar_vlm], axis=0)  # (N+1)×C

    q = prompt @ params["dec.wq"]
    k = feat @ params["dec.wk"]
    v = feat @ params["dec.wv"]
    attn = ad.softmax((q @ k.T) * (1.0 / float(np.sqrt(C))), axis=-1)
    summary = ad.tmean(attn @ v, axis=0, keepdims=True)  # 1×C

    ones = Tensor(np.ones((h * w, 1), dtype=params.dtype))
    modulated = feat * (ones @ summary)  # (hw)×C, per-position scaling
    low = modulated @ params["dec.head.w"] + params["dec.head.b"]  # (hw)×1
    logits = ad.bilinear_upsample(low.reshape(1, h, w), image_size).reshape(image_size)
    return logits, ad.sigmoid(logits)


# -- full forward ---------------------------------------------------------------


def model_forward(
    params: ModelParams,
    image: np.ndarray,
    concept: str,
    modality: str,
    points: Optional[Sequence[PromptPoint]] = None,
    box: Optional[Tuple[float, float, float, float]] = None,
) -> ForwardOutput:
    image = np.asarray(image)
    z_img = encode_image(params, image)  # validates dimensionality first
    h, w = image.shape
    token_ids = template_token_ids(concept, modality)
    z_vlm, next_token_logits, l1 = semantic_forward(params, z_img, token_ids)
    pooled = attention_pool(params, z_vlm)
    z_bar = project_semantic(params, pooled)
    z_vp = encode_prompt(params, (h, w), points=points, box=box)
    logits, P = decode_mask(params, z_img, z_vp, z_bar, (h, w))
    return ForwardOutput(
        logits=logits,
        P=P,
        z_img=z_img,
        z_vlm=z_vlm,
        z_bar_vlm=z_bar,
        next_token_logits=next_token_logits,
        token_ids=token_ids,
        l1=l1,
    )


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    """magic BCVL, version u32, count u32, then (name_len, name, rank, dims, f32 data)."""
    path = Path(path)
    names = sorted(params.tensors)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(names)))
        for name in names:
            t = params.tensors[name]
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", t.data.ndim))
            f.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
            f.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    blob = path.read_bytes()

    def need(n: int, pos: int) -> int:
        if pos + n > len(blob):
            raise CorruptDataError(f"{path}: truncated checkpoint")
        return pos + n

    if len(blob) < 12:
        raise CorruptDataError(f"{path}: truncated checkpoint")
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version}")

    pos = 12
    tensors: Dict[str, Tensor] = {}
    for _ in range(count):
        end = need(4, pos)
        (name_len,) = struct.unpack_from("<I", blob, pos)
        pos = end
        end = need(name_len, pos)
        name = blob[pos:end].decode("utf-8")
        pos = end
        end = need(4, pos)
        (rank,) = struct.unpack_from("<I", blob, pos)
        pos = end
        end = need(4 * rank, pos)
        dims = struct.unpack_from(f"<{rank}I", blob, pos)
        pos = end
        n = int(np.prod(dims)) if rank else 1
        end = need(4 * n, pos)
        data = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(dims)
        pos = end
        tensors[name] = Tensor(data.astype(np.float32), requires_grad=True)

    if pos != len(blob):
        raise CorruptDataError(f"{path}: {len(blob) - pos} trailing bytes after last entry")
    hyper = _derive_hyper(tensors, path)
    expected = {name for name, _, _ in _tensor_specs(hyper)}
    if set(tensors) != expected:
        missing = sorted(expected - set(tensors))
        extra = sorted(set(tensors) - expected)
        raise CheckpointFormatError(f"{path}: parameter names mismatch (missing {missing}, extra {extra})")
    return ModelParams(hyper, tensors)


def _derive_hyper(tensors: Dict[str, Tensor], path) -> Hyper:
    try:
        C = tensors["enc.conv1.w"].shape[0]
        V, d = tensors["sem.tok_emb"].shape
        L_max = tensors["sem.pos_emb"].shape[0]
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: missing structural entry {e}") from None
    heads = sum(1 for n in tensors if n.startswith("pool.h") and n.endswith(".wq"))
    if heads == 0:
        raise CheckpointFormatError(f"{path}: no attention heads found")
    return Hyper(C=C, d=d, heads=heads, V=V, L_max=L_max)
