"""Synthetic biased shape corpus: rendering, manifests, portable file I/O.

Images are grayscale shapes on a background whose brightness band plays the
role of a nuisance attribute; rendering styles (plain / noisy / low-contrast
/ textured) play the role of acquisition modalities. Class imbalance is
injected by exact per-concept quotas rather than i.i.d. sampling, so repeated
runs differ only through the seed. Everything on disk is byte-reproducible:
8-bit PGM images plus a JSON manifest carrying CRC32 checksums.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np

from .errors import (
    ConfigError,
    ContractError,
    CorruptDataError,
    DatasetReadError,
    DatasetWriteError,
)

CONCEPTS: Tuple[str, ...] = ("circle", "square", "triangle", "ring", "cross")
MODALITIES: Tuple[str, ...] = ("plain", "noise", "lowcontrast", "textured")
ATTRIBUTES: Tuple[str, ...] = ("dark", "mid", "bright")

# Background brightness band per attribute (the demographic-analog axis).
_ATTRIBUTE_BANDS = {"dark": (0.08, 0.28), "mid": (0.38, 0.58), "bright": (0.68, 0.88)}

HEAD_THRESHOLD = 200
TAIL_THRESHOLD = 60


# -- bias profile --------------------------------------------------------------


@dataclass(frozen=True)
class BiasProfile:
    """Exact training quotas per concept plus sampling skews for the other axes."""

    concept_quotas: Dict[str, int]
    modality_weights: Dict[str, float]
    attribute_weights: Dict[str, float]
    image_size: Tuple[int, int] = (64, 64)

    def __post_init__(self):
        if not self.concept_quotas:
            raise ConfigError("concept_quotas must not be empty")
        for name, q in self.concept_quotas.items():
            if name not in CONCEPTS:
                raise ConfigError(f"unknown concept {name!r}")
            if not isinstance(q, int) or q <= 0:
                raise ConfigError(f"quota for {name!r} must be a positive integer, got {q}")
        for wmap, vocab, label in (
            (self.modality_weights, MODALITIES, "modality"),
            (self.attribute_weights, ATTRIBUTES, "attribute"),
        ):
            if not wmap:
                raise ConfigError(f"{label}_weights must not be empty")
            for name, w in wmap.items():
                if name not in vocab:
                    raise ConfigError(f"unknown {label} {name!r}")
                if w < 0:
                    raise ConfigError(f"negative weight for {label} {name!r}")
            total = sum(wmap.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"{label}_weights sum to {total}, expected 1")
        h, w = self.image_size
        if h < 16 or w < 16:
            raise ConfigError(f"image_size must be at least 16x16, got {self.image_size}")

    def to_dict(self) -> dict:
        return {
            "concept_quotas": dict(self.concept_quotas),
            "modality_weights": dict(self.modality_weights),
            "attribute_weights": dict(self.attribute_weights),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BiasProfile":
        return cls(
            concept_quotas={k: int(v) for k, v in d["concept_quotas"].items()},
            modality_weights=dict(d["modality_weights"]),
            attribute_weights=dict(d["attribute_weights"]),
            image_size=tuple(d["image_size"]),
        )


def default_profile(image_size: Tuple[int, int] = (64, 64)) -> BiasProfile:
    """One concept per prevalence group (400/150/50 against thresholds 200/60),
    with skewed style availability and a skewed attribute mix."""
    return BiasProfile(
        concept_quotas={"circle": 400, "square": 150, "triangle": 50},
        modality_weights={"plain": 0.55, "noise": 0.25, "lowcontrast": 0.15, "textured": 0.05},
        attribute_weights={"dark": 0.2, "mid": 0.6, "bright": 0.2},
        image_size=image_size,
    )


# -- shape rasterization -------------------------------------------------------


def _span(rng: np.random.Generator, extent: float, n: int) -> float:
    """Coordinate for a shape centre whose half-extent must stay in frame."""
    margin = extent + 1.0
    return rng.uniform(margin, (n - 1) - margin)


def draw_shape_params(concept_id: int, rng: np.random.Generator, size: Tuple[int, int]) -> dict:
    """Sample centre/scale parameters for one shape, guaranteed to fit."""
    h, w = size
    m = min(h, w)
    name = CONCEPTS[concept_id]
    if name == "circle":
        r = rng.uniform(0.12, 0.28) * m
        return {"cx": _span(rng, r, w), "cy": _span(rng, r, h), "r": r}
    if name == "square":
        half = rng.uniform(0.10, 0.24) * m
        return {"cx": _span(rng, half, w), "cy": _span(rng, half, h), "half": half}
    if name == "triangle":
        hh = rng.uniform(0.12, 0.28) * m
        hb = rng.uniform(0.12, 0.28) * m
        return {"cx": _span(rng, hb, w), "cy": _span(rng, hh, h), "hh": hh, "hb": hb}
    if name == "ring":
        r_out = rng.uniform(0.15, 0.28) * m
        r_in = rng.uniform(0.45, 0.65) * r_out
        return {"cx": _span(rng, r_out, w), "cy": _span(rng, r_out, h), "r_out": r_out, "r_in": r_in}
    if name == "cross":
        t = rng.uniform(0.06, 0.12) * m
        arm = rng.uniform(0.18, 0.30) * m
        return {"cx": _span(rng, arm, w), "cy": _span(rng, arm, h), "t": t, "arm": arm}
    raise ConfigError(f"concept_id {concept_id} out of range")


def rasterize(concept_id: int, params: dict, size: Tuple[int, int]) -> np.ndarray:
    """Exact pixel-centre membership test for the parametric shape."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    name = CONCEPTS[concept_id]
    cx, cy = params["cx"], params["cy"]
    dx, dy = xx - cx, yy - cy
    if name == "circle":
        mask = dx * dx + dy * dy <= params["r"] ** 2
    elif name == "square":
        half = params["half"]
        mask = (np.abs(dx) <= half) & (np.abs(dy) <= half)
    elif name == "triangle":
        hh, hb = params["hh"], params["hb"]
        rel = (dy + hh) / (2.0 * hh)  # 0 at apex, 1 at base
        mask = (dy >= -hh) & (dy <= hh) & (np.abs(dx) <= hb * rel)
    elif name == "ring":
        d2 = dx * dx + dy * dy
        mask = (d2 <= params["r_out"] ** 2) & (d2 > params["r_in"] ** 2)
    elif name == "cross":
        t, arm = params["t"], params["arm"]
        bar_h = (np.abs(dy) <= t) & (np.abs(dx) <= arm)
        bar_v = (np.abs(dx) <= t) & (np.abs(dy) <= arm)
        mask = bar_h | bar_v
    else:
        raise ConfigError(f"concept_id {concept_id} out of range")
    return mask.astype(np.uint8)


def render_sample(
    concept_id: int,
    modality_id: int,
    attribute_id: int,
    rng: np.random.Generator,
    size: Tuple[int, int],
) -> Tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair.

    Geometry and intensities are drawn before any style-specific randomness,
    so the mask does not depend on the modality. The image is quantized to
    the 8-bit grid at the end, which makes the PGM round trip lossless.
    """
    if not 0 <= concept_id < len(CONCEPTS):
        raise ConfigError(f"concept_id {concept_id} out of range")
    if not 0 <= modality_id < len(MODALITIES):
        raise ConfigError(f"modality_id {modality_id} out of range")
    if not 0 <= attribute_id < len(ATTRIBUTES):
        raise ConfigError(f"attribute_id {attribute_id} out of range")
    h, w = size
    if h < 16 or w < 16:
        raise ConfigError(f"size must be at least 16x16, got {size}")

    band = _ATTRIBUTE_BANDS[ATTRIBUTES[attribute_id]]
    bg = rng.uniform(*band)
    delta = rng.uniform(0.25, 0.40)
    fg = bg + delta if bg < 0.5 else bg - delta

    mask = None
    for _ in range(100):
        params = draw_shape_params(concept_id, rng, size)
        candidate = rasterize(concept_id, params, size)
        if candidate.any():
            mask = candidate
            break
    if mask is None:  # pragma: no cover - margins make this unreachable
        raise ContractError(f"no {CONCEPTS[concept_id]} fit a {h}x{w} frame in 100 draws")

    img = np.where(mask.astype(bool), fg, bg)

    style = MODALITIES[modality_id]
    if style == "noise":
        img = img + rng.normal(0.0, 0.06, size=img.shape)
    elif style == "lowcontrast":
        factor = rng.uniform(0.30, 0.50)
        img = 0.5 + (img - 0.5) * factor
    elif style == "textured":
        fx, fy = rng.uniform(2.0, 5.0), rng.uniform(2.0, 5.0)
        px, py = rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)
        amp = rng.uniform(0.04, 0.09)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        pattern = amp * np.sin(2 * np.pi * (fx * xx / w + px)) * np.sin(2 * np.pi * (fy * yy / h + py))
        img = img + pattern * (1.0 - mask)

    img = np.clip(img, 0.0, 1.0)
    img = np.rint(img * 255.0) / 255.0
    return img, mask


# -- PGM files -----------------------------------------------------------------


def write_pgm(path, values: np.ndarray) -> None:
    """Binary 8-bit PGM (P5), maxval 255."""
    arr = np.asarray(values, dtype=np.uint8)
    if arr.ndim != 2:
        raise DatasetWriteError(f"PGM payload must be 2-D, got shape {arr.shape}")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(arr.tobytes())
    except OSError as e:
        raise DatasetWriteError(f"cannot write {path}: {e}") from e


def read_pgm(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except OSError as e:
        raise DatasetReadError(f"cannot read {path}: {e}") from e
    if not blob.startswith(b"P5"):
        raise CorruptDataError(f"{path}: not a binary PGM (bad magic)")
    # Header = magic, width, height, maxval tokens separated by whitespace
    # (comment lines are not produced by this writer and not accepted).
    fields: List[bytes] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise CorruptDataError(f"{path}: truncated PGM header")
        fields.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    try:
        w, h, maxval = int(fields[0]), int(fields[1]), int(fields[2])
    except ValueError:
        raise CorruptDataError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise CorruptDataError(f"{path}: unsupported maxval {maxval}")
    data = blob[pos : pos + h * w]
    if len(data) != h * w:
        raise CorruptDataError(f"{path}: expected {h * w} pixel bytes, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


# -- manifests and datasets ------------------------------------------------------


@dataclass
class Manifest:
    split: str
    seed: int
    profile: BiasProfile
    vocabularies: Dict[str, List[str]]
    entries: List[dict]
    root: Path = field(default=None)  # directory holding manifest.json

    def to_json(self) -> str:
        doc = {
            "split": self.split,
            "seed": self.seed,
            "profile": self.profile.to_dict(),
            "vocabularies": self.vocabularies,
            "entries": self.entries,
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_file(cls, path) -> "Manifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise DatasetReadError(f"cannot read manifest {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise CorruptDataError(f"{path}: invalid JSON: {e}") from e
        try:
            return cls(
                split=doc["split"],
                seed=doc["seed"],
                profile=BiasProfile.from_dict(doc["profile"]),
                vocabularies=doc["vocabularies"],
                entries=doc["entries"],
                root=path.parent,
            )
        except KeyError as e:
            raise CorruptDataError(f"{path}: manifest missing field {e}") from None

    def counts_per_concept(self) -> Dict[str, int]:
        counts: Dict[str, int] = {}
        for e in self.entries:
            counts[e["concept"]] = counts.get(e["concept"], 0) + 1
        return counts


@dataclass
class SampleRecord:
    id: str
    image: np.ndarray  # H×W float64 in [0,1]
    mask: np.ndarray  # H×W uint8 in {0,1}
    concept_id: int
    modality_id: int
    attribute_id: int
    prevalence_group: str


class Dataset:
    """In-memory split: records plus vocabularies and the derived group map."""

    def __init__(self, manifest: Manifest, records: List[SampleRecord], groups: Dict[str, str]):
        self.manifest = manifest
        self.records = records
        self.groups = groups
        self.concepts = list(manifest.vocabularies["concepts"])
        self.modalities = list(manifest.vocabularies["modalities"])
        self.attributes = list(manifest.vocabularies["attributes"])

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> SampleRecord:
        return self.records[i]


def assign_prevalence_groups(
    train_counts: Dict[str, int],
    head_threshold: int = HEAD_THRESHOLD,
    tail_threshold: int = TAIL_THRESHOLD,
) -> Dict[str, str]:
    """count >= head_threshold -> head; count < tail_threshold -> tail; else medium."""
    if not train_counts:
        raise ContractError("cannot assign prevalence groups from an empty count map")
    out = {}
    for concept, n in train_counts.items():
        if n >= head_threshold:
            out[concept] = "head"
        elif n < tail_threshold:
            out[concept] = "tail"
        else:
            out[concept] = "medium"
    return out


def _weighted_ids(weights: Dict[str, float], vocab: Tuple[str, ...]):
    ids = np.array([vocab.index(k) for k in sorted(weights)], dtype=np.intp)
    p = np.array([weights[k] for k in sorted(weights)], dtype=np.float64)
    return ids, p / p.sum()


def generate_dataset(
    profile: BiasProfile,
    seed: int,
    out_dir,
    n_test_per_concept: int = 24,
) -> Tuple[Manifest, Manifest]:
    """Write a train/test pair under out_dir; fully determined by (profile, seed).

    Train counts equal the quotas exactly. The test split is balanced: for each
    concept, styles and attributes cycle through their full vocabularies so
    every stratification cell is populated, including styles that are rare in
    training.
    """
    out_dir = Path(out_dir)
    vocabularies = {
        "concepts": list(CONCEPTS),
        "modalities": list(MODALITIES),
        "attributes": list(ATTRIBUTES),
    }
    h, w = profile.image_size
    mod_ids, mod_p = _weighted_ids(profile.modality_weights, MODALITIES)
    att_ids, att_p = _weighted_ids(profile.attribute_weights, ATTRIBUTES)
    concepts_used = sorted(profile.concept_quotas, key=CONCEPTS.index)

    manifests = []
    for split_idx, split in enumerate(("train", "test")):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), split_idx]))
        triples: List[Tuple[int, int, int]] = []
        if split == "train":
            for concept in concepts_used:
                cid = CONCEPTS.index(concept)
                quota = profile.concept_quotas[concept]
                for _ in range(quota):
                    mid = int(mod_ids[rng.choice(len(mod_ids), p=mod_p)])
                    aid = int(att_ids[rng.choice(len(att_ids), p=att_p)])
                    triples.append((cid, mid, aid))
            order = rng.permutation(len(triples))
            triples = [triples[i] for i in order]
        else:
            for concept in concepts_used:
                cid = CONCEPTS.index(concept)
                for j in range(n_test_per_concept):
                    mid = j % len(MODALITIES)
                    aid = (j // len(MODALITIES)) % len(ATTRIBUTES)
                    triples.append((cid, mid, aid))

        split_dir = out_dir / split
        img_dir = split_dir / "images"
        msk_dir = split_dir / "masks"
        try:
            img_dir.mkdir(parents=True, exist_ok=True)
            msk_dir.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DatasetWriteError(f"cannot create {split_dir}: {e}") from e

        entries = []
        for i, (cid, mid, aid) in enumerate(triples):
            sid = f"{split}-{i:05d}"
            image, mask = render_sample(cid, mid, aid, rng, (h, w))
            img_rel = f"images/{sid}.pgm"
            msk_rel = f"masks/{sid}.pgm"
            write_pgm(split_dir / img_rel, np.rint(image * 255.0).astype(np.uint8))
            write_pgm(split_dir / msk_rel, mask * 255)
            entries.append(
                {
                    "id": sid,
                    "concept": CONCEPTS[cid],
                    "modality": MODALITIES[mid],
                    "attribute": ATTRIBUTES[aid],
                    "image": img_rel,
                    "mask": msk_rel,
                    "image_crc32": zlib.crc32((split_dir / img_rel).read_bytes()) & 0xFFFFFFFF,
                    "mask_crc32": zlib.crc32((split_dir / msk_rel).read_bytes()) & 0xFFFFFFFF,
                }
            )

        manifest = Manifest(
            split=split,
            seed=int(seed),
            profile=profile,
            vocabularies=vocabularies,
            entries=entries,
            root=split_dir,
        )
        try:
            (split_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
        except OSError as e:
            raise DatasetWriteError(f"cannot write manifest under {split_dir}: {e}") from e
        manifests.append(manifest)

    return manifests[0], manifests[1]


def load_dataset(manifest_path) -> Dataset:
    """Read a split back, verifying checksums and the train-quota invariant.

    Prevalence groups always derive from the profile's training quotas, so
    loading the test split yields the same group map as the train split.
    """
    manifest = Manifest.from_file(manifest_path)
    groups = assign_prevalence_groups(manifest.profile.concept_quotas)
    concepts = manifest.vocabularies["concepts"]
    modalities = manifest.vocabularies["modalities"]
    attributes = manifest.vocabularies["attributes"]

    records = []
    seen_ids = set()
    for e in manifest.entries:
        if e["id"] in seen_ids:
            raise CorruptDataError(f"duplicate sample id {e['id']!r} in manifest")
        seen_ids.add(e["id"])
        img_path = manifest.root / e["image"]
        msk_path = manifest.root / e["mask"]
        for path, key in ((img_path, "image_crc32"), (msk_path, "mask_crc32")):
            if not path.exists():
                raise DatasetReadError(f"missing file: {path}")
            crc = zlib.crc32(path.read_bytes()) & 0xFFFFFFFF
            if crc != e[key]:
                raise CorruptDataError(f"checksum mismatch for {path}")
        image = read_pgm(img_path).astype(np.float64) / 255.0
        mask_raw = read_pgm(msk_path)
        mask = (mask_raw >= 128).astype(np.uint8)
        if not mask.any():
            raise CorruptDataError(f"empty mask in {msk_path}")
        records.append(
            SampleRecord(
                id=e["id"],
                image=image,
                mask=mask,
                concept_id=concepts.index(e["concept"]),
                modality_id=modalities.index(e["modality"]),
                attribute_id=attributes.index(e["attribute"]),
                prevalence_group=groups[e["concept"]],
            )
        )

    if manifest.split == "train":
        counts = manifest.counts_per_concept()
        if counts != dict(manifest.profile.concept_quotas):
            raise CorruptDataError(
                f"train counts {counts} do not match quotas {manifest.profile.concept_quotas}"
            )
    return Dataset(manifest, records, groups)
