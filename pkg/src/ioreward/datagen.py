"""Deterministic synthetic paired datasets, mixup, and the on-disk format.

Two corpus kinds mirror the label structure of the paired datasets the
reward models consume:

* cd25: each category is a procedural texture family (seeded hue +
  grating frequency). A pair is positive when the output image's category
  is the one the valid-pairing relation maps the input's category to.
* seg: the input is a textured background with 1-3 toroidally placed
  foreground shapes; the positive output is the exact binary foreground
  mask, negatives corrupt the mask with one seeded operation. Shape
  placement and the translate corruption are uniform on the torus, so a
  translated mask has exactly the marginal distribution of a valid mask:
  on translate-only corpora the label is undecidable from the output alone.

Everything is a pure function of (spec, master seed); regenerating any
index is bit-identical. Corruption magnitudes are escalated until the
corrupted mask's IoU with the truth drops below 0.8 so negatives are
unambiguous.
"""

from __future__ import annotations

import colorsys
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ChecksumError, ConfigError, ContractError, DataFormatError

MAGIC = b"IORD"
FORMAT_VERSION = 1
KIND_CODES = {"cd25": 1, "seg": 2}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}

CORRUPTIONS = ("translate", "morph", "drop", "phantom", "noise")
# corruption id stored in category_out; 0 marks an uncorrupted positive
CORRUPTION_IDS = {name: i + 1 for i, name in enumerate(CORRUPTIONS)}

IOU_NEGATIVE_CEILING = 0.8
MIN_TRANSLATE_FRACTION = 0.1


@dataclass
class DatasetSpec:
    kind: str = "cd25"
    num_categories: int = 5
    num_samples: int = 1000
    image_size: int = 32
    corruption_menu: Tuple[str, ...] = CORRUPTIONS
    split_fractions: Tuple[float, float] = (0.8, 0.2)
    seed: int = 0
    pairing: str = "identity"

    def __post_init__(self):
        if self.kind not in KIND_CODES:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if not 2 <= self.num_categories <= 25:
            raise ConfigError("num_categories must be in [2, 25]")
        if self.num_samples < 0:
            raise ConfigError("num_samples must be >= 0")
        if self.image_size < 8 or self.image_size % 2:
            raise ConfigError("image_size must be an even number >= 8")
        if self.pairing not in ("identity", "permuted"):
            raise ConfigError(f"unknown pairing mode {self.pairing!r}")
        menu = tuple(self.corruption_menu)
        if self.kind == "seg":
            if not menu:
                raise ConfigError("seg corpus needs a non-empty menu")
            for item in menu:
                if item not in CORRUPTIONS:
                    raise ConfigError(f"unknown corruption {item!r}")
        self.corruption_menu = menu
        tf, vf = self.split_fractions
        if tf < 0 or vf < 0 or abs(tf + vf - 1.0) > 1e-9:
            raise ConfigError("split fractions must be >= 0 and sum to 1")

    def split_counts(self) -> Tuple[int, int]:
        n_train = int(round(self.num_samples * self.split_fractions[0]))
        return n_train, self.num_samples - n_train


@dataclass
class PairSample:
    """One (input image, output image, label) record with provenance.

    Images are float32 in [0, 1], channel-first [3, S, S]; for seg corpora
    the output is the binary mask broadcast over 3 channels. label is 1
    iff the pair satisfies the valid relation (category match / exact
    mask). For seg samples category_in holds the shape count and
    category_out the id of the applied corruption (0 when uncorrupted).
    """

    input_image: np.ndarray
    output_image: np.ndarray
    label: int
    seed: int
    category_in: int
    category_out: int


def sample_seed(spec_seed: int, index: int) -> int:
    state = np.random.SeedSequence([spec_seed, index]).generate_state(
        2, np.uint32)
    return int(state[0]) | (int(state[1]) << 32)


def valid_pairing_relation(spec: DatasetSpec) -> np.ndarray:
    """Category map defining positive pairs: identity, or a seeded
    derangement (every category maps to a different one)."""
    n = spec.num_categories
    if spec.pairing == "identity":
        return np.arange(n)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0xD0]))
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


# ---------------------------------------------------------------------------
# procedural textures


def _palette(n: int) -> np.ndarray:
    cols = [colorsys.hsv_to_rgb(k / n, 0.70, 0.95) for k in range(n)]
    return np.asarray(cols, dtype=np.float32)


def _grating(rng: np.random.Generator, size: int, freq: float,
             amplitude: float) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ax = np.arange(size) / size
    yy, xx = np.meshgrid(ax, ax, indexing="ij")
    wave = np.sin(2.0 * np.pi * freq * (xx * np.cos(theta) +
                                        yy * np.sin(theta)) + phase)
    return 0.6 + amplitude * wave


def sample_layout(rng: np.random.Generator) -> tuple:
    """Which two of the four image quadrants carry a sample's primary
    sub-pattern. The layout plays the role of the pair's shared content."""
    return tuple(sorted(int(i) for i in rng.choice(4, 2, replace=False)))


def category_texture(rng: np.random.Generator, category: int,
                     num_categories: int, size: int,
                     layout: Optional[tuple] = None) -> np.ndarray:
    """One image of texture family ``category``.

    A family owns two sub-patterns (its hue at low frequency, bright; the
    opposite hue at high frequency, dark) tiled over the four image
    quadrants in a half/half layout; grating orientation and phase vary
    per sample. Two token populations inside every image give windowed
    cross-attention something to peak on instead of one flat field.
    """
    if layout is None:
        layout = sample_layout(rng)
    hue = category / num_categories
    base_a = np.asarray(colorsys.hsv_to_rgb(hue, 0.85, 0.95))
    freq_a = 1.5 + 1.1 * category
    # signature: strong flat family color with a low-amplitude grating
    # accent, so the category direction survives encoding nearly linearly
    pat_a = base_a[:, None, None] * \
        (0.90 + 0.10 * _grating(rng, size, freq_a, 1.0))[None]
    # the complement quadrants are a neutral field shared by every family,
    # so only signature-quadrant tokens carry category information
    pat_b = np.full(3, 0.25)[:, None, None] * \
        (0.90 + 0.10 * _grating(rng, size, 5.0, 1.0))[None]
    quads = [(0, 0), (0, 1), (1, 0), (1, 1)]
    h = size // 2
    img = np.empty((3, size, size))
    for qi, (qy, qx) in enumerate(quads):
        src = pat_a if qi in layout else pat_b
        img[:, qy * h:(qy + 1) * h, qx * h:(qx + 1) * h] = \
            src[:, qy * h:(qy + 1) * h, qx * h:(qx + 1) * h]
    img += rng.normal(0.0, 0.04, size=(3, size, size))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _flat_texture(rng: np.random.Generator, size: int, base,
                  amplitude: float, freq: float) -> np.ndarray:
    pattern = _grating(rng, size, freq, amplitude)
    noise = rng.normal(0.0, 0.03, size=(3, size, size))
    img = np.asarray(base, dtype=np.float64)[:, None, None] * pattern[None]
    return np.clip(img + noise, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# toroidal shapes


def _wrapped_deltas(size: int, cy: float, cx: float):
    ax = np.arange(size, dtype=np.float64)
    dy = (ax[:, None] - cy + size / 2.0) % size - size / 2.0
    dx = (ax[None, :] - cx + size / 2.0) % size - size / 2.0
    dy = np.broadcast_to(dy, (size, size))
    dx = np.broadcast_to(dx, (size, size))
    return dy, dx


def _shape_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """One random shape (ellipse / rectangle / wavy blob), placed uniformly
    on the torus so its mask distribution is translation invariant."""
    cy, cx = rng.uniform(0.0, size, size=2)
    kind = rng.integers(3)
    dy, dx = _wrapped_deltas(size, cy, cx)
    theta = rng.uniform(0.0, np.pi)
    ry = rng.uniform(0.10, 0.20) * size
    rx = rng.uniform(0.10, 0.20) * size
    dyr = dy * np.cos(theta) + dx * np.sin(theta)
    dxr = -dy * np.sin(theta) + dx * np.cos(theta)
    if kind == 0:
        return (dyr / ry) ** 2 + (dxr / rx) ** 2 <= 1.0
    if kind == 1:
        return (np.abs(dyr) <= ry) & (np.abs(dxr) <= rx)
    r0 = rng.uniform(0.10, 0.18) * size
    amps = rng.uniform(0.0, 0.35, size=2)
    phis = rng.uniform(0.0, 2.0 * np.pi, size=2)
    ang = np.arctan2(dyr, dxr)
    radius = r0 * (1.0 + amps[0] * np.sin(2 * ang + phis[0]) +
                   amps[1] * np.sin(3 * ang + phis[1]))
    return np.hypot(dyr, dxr) <= radius


def iou(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(bool)
    b = b.astype(bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def _dilate(mask: np.ndarray, iterations: int) -> np.ndarray:
    out = mask.copy()
    for _ in range(iterations):
        out = (out | np.roll(out, 1, 0) | np.roll(out, -1, 0) |
               np.roll(out, 1, 1) | np.roll(out, -1, 1))
    return out


def _erode(mask: np.ndarray, iterations: int) -> np.ndarray:
    return ~_dilate(~mask, iterations)


# ---------------------------------------------------------------------------
# corruptions (each seeded, each escalated until IoU < 0.8)


def _corrupt_translate(mask, shapes, rng, size):
    best = None
    best_iou = 2.0
    for _ in range(12):
        dy = int(round(rng.uniform(MIN_TRANSLATE_FRACTION, 0.5) * size)) * \
            (1 if rng.random() < 0.5 else -1)
        dx = int(round(rng.uniform(MIN_TRANSLATE_FRACTION, 0.5) * size)) * \
            (1 if rng.random() < 0.5 else -1)
        cand = np.roll(mask, (dy, dx), axis=(0, 1))
        j = iou(mask, cand)
        if j < best_iou:
            best, best_iou = cand, j
        if j < IOU_NEGATIVE_CEILING:
            return cand
    return best


def _corrupt_morph(mask, shapes, rng, size):
    erode = rng.random() < 0.5
    for its in (3, 4, 6, 9):
        cand = _erode(mask, its) if erode else _dilate(mask, its)
        if erode and not cand.any():
            erode = False
            continue
        if iou(mask, cand) < IOU_NEGATIVE_CEILING:
            return cand
    return _dilate(mask, 12)


def _corrupt_drop(mask, shapes, rng, size):
    if len(shapes) < 2:
        return None
    order = rng.permutation(len(shapes))
    best = None
    best_iou = 2.0
    for idx in order:
        rest = np.zeros_like(mask)
        for j, s in enumerate(shapes):
            if j != idx:
                rest |= s
        jv = iou(mask, rest)
        if jv < best_iou:
            best, best_iou = rest, jv
        if jv < IOU_NEGATIVE_CEILING:
            return rest
    return best if best_iou < IOU_NEGATIVE_CEILING else None


def _corrupt_phantom(mask, shapes, rng, size):
    for _ in range(16):
        extra = _shape_mask(rng, size)
        cand = mask | extra
        if iou(mask, cand) < IOU_NEGATIVE_CEILING:
            return cand
    return None


def _corrupt_noise(mask, shapes, rng, size):
    total = size * size
    flat = mask.reshape(-1)
    for frac in (0.08, 0.12, 0.16, 0.20):
        k = int(round(frac * total))
        flips = rng.choice(total, size=k, replace=False)
        cand = flat.copy()
        cand[flips] = ~cand[flips]
        cand = cand.reshape(mask.shape)
        if iou(mask, cand) < IOU_NEGATIVE_CEILING:
            return cand
    return cand


_CORRUPT_FNS = {
    "translate": _corrupt_translate,
    "morph": _corrupt_morph,
    "drop": _corrupt_drop,
    "phantom": _corrupt_phantom,
    "noise": _corrupt_noise,
}


# ---------------------------------------------------------------------------
# generators


def gen_cd25_pair(spec: DatasetSpec, index: int) -> PairSample:
    """Category-permutation pair: positive iff the output texture family is
    the one the relation maps the input's family to.

    A positive output re-renders the input's quadrant layout in the mapped
    family (the pair shares content, differing in family); a negative
    output draws family and layout independently of the relation.
    """
    if index >= spec.num_samples:
        raise ContractError(f"index {index} >= num_samples")
    seed = sample_seed(spec.seed, index)
    rng = np.random.default_rng(seed)
    relation = valid_pairing_relation(spec)
    n = spec.num_categories
    cat_in = int(rng.integers(n))
    layout = sample_layout(rng)
    label = index % 2
    if label == 1:
        cat_out = int(relation[cat_in])
        layout_out = layout
    else:
        cat_out = int((relation[cat_in] + rng.integers(1, n)) % n)
        layout_out = sample_layout(rng)
    x_in = category_texture(rng, cat_in, n, spec.image_size, layout=layout)
    x_out = category_texture(rng, cat_out, n, spec.image_size,
                             layout=layout_out)
    return PairSample(x_in, x_out, label, seed, cat_in, cat_out)


def _seg_scene(spec: DatasetSpec, index: int):
    """Deterministic scene for one seg sample: shapes, their union (the
    ground-truth mask), the rendered input, and the rng positioned to draw
    the corruption."""
    if index >= spec.num_samples:
        raise ContractError(f"index {index} >= num_samples")
    seed = sample_seed(spec.seed, index)
    rng = np.random.default_rng(seed)
    size = spec.image_size
    lo = 2 if "drop" in spec.corruption_menu else 1
    n_shapes = int(rng.integers(lo, 4))
    shapes: List[np.ndarray] = []
    union = np.zeros((size, size), dtype=bool)
    for _ in range(n_shapes):
        for _attempt in range(10):
            s = _shape_mask(rng, size)
            if np.logical_and(s, union).sum() <= 0.25 * s.sum():
                break
        shapes.append(s)
        union |= s
    bg = _flat_texture(rng, size, (0.35, 0.42, 0.50), 0.12,
                       rng.uniform(1.0, 3.0))
    fg = _flat_texture(rng, size, (0.95, 0.60, 0.15), 0.18,
                       rng.uniform(3.0, 6.0))
    m3 = union[None].astype(np.float32)
    x_in = (bg * (1.0 - m3) + fg * m3).astype(np.float32)
    return seed, rng, shapes, union, x_in


def seg_truth_mask(spec: DatasetSpec, index: int) -> np.ndarray:
    """Ground-truth foreground mask of sample ``index`` (the uncorrupted
    mask, whatever the sample's label)."""
    return _seg_scene(spec, index)[3]


def gen_seg_pair(spec: DatasetSpec, index: int) -> PairSample:
    """Foreground-mask pair: positive output is the exact foreground mask,
    negative output is the mask after one seeded corruption."""
    seed, rng, shapes, union, x_in = _seg_scene(spec, index)
    size = spec.image_size
    n_shapes = len(shapes)
    label = index % 2
    if label == 1:
        out_mask = union
        corruption = 0
    else:
        name = spec.corruption_menu[int(rng.integers(
            len(spec.corruption_menu)))]
        corrupted = _CORRUPT_FNS[name](union, shapes, rng, size)
        if corrupted is None:
            # drop/phantom could not reach the IoU ceiling; translation
            # always can, so fall back and record what was applied.
            name = "translate"
            corrupted = _corrupt_translate(union, shapes, rng, size)
        out_mask = corrupted
        corruption = CORRUPTION_IDS[name]
    x_out = np.repeat(out_mask[None].astype(np.float32), 3, axis=0)
    return PairSample(x_in, x_out, label, seed, n_shapes, corruption)


def gen_pair(spec: DatasetSpec, index: int) -> PairSample:
    return (gen_cd25_pair if spec.kind == "cd25" else gen_seg_pair)(
        spec, index)


def gen_dataset(spec: DatasetSpec) -> List[PairSample]:
    """Full corpus in index order. Generation is independent per index
    (parallelizable); this builds serially in index order."""
    return [gen_pair(spec, i) for i in range(spec.num_samples)]


def split_dataset(spec: DatasetSpec,
                  samples: Sequence[PairSample]) -> Tuple[List[PairSample],
                                                          List[PairSample]]:
    """Index-range split (disjoint seed ranges by construction)."""
    n_train, _ = spec.split_counts()
    return list(samples[:n_train]), list(samples[n_train:])


# ---------------------------------------------------------------------------
# mixup


@dataclass
class MixedBatch:
    x_in: np.ndarray
    x_out: np.ndarray
    targets: np.ndarray
    lam: float
    partner: np.ndarray


def one_hot(labels: Sequence[int], num_classes: int = 2,
            dtype=np.float32) -> np.ndarray:
    out = np.zeros((len(labels), num_classes), dtype=dtype)
    out[np.arange(len(labels)), np.asarray(labels, dtype=int)] = 1.0
    return out


def mixup(x_in: np.ndarray, x_out: np.ndarray, targets: np.ndarray,
          alpha: float, rng: np.random.Generator,
          lam: Optional[float] = None) -> MixedBatch:
    """Convex combination of each sample with a permutation partner using
    one lambda ~ Beta(alpha, alpha) shared by input, output and label."""
    b = x_in.shape[0]
    if b < 2:
        raise ContractError("mixup needs a batch of at least 2")
    if alpha <= 0:
        raise ContractError("mixup needs alpha > 0")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    partner = rng.permutation(b)
    mix = lambda a: (lam * a + (1.0 - lam) * a[partner]).astype(a.dtype)
    return MixedBatch(mix(x_in), mix(x_out), mix(targets), lam, partner)


# ---------------------------------------------------------------------------
# file format
#
# header:  magic "IORD" | u16 version | u8 kind | u32 count | u16 image size
# record:  u64 seed | u8 label | u16 category_in | u16 category_out |
#          f32 planes (input 3*S*S then output 3*S*S, little-endian) |
#          u32 CRC32 of the record bytes before the checksum
# All integers little-endian.

_HEADER = struct.Struct("<4sHBIH")
_RECORD_HEAD = struct.Struct("<QBHH")


def _record_bytes(s: PairSample, size: int) -> bytes:
    if s.input_image.shape != (3, size, size) or \
            s.output_image.shape != (3, size, size):
        raise DataFormatError(
            f"sample images must be [3,{size},{size}]")
    head = _RECORD_HEAD.pack(s.seed, s.label, s.category_in, s.category_out)
    payload = (s.input_image.astype("<f4").tobytes() +
               s.output_image.astype("<f4").tobytes())
    body = head + payload
    return body + struct.pack("<I", zlib.crc32(body))


def write_dataset(spec: DatasetSpec, path,
                  samples: Optional[Sequence[PairSample]] = None) -> int:
    """Serialize a corpus (generating it if not supplied). Returns the
    number of records written."""
    if samples is None:
        samples = gen_dataset(spec)
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, FORMAT_VERSION, KIND_CODES[spec.kind],
                             len(samples), spec.image_size))
        for s in samples:
            f.write(_record_bytes(s, spec.image_size))
    return len(samples)


@dataclass
class DatasetHeader:
    kind: str
    count: int
    image_size: int
    version: int = FORMAT_VERSION


def read_header(path) -> DatasetHeader:
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise DataFormatError(f"{path}: truncated header")
    magic, version, kind, count, size = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if kind not in KIND_NAMES:
        raise DataFormatError(f"{path}: unknown kind code {kind}")
    return DatasetHeader(KIND_NAMES[kind], count, size, version)


def read_dataset(path) -> Iterator[PairSample]:
    """Stream records back, validating the per-record checksum."""
    header = read_header(path)
    size = header.image_size
    plane = 3 * size * size * 4
    rec_len = _RECORD_HEAD.size + 2 * plane + 4
    with open(path, "rb") as f:
        f.seek(_HEADER.size)
        for i in range(header.count):
            raw = f.read(rec_len)
            if len(raw) < rec_len:
                raise DataFormatError(
                    f"{path}: truncated at record {i}")
            body, crc_raw = raw[:-4], raw[-4:]
            if zlib.crc32(body) != struct.unpack("<I", crc_raw)[0]:
                raise ChecksumError(
                    f"{path}: record {i} checksum mismatch")
            seed, label, cat_in, cat_out = _RECORD_HEAD.unpack(
                body[:_RECORD_HEAD.size])
            flat = np.frombuffer(body, dtype="<f4",
                                 offset=_RECORD_HEAD.size,
                                 count=2 * 3 * size * size)
            x_in = flat[:3 * size * size].reshape(3, size, size).copy()
            x_out = flat[3 * size * size:].reshape(3, size, size).copy()
            yield PairSample(x_in, x_out, int(label), int(seed),
                             int(cat_in), int(cat_out))
        if f.read(1):
            raise DataFormatError(f"{path}: trailing bytes after records")


# ---------------------------------------------------------------------------
# corpus statistics


def corpus_stats(samples: Sequence[PairSample]) -> Dict[str, object]:
    n = len(samples)
    if n == 0:
        return {"count": 0, "label_balance": float("nan"),
                "category_in_histogram": {}, "category_out_histogram": {}}
    labels = np.array([s.label for s in samples])
    cin = np.array([s.category_in for s in samples])
    cout = np.array([s.category_out for s in samples])
    hist = lambda v: {int(k): int(c) for k, c in
                      zip(*np.unique(v, return_counts=True))}
    return {
        "count": n,
        "label_balance": float(labels.mean()),
        "category_in_histogram": hist(cin),
        "category_out_histogram": hist(cout),
    }
