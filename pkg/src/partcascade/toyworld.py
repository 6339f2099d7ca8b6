"""Procedural chair/table world with known part decompositions.

Each generated shape is a set of box-like parts (4 legs + seat + back for
chairs, 4 legs + top for tables). Part extrinsics are the exact Gaussian
poses of those boxes: center = part centroid, eigenvectors = jittered part
axes, eigenvalue = (half-extent)^2 / 3, weight proportional to part volume.
Labels come for free from the construction, captions from a closed template
grammar over a small fixed vocabulary.

Intrinsic codes drive an analytic superquadric occupancy decoder: the first
four entries map through a fixed logistic reparameterization g to

    exponent  p   = 1 + 3 sigmoid(code0)      in (1, 4)
    radius    rho = 0.5 + sigmoid(code1)      in (0.5, 1.5)
    bump amp  a   = 0.3 sigmoid(code2)        in (0, 0.3)
    bump freq k   = round(4 sigmoid(code3))   in {0..4}

and the remaining entries are free (standard normal). A query point x is
inside part i iff, in whitened local coordinates y = diag(lam)^(-1/2) U^T
(x - c),

    (|y1|^p + |y2|^p + |y3|^p)^(1/p) <= sqrt(3) rho (1 + a cos(k atan2(y2, y1))).

The sqrt(3) factor matches lam = (half-extent)^2/3, so p=2, rho=1, a=0 is
exactly the part's ellipsoid. Shape occupancy is the union over parts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .parts import EXT_DIM, PartSet
from .tensor import RandomSource

__all__ = [
    "LABELS",
    "LABEL_NAMES",
    "VOCAB",
    "ToySpec",
    "ToyDataset",
    "EmptyShapeError",
    "tokenize",
    "detokenize",
    "intrinsic_to_surface",
    "generate_dataset",
    "decode_occupancy",
    "sample_points",
    "sample_labeled_points",
    "label_parts_by_height",
]

LABELS = {"leg": 1, "seat": 2, "back": 3, "top": 4}
LABEL_NAMES = {v: k for k, v in LABELS.items()}

# Fixed caption vocabulary; id 0 is the reserved null token for empty text.
VOCAB = [
    "<null>", "a", "chair", "table", "with", "and", "legs", "seat", "top",
    "back", "tall", "short", "thin", "thick", "wide", "narrow", "high",
    "low", "no", "round", "boxy",
]
_WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


class EmptyShapeError(RuntimeError):
    """Point sampling exhausted its budget without a single interior hit."""


def tokenize(text: str) -> list[int]:
    ids = []
    for word in text.lower().replace(",", " ").replace(".", " ").split():
        if word not in _WORD_TO_ID:
            raise ValueError(f"word outside the toy vocabulary: {word!r}")
        ids.append(_WORD_TO_ID[word])
    return ids


def detokenize(ids) -> str:
    return " ".join(VOCAB[int(i)] for i in ids)


@dataclass(frozen=True)
class ToySpec:
    """Family, seed and parameter ranges for procedural generation."""

    family: str = "table"
    rng_seed: int = 0
    d_s: int = 32
    leg_len: tuple = (0.35, 0.7)
    # legs thick enough to carry a fair share of interior volume, so
    # distance-based label transfer has points to vote with
    leg_thick: tuple = (0.05, 0.12)
    surface_half: tuple = (0.25, 0.45)     # seat/top half width and depth
    surface_thick: tuple = (0.03, 0.06)
    back_height: tuple = (0.3, 0.6)
    back_thick: tuple = (0.025, 0.05)
    center_jitter: float = 0.015
    rot_jitter: float = 0.06               # radians, per axis

    def __post_init__(self):
        if self.family not in ("chair", "table"):
            raise ValueError("family must be 'chair' or 'table'")
        if self.d_s < 4:
            raise ValueError("d_s must be at least 4 (surface parameters)")

    @property
    def n_parts(self) -> int:
        return 6 if self.family == "chair" else 5

    @property
    def label_set(self) -> tuple:
        if self.family == "chair":
            return (LABELS["leg"], LABELS["seat"], LABELS["back"])
        return (LABELS["leg"], LABELS["top"])


@dataclass
class ToyDataset:
    spec: ToySpec
    shapes: list = field(default_factory=list)
    caption_ids: list = field(default_factory=list)
    caption_texts: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.shapes)

    def split(self, holdout: int, seed: int) -> tuple["ToyDataset", "ToyDataset"]:
        """Seeded split into (train, held-out) datasets."""
        order = RandomSource(seed).permutation(len(self.shapes))
        hold = set(order[:holdout].tolist())
        train = ToyDataset(self.spec)
        test = ToyDataset(self.spec)
        for i in range(len(self.shapes)):
            dst = test if i in hold else train
            dst.shapes.append(self.shapes[i])
            dst.caption_ids.append(self.caption_ids[i])
            dst.caption_texts.append(self.caption_texts[i])
        return train, test


def _logit(q: float) -> float:
    q = min(max(q, 1e-4), 1.0 - 1e-4)
    return float(np.log(q / (1.0 - q)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def intrinsic_to_surface(code: np.ndarray) -> tuple[float, float, float, int]:
    """Apply g: first four code entries -> (p, rho, a, k)."""
    s = _sigmoid(np.asarray(code[:4], dtype=np.float64))
    return 1.0 + 3.0 * s[0], 0.5 + s[1], 0.3 * s[2], int(round(4.0 * s[3]))


def _rotation_jitter(rng: RandomSource, magnitude: float) -> np.ndarray:
    ax, ay, az = (rng.normal(3).astype(np.float64) * magnitude)
    cx, sx = np.cos(ax), np.sin(ax)
    cy, sy = np.cos(ay), np.sin(ay)
    cz, sz = np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def _intrinsic_code(rng: RandomSource, d_s: int, kind: str) -> np.ndarray:
    # legs are rounder, surfaces boxier; rho near 1 keeps parts at their
    # nominal extents; small bump amplitude adds benign variety
    if kind == "leg":
        p = 2.0 + 0.15 * float(rng.normal())
    else:
        p = 3.2 + 0.2 * float(rng.normal())
    p = float(np.clip(p, 1.5, 3.8))
    rho = float(np.clip(1.0 + 0.04 * float(rng.normal()), 0.85, 1.15))
    amp = float(np.clip(0.04 + 0.02 * float(rng.normal()), 0.01, 0.1))
    k = int(rng.integers(0, 5))

    code = np.empty(d_s, dtype=np.float32)
    code[0] = _logit((p - 1.0) / 3.0)
    code[1] = _logit(rho - 0.5)
    code[2] = _logit(amp / 0.3)
    code[3] = _logit(np.clip(k / 4.0, 0.05, 0.95))
    code[4:] = rng.normal(d_s - 4)
    return code


def _part_extrinsic(rng: RandomSource, center, half, jitter_c, jitter_r):
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)
    center = center + rng.normal(3).astype(np.float64) * jitter_c
    R = _rotation_jitter(rng, jitter_r)
    lam = half * half / 3.0
    order = np.argsort(-lam, kind="stable")      # descending eigenvalues
    lam = lam[order]
    U = R[:, order]
    flat = np.empty(EXT_DIM, dtype=np.float32)
    flat[0:3] = center
    flat[3:6] = lam
    flat[6:15] = U.T.reshape(9)
    flat[15] = float(np.prod(2.0 * half))        # volume; renormalized later
    return flat


def _uniform(rng: RandomSource, lo_hi) -> float:
    lo, hi = lo_hi
    return float(rng.uniform((), lo, hi))


# caption adjective thresholds: fixed midpoints of the default ranges so
# captions never depend on dataset statistics
_THR_LEG_LEN = 0.525
_THR_LEG_THICK = 0.085
_THR_SURFACE = 0.35
_THR_BACK = 0.45


def _make_shape(spec: ToySpec, rng: RandomSource):
    leg_len = _uniform(rng, spec.leg_len)
    leg_t = _uniform(rng, spec.leg_thick)
    w = _uniform(rng, spec.surface_half)
    d = _uniform(rng, spec.surface_half)
    st = _uniform(rng, spec.surface_thick)

    parts = []
    labels = []
    kinds = []
    for sx in (-1.0, 1.0):
        for sy in (-1.0, 1.0):
            c = (sx * (w - leg_t), sy * (d - leg_t), leg_len / 2.0)
            parts.append((c, (leg_t, leg_t, leg_len / 2.0)))
            labels.append(LABELS["leg"])
            kinds.append("leg")

    surface_z = leg_len + st
    surface_label = "seat" if spec.family == "chair" else "top"
    parts.append(((0.0, 0.0, surface_z), (w, d, st)))
    labels.append(LABELS[surface_label])
    kinds.append("surface")

    if spec.family == "chair":
        bh = _uniform(rng, spec.back_height) / 2.0
        bt = _uniform(rng, spec.back_thick)
        bz = leg_len + 2.0 * st + bh
        parts.append(((0.0, -(d - bt), bz), (w, bt, bh)))
        labels.append(LABELS["back"])
        kinds.append("back")

    flats = np.stack([
        _part_extrinsic(rng, c, h, spec.center_jitter, spec.rot_jitter)
        for c, h in parts
    ])
    flats[:, 15] /= flats[:, 15].sum()

    codes = np.stack([_intrinsic_code(rng, spec.d_s, k) for k in kinds])

    words = [
        "a", spec.family, "with",
        "tall" if leg_len >= _THR_LEG_LEN else "short",
        "thin" if leg_t < _THR_LEG_THICK else "thick",
        "legs", "and", "a",
        "wide" if w >= _THR_SURFACE else "narrow",
        surface_label,
    ]
    if spec.family == "chair":
        words += ["and", "a", "high" if 2 * bh >= _THR_BACK else "low", "back"]
    caption = " ".join(words)

    return PartSet(flats, codes, labels), caption


def generate_dataset(spec: ToySpec, count: int) -> ToyDataset:
    """Deterministic labeled dataset; per-shape child seeds allow parallel use."""
    if count < 1:
        raise ValueError("count must be >= 1")
    ds = ToyDataset(spec)
    for child in RandomSource(spec.rng_seed).spawn(count):
        shape, caption = _make_shape(spec, child)
        ds.shapes.append(shape)
        ds.caption_ids.append(tokenize(caption))
        ds.caption_texts.append(caption)
    return ds


# -- analytic decoder ---------------------------------------------------------


def _per_part_inside(points: np.ndarray, parts: PartSet) -> np.ndarray:
    """(N_parts, M) boolean occupancy per part."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    centers = parts.centers().astype(np.float64)
    lams = np.maximum(parts.eigvals().astype(np.float64), 1e-12)
    Us = parts.eigvec_mats().astype(np.float64)

    diffs = points[None, :, :] - centers[:, None, :]
    local = np.einsum("nji,nkj->nki", Us, diffs)        # U^T (x - c)
    y = local / np.sqrt(lams[:, None, :])

    inside = np.empty((parts.n_parts, len(points)), dtype=bool)
    for i in range(parts.n_parts):
        p, rho, amp, k = intrinsic_to_surface(parts.intrinsics[i])
        r = np.power(np.sum(np.abs(y[i]) ** p, axis=-1), 1.0 / p)
        theta = np.arctan2(y[i][:, 1], y[i][:, 0])
        inside[i] = r <= np.sqrt(3.0) * rho * (1.0 + amp * np.cos(k * theta))
    return inside


def decode_occupancy(x: np.ndarray, parts: PartSet):
    """Occupancy (1 inside, 0 outside) at one point or a stack of points."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    occ = _per_part_inside(x, parts).any(axis=0).astype(np.float64)
    return float(occ[0]) if single else occ


def _bounding_box(parts: PartSet) -> tuple[np.ndarray, np.ndarray]:
    centers = parts.centers().astype(np.float64)
    lams = parts.eigvals().astype(np.float64)
    Us = parts.eigvec_mats().astype(np.float64)
    reach = np.zeros_like(centers)
    for i in range(parts.n_parts):
        p, rho, amp, _ = intrinsic_to_surface(parts.intrinsics[i])
        R = np.sqrt(3.0) * rho * (1.0 + amp)
        reach[i] = np.abs(Us[i]) @ (np.sqrt(lams[i]) * R)
    return (centers - reach).min(axis=0), (centers + reach).max(axis=0)


def sample_points(parts: PartSet, count: int, seed: int,
                  batch: int = 8192, budget: int = 1_000_000) -> np.ndarray:
    """Uniform interior samples by rejection from the shape's bounding box.

    After ``budget`` rejected proposals, switches to Gaussian-mixture
    proposals centered on the parts (not exactly uniform; a failover for
    extremely thin shapes).
    """
    if count == 0:
        return np.zeros((0, 3), dtype=np.float64)
    rng = RandomSource(seed)
    lo, hi = _bounding_box(parts)
    accepted = []
    total = 0
    used = 0
    while total < count and used < budget:
        u = rng.gen.uniform(size=(batch, 3))
        props = lo + u * (hi - lo)
        hit = props[_per_part_inside(props, parts).any(axis=0)]
        accepted.append(hit)
        total += len(hit)
        used += batch

    if total < count:
        pi = parts.weights().astype(np.float64)
        pi = np.maximum(pi, 0.0)
        pi = pi / pi.sum() if pi.sum() > 0 else np.full(parts.n_parts, 1.0 / parts.n_parts)
        centers = parts.centers().astype(np.float64)
        lams = parts.eigvals().astype(np.float64)
        Us = parts.eigvec_mats().astype(np.float64)
        for _ in range(256):
            idx = rng.gen.choice(parts.n_parts, size=batch, p=pi)
            z = rng.gen.standard_normal((batch, 3))
            props = centers[idx] + np.einsum(
                "kij,kj->ki", Us[idx], np.sqrt(lams[idx]) * z)
            hit = props[_per_part_inside(props, parts).any(axis=0)]
            accepted.append(hit)
            total += len(hit)
            if total >= count:
                break
        if total == 0:
            raise EmptyShapeError("no interior point found within budget")
        if total < count:
            raise EmptyShapeError(
                f"only {total}/{count} interior points found within budget")

    return np.concatenate(accepted, axis=0)[:count]


def sample_labeled_points(parts: PartSet, count: int, seed: int) -> tuple:
    """Interior samples plus per-point labels of the containing part.

    A point inside several parts takes the label of the part with smallest
    Mahalanobis distance. Requires the part set to carry labels.
    """
    if parts.labels is None:
        raise ValueError("part set has no labels to propagate")
    pts = sample_points(parts, count, seed)
    inside = _per_part_inside(pts, parts)
    from .parts import _mahalanobis_to_points
    dist = _mahalanobis_to_points(parts, pts)
    dist = np.where(inside, dist, np.inf)
    owner = np.argmin(dist, axis=0)
    return pts, parts.labels[owner]


def label_parts_by_height(parts: PartSet, family: str | None = None) -> np.ndarray:
    """Rule-based labels for arbitrary part sets of the toy families.

    The four lowest-centered parts are legs; the highest remaining part is
    the back (chair) and the rest the seat/top. Family defaults by part
    count (6 -> chair, else table).
    """
    if family is None:
        family = "chair" if parts.n_parts == 6 else "table"
    z = parts.centers()[:, 2]
    order = np.argsort(z, kind="stable")
    labels = np.empty(parts.n_parts, dtype=np.int64)
    n_legs = min(4, parts.n_parts - 1)
    labels[order[:n_legs]] = LABELS["leg"]
    rest = order[n_legs:]
    if family == "chair" and len(rest) >= 2:
        labels[rest[:-1]] = LABELS["seat"]
        labels[rest[-1]] = LABELS["back"]
    else:
        labels[rest] = LABELS["seat" if family == "chair" else "top"]
    return labels
