"""Part-level shape representation.

A shape is an unordered set of parts. Each part carries
- a 16-dim extrinsic vector: Gaussian center c (3), eigenvalues lam (3),
  eigenvector columns u1,u2,u3 (9), and mixture weight pi (1), flattened in
  that order;
- an intrinsic latent code of fixed width d_s.

This module owns the geometry utilities around that encoding: nearest
orthogonal projection of eigenvector matrices, eigenvalue flooring,
element-wise standardization of (lam, pi), Gaussian-mixture density,
Mahalanobis distance, and distance-based label transfer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "EXT_DIM",
    "LAM_SLICE",
    "PI_INDEX",
    "EIGVAL_FLOOR",
    "ExtrinsicVec",
    "PartSet",
    "ExtrinsicStats",
    "PartMask",
    "project_O3",
    "clip_eigvals",
    "compute_stats",
    "normalize_extrinsics",
    "denormalize_extrinsics",
    "mixture_density",
    "mahalanobis",
    "transfer_labels",
    "mask_for_label",
]

EXT_DIM = 16
LAM_SLICE = slice(3, 6)
U_SLICE = slice(6, 15)
PI_INDEX = 15
EIGVAL_FLOOR = 1e-4

# standardized slots of the flat vector: the three eigenvalues and pi
_NORM_IDX = np.array([3, 4, 5, 15])


@dataclass
class ExtrinsicVec:
    """One part's Gaussian: center, eigenvalues, eigenvector columns, weight."""

    center: np.ndarray      # (3,)
    eigvals: np.ndarray     # (3,)
    eigvecs: np.ndarray     # (3,3), columns are u1,u2,u3
    weight: float

    def to_flat(self) -> np.ndarray:
        out = np.empty(EXT_DIM, dtype=np.float32)
        out[0:3] = self.center
        out[3:6] = self.eigvals
        out[6:15] = self.eigvecs.T.reshape(9)   # u1,u2,u3 consecutively
        out[15] = self.weight
        return out

    @classmethod
    def from_flat(cls, v: np.ndarray) -> "ExtrinsicVec":
        v = np.asarray(v, dtype=np.float32)
        if v.shape != (EXT_DIM,):
            raise ValueError(f"extrinsic vector must have length {EXT_DIM}")
        return cls(
            center=v[0:3].copy(),
            eigvals=v[3:6].copy(),
            eigvecs=v[6:15].reshape(3, 3).T.copy(),
            weight=float(v[15]),
        )

    def covariance(self) -> np.ndarray:
        U = self.eigvecs.astype(np.float64)
        return U @ np.diag(self.eigvals.astype(np.float64)) @ U.T


class PartSet:
    """N parts as stacked arrays, plus optional per-part semantic labels."""

    def __init__(self, extrinsics: np.ndarray, intrinsics: np.ndarray,
                 labels=None):
        extrinsics = np.asarray(extrinsics, dtype=np.float32)
        intrinsics = np.asarray(intrinsics, dtype=np.float32)
        if extrinsics.ndim != 2 or extrinsics.shape[1] != EXT_DIM:
            raise ValueError("extrinsics must be (N, 16)")
        if intrinsics.ndim != 2 or intrinsics.shape[0] != extrinsics.shape[0]:
            raise ValueError("intrinsics must be (N, d_s)")
        if extrinsics.shape[0] < 1:
            raise ValueError("a shape needs at least one part")
        self.extrinsics = extrinsics
        self.intrinsics = intrinsics
        self.labels = None if labels is None else np.asarray(labels, dtype=np.int64)
        if self.labels is not None and self.labels.shape != (extrinsics.shape[0],):
            raise ValueError("labels must be one id per part")

    @property
    def n_parts(self) -> int:
        return self.extrinsics.shape[0]

    @property
    def d_s(self) -> int:
        return self.intrinsics.shape[1]

    def part(self, i: int) -> ExtrinsicVec:
        return ExtrinsicVec.from_flat(self.extrinsics[i])

    def copy(self) -> "PartSet":
        return PartSet(
            self.extrinsics.copy(),
            self.intrinsics.copy(),
            None if self.labels is None else self.labels.copy(),
        )

    def centers(self) -> np.ndarray:
        return self.extrinsics[:, 0:3]

    def eigvals(self) -> np.ndarray:
        return self.extrinsics[:, LAM_SLICE]

    def eigvec_mats(self) -> np.ndarray:
        """(N,3,3) with columns u1,u2,u3."""
        return self.extrinsics[:, U_SLICE].reshape(-1, 3, 3).transpose(0, 2, 1)

    def weights(self) -> np.ndarray:
        return self.extrinsics[:, PI_INDEX]

    def to_json(self) -> dict:
        out = {
            "extrinsics": self.extrinsics.astype(np.float32).tolist(),
            "intrinsics": self.intrinsics.astype(np.float32).tolist(),
        }
        if self.labels is not None:
            out["labels"] = self.labels.tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "PartSet":
        return cls(
            np.asarray(obj["extrinsics"], dtype=np.float32),
            np.asarray(obj["intrinsics"], dtype=np.float32),
            obj.get("labels"),
        )


@dataclass(frozen=True)
class ExtrinsicStats:
    """Element-wise mean/std of the standardized slots (lam1,lam2,lam3,pi)."""

    mean: np.ndarray  # (4,)
    std: np.ndarray   # (4,)

    def __post_init__(self):
        if self.mean.shape != (4,) or self.std.shape != (4,):
            raise ValueError("stats hold 4 means and 4 stds")
        if np.any(self.std <= 0):
            raise ValueError("zero/negative std in extrinsic stats")

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "ExtrinsicStats":
        return cls(
            np.asarray(obj["mean"], dtype=np.float32),
            np.asarray(obj["std"], dtype=np.float32),
        )

    @classmethod
    def identity(cls) -> "ExtrinsicStats":
        return cls(np.zeros(4, dtype=np.float32), np.ones(4, dtype=np.float32))


@dataclass
class PartMask:
    """Binary per-part mask: 0 marks parts to regenerate, 1 marks preserved."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.int64)
        if v.ndim != 1 or not np.isin(v, (0, 1)).all():
            raise ValueError("mask must be a flat 0/1 vector")
        self.values = v

    def __len__(self) -> int:
        return len(self.values)


def project_O3(U: np.ndarray) -> np.ndarray:
    """Nearest orthogonal matrix in Frobenius norm, via the SVD.

    With U = A S B^T the projection is A B^T. Near-zero singular values
    keep whatever sign convention the SVD routine picked; the result is
    orthogonal either way (determinant may be -1: O(3), not SO(3)).
    """
    U = np.asarray(U, dtype=np.float64)
    if U.shape != (3, 3):
        raise ValueError("expected a 3x3 matrix")
    if not np.all(np.isfinite(U)):
        raise ValueError("non-finite eigenvector matrix")
    A, _, Bt = np.linalg.svd(U)
    return A @ Bt


def clip_eigvals(lam: np.ndarray, floor: float = EIGVAL_FLOOR) -> np.ndarray:
    """Floor every eigenvalue at 1e-4 to keep covariances positive-definite."""
    return np.maximum(np.asarray(lam), floor)


def compute_stats(flats: np.ndarray) -> ExtrinsicStats:
    """Training-set statistics over the standardized slots.

    ``flats`` is any (..., 16) stack of extrinsic vectors.
    """
    flats = np.asarray(flats, dtype=np.float64).reshape(-1, EXT_DIM)
    vals = flats[:, _NORM_IDX]
    mean = vals.mean(axis=0)
    std = vals.std(axis=0)
    if np.any(std <= 0):
        raise ValueError("degenerate training set: zero std in lam/pi slots")
    return ExtrinsicStats(mean.astype(np.float32), std.astype(np.float32))


def normalize_extrinsics(flats: np.ndarray, stats: ExtrinsicStats) -> np.ndarray:
    """Standardize the lam/pi slots; centers and eigenvectors pass through."""
    out = np.array(flats, dtype=np.float32, copy=True)
    out[..., _NORM_IDX] = (out[..., _NORM_IDX] - stats.mean) / stats.std
    return out


def denormalize_extrinsics(flats: np.ndarray, stats: ExtrinsicStats) -> np.ndarray:
    out = np.array(flats, dtype=np.float32, copy=True)
    out[..., _NORM_IDX] = out[..., _NORM_IDX] * stats.std + stats.mean
    return out


def _renormalized_weights(parts: PartSet) -> np.ndarray:
    pi = parts.weights().astype(np.float64)
    total = pi.sum()
    if total <= 0:
        raise ValueError("mixture weights must have positive sum")
    return pi / total


def mixture_density(x: np.ndarray, parts: PartSet) -> float:
    """Gaussian-mixture density sum_i pi_i N(x | c_i, Sigma_i).

    Stored weights are left untouched; they are renormalized to sum to one
    only for this evaluation.
    """
    x = np.asarray(x, dtype=np.float64)
    pi = _renormalized_weights(parts)
    centers = parts.centers().astype(np.float64)
    lams = parts.eigvals().astype(np.float64)
    Us = parts.eigvec_mats().astype(np.float64)

    total = 0.0
    for i in range(parts.n_parts):
        d = Us[i].T @ (x - centers[i])
        quad = np.sum(d * d / lams[i])
        norm = (2.0 * np.pi) ** 1.5 * np.sqrt(np.prod(lams[i]))
        total += pi[i] * np.exp(-0.5 * quad) / norm
    return float(total)


def mahalanobis(x: np.ndarray, e: ExtrinsicVec) -> float:
    """sqrt((x-c)^T Sigma^-1 (x-c)) with Sigma = U diag(lam) U^T."""
    x = np.asarray(x, dtype=np.float64)
    d = e.eigvecs.astype(np.float64).T @ (x - e.center.astype(np.float64))
    return float(np.sqrt(np.sum(d * d / e.eigvals.astype(np.float64))))


def _mahalanobis_to_points(parts: PartSet, points: np.ndarray) -> np.ndarray:
    """(N_parts, K) Mahalanobis distances, vectorized over points."""
    points = np.asarray(points, dtype=np.float64)
    centers = parts.centers().astype(np.float64)
    lams = parts.eigvals().astype(np.float64)
    Us = parts.eigvec_mats().astype(np.float64)
    diffs = points[None, :, :] - centers[:, None, :]            # (N,K,3)
    local = np.einsum("nji,nkj->nki", Us, diffs)                # U^T (x-c)
    return np.sqrt(np.sum(local * local / lams[:, None, :], axis=-1))


def transfer_labels(parts: PartSet, points: np.ndarray,
                    point_labels: np.ndarray, k: int = 100) -> np.ndarray:
    """Assign each part the majority label of its k nearest labeled points.

    Distance is Mahalanobis under the part's Gaussian. Uses min(k, available)
    points; vote ties go to the lowest label id.
    """
    points = np.asarray(points, dtype=np.float64)
    point_labels = np.asarray(point_labels, dtype=np.int64)
    if len(points) == 0:
        raise ValueError("no labeled points to transfer from")
    k = min(k, len(points))
    dists = _mahalanobis_to_points(parts, points)
    out = np.empty(parts.n_parts, dtype=np.int64)
    for i in range(parts.n_parts):
        nearest = np.argpartition(dists[i], k - 1)[:k]
        ids, counts = np.unique(point_labels[nearest], return_counts=True)
        out[i] = ids[counts == counts.max()].min()
    return out


def mask_for_label(labels: np.ndarray, target_label: int) -> tuple[PartMask, bool]:
    """Mask with 0 exactly at parts carrying the target label.

    Returns (mask, found). When the label is absent the mask is all ones and
    ``found`` is False so callers can warn.
    """
    labels = np.asarray(labels, dtype=np.int64)
    values = (labels != int(target_label)).astype(np.int64)
    found = bool((labels == int(target_label)).any())
    if not found:
        values = np.ones_like(labels)
    return PartMask(values), found
