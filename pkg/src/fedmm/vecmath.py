"""Numerical kernel: gradient features, pairwise divergence rows, 3x3 covariance
and Mahalanobis scoring, plus the relative-contrast experiment in high dimension.

Parameter vectors are 1-D float64 numpy arrays throughout the package.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateInput, DimensionMismatch, InsufficientPopulation, NumericalError

METRICS = ("man", "eul", "cos")

# ridge trigger and magnitude, both relative to trace(cov)
RIDGE_TRIGGER = 1e-10
RIDGE_SCALE = 1e-8
RIDGE_FLOOR = 1e-12


class GradientFeature(NamedTuple):
    man: float
    eul: float
    cos: float


class DivergenceRow(NamedTuple):
    man_sum: float
    eul_sum: float
    cos_sum: float


@dataclass(frozen=True)
class CovarianceMatrix:
    entries: np.ndarray
    regularized: bool = False


@dataclass
class RelativeContrastReport:
    dims: list[int]
    l1_contrast: list[float]
    l2_contrast: list[float]
    m_over_u_rootd: list[float]
    num_points: int
    num_trials: int
    seed: int = 0
    l1_range: list[float] = field(default_factory=list)
    l2_range: list[float] = field(default_factory=list)


def as_vector(values) -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size < 1:
        raise DimensionMismatch(f"expected a non-empty 1-D parameter vector, got shape {vec.shape}")
    if not np.all(np.isfinite(vec)):
        raise ValueError("parameter vector contains NaN or infinity")
    return vec


def check_same_dim(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")


def gradient_feature(global_model, local_model) -> GradientFeature:
    """(L1 distance, L2 distance, cosine of the two models) for one client.

    The cosine compares the models themselves, not their difference vectors.
    Raises DegenerateInput when either model has zero norm.
    """
    w0 = as_vector(global_model)
    wi = as_vector(local_model)
    check_same_dim(w0, wi)
    diff = wi - w0
    s0 = float(np.dot(w0, w0))
    si = float(np.dot(wi, wi))
    if s0 == 0.0 or si == 0.0:
        raise DegenerateInput("cosine undefined for a zero-norm model")
    # one sqrt of the product keeps cos(w, w) == 1 exactly
    denom = math.sqrt(s0 * si) if math.isfinite(s0 * si) else math.sqrt(s0) * math.sqrt(si)
    cos = float(np.dot(w0, wi)) / denom
    cos = min(1.0, max(-1.0, cos))
    return GradientFeature(float(np.abs(diff).sum()), float(np.linalg.norm(diff)), cos)


def divergence_rows(features: Sequence[Sequence[float]]) -> list[DivergenceRow]:
    """Per client, the sum over all other clients of |feature_i - feature_j|, per metric."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise InsufficientPopulation("need at least two clients to compare")
    sums = np.abs(arr[:, None, :] - arr[None, :, :]).sum(axis=1)
    return [DivergenceRow(*map(float, row)) for row in sums]


def mean_deviation_rows(features: Sequence[Sequence[float]]) -> list[DivergenceRow]:
    """|feature_i - mean(features)| per metric; the simpler outlier definition."""
    arr = np.asarray(features, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise InsufficientPopulation("need at least two clients to compare")
    dev = np.abs(arr - arr.mean(axis=0))
    return [DivergenceRow(*map(float, row)) for row in dev]


def covariance_of_rows(rows, ridge: float = RIDGE_SCALE, centered: bool = True) -> CovarianceMatrix:
    """Sample covariance (divisor K-1) of K feature rows, K > 3.

    A ridge of ``ridge * trace / 3`` (absolute 1e-12 when the trace is zero) is
    added when the smallest eigenvalue falls under 1e-10 * trace. With
    ``centered=False`` the raw second moment is used instead.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != 3:
        raise DimensionMismatch(f"expected K x 3 rows, got shape {X.shape}")
    k = X.shape[0]
    if k <= 3:
        raise InsufficientPopulation(f"covariance of 3 features needs K > 3 rows, got {k}")
    D = X - X.mean(axis=0) if centered else X
    cov = D.T @ D / (k - 1)
    cov = 0.5 * (cov + cov.T)
    trace = float(np.trace(cov))
    min_eig = float(np.linalg.eigvalsh(cov)[0])
    regularized = False
    if min_eig < RIDGE_TRIGGER * trace or trace <= 0.0:
        lam = ridge * trace / 3.0 if trace > 0.0 else RIDGE_FLOOR
        cov = cov + lam * np.eye(3)
        regularized = True
    return CovarianceMatrix(cov, regularized)


def inverse_3x3(m) -> np.ndarray:
    """Closed-form adjugate inverse of a 3x3 matrix."""
    a = np.asarray(m, dtype=np.float64)
    if a.shape != (3, 3):
        raise DimensionMismatch(f"expected 3x3 matrix, got {a.shape}")
    (a00, a01, a02), (a10, a11, a12), (a20, a21, a22) = a
    c00 = a11 * a22 - a12 * a21
    c01 = a12 * a20 - a10 * a22
    c02 = a10 * a21 - a11 * a20
    det = a00 * c00 + a01 * c01 + a02 * c02
    # features live on very different scales, so no relative det threshold here;
    # near-singular covariances are handled by the ridge rule upstream
    if not np.isfinite(det) or det == 0.0:
        raise NumericalError(f"singular 3x3 matrix (det={det:.3e})")
    adj = np.array(
        [
            [c00, a02 * a21 - a01 * a22, a01 * a12 - a02 * a11],
            [c01, a00 * a22 - a02 * a20, a02 * a10 - a00 * a12],
            [c02, a01 * a20 - a00 * a21, a00 * a11 - a01 * a10],
        ]
    )
    inv = adj / det
    if not np.all(np.isfinite(inv)):
        raise NumericalError("3x3 inverse overflowed")
    return inv


def mahalanobis_score(row, cov: CovarianceMatrix | np.ndarray) -> float:
    """sqrt(x^T cov^-1 x) using the adjugate inverse."""
    entries = cov.entries if isinstance(cov, CovarianceMatrix) else np.asarray(cov, dtype=np.float64)
    x = np.asarray(row, dtype=np.float64)
    inv = inverse_3x3(entries)
    q = float(x @ inv @ x)
    if q < 0.0:
        # round-off only; a PD matrix gives q >= 0
        if q < -1e-9 * float(x @ x) * float(np.abs(inv).max()):
            raise NumericalError("negative quadratic form; covariance is not positive definite")
        q = 0.0
    return math.sqrt(q)


def whitened(rows, cov: CovarianceMatrix) -> np.ndarray:
    """Rows mapped through the symmetric inverse square root of ``cov``."""
    vals, vecs = np.linalg.eigh(cov.entries)
    if vals[0] <= 0.0:
        raise NumericalError("covariance is not positive definite")
    inv_sqrt = (vecs / np.sqrt(vals)) @ vecs.T
    return np.asarray(rows, dtype=np.float64) @ inv_sqrt


def contrast_of_points(points) -> tuple[float, float, float, float]:
    """(L1 contrast, L2 contrast, L1 range, L2 range) of distances to the origin.

    Contrast is (Dmax - Dmin) / Dmin; range is Dmax - Dmin.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 2:
        raise InsufficientPopulation("need at least two points")
    l1 = np.abs(pts).sum(axis=1)
    l2 = np.sqrt((pts * pts).sum(axis=1))
    r1 = float(l1.max() - l1.min())
    r2 = float(l2.max() - l2.min())
    return r1 / float(l1.min()), r2 / float(l2.min()), r1, r2


def relative_contrast(dims, num_points: int = 100, num_trials: int = 20, seed: int = 0) -> RelativeContrastReport:
    """Monte-Carlo relative contrast of L1 and L2 norms for uniform points in [0, 1]^d.

    Also reports the mean of (L1 range) / (L2 range * sqrt(d)), which should
    settle to a constant as d grows.
    """
    dims = [int(d) for d in dims]
    if num_points < 2:
        raise ValueError("num_points must be >= 2")
    if num_trials < 1:
        raise ValueError("num_trials must be >= 1")
    if not dims or any(d < 1 for d in dims):
        raise ValueError("all dims must be >= 1")
    if any(b <= a for a, b in zip(dims, dims[1:])):
        raise ValueError("dims must be strictly increasing")
    rng = np.random.default_rng(seed)
    report = RelativeContrastReport(dims, [], [], [], num_points, num_trials, seed)
    for d in dims:
        c1 = c2 = ratio = s1 = s2 = 0.0
        for _ in range(num_trials):
            a, b, r1, r2 = contrast_of_points(rng.random((num_points, d)))
            c1 += a
            c2 += b
            s1 += r1
            s2 += r2
            ratio += r1 / (r2 * math.sqrt(d))
        report.l1_contrast.append(c1 / num_trials)
        report.l2_contrast.append(c2 / num_trials)
        report.m_over_u_rootd.append(ratio / num_trials)
        report.l1_range.append(s1 / num_trials)
        report.l2_range.append(s2 / num_trials)
    return report
