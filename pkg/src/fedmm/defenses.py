"""Aggregation rules: FedAvg, the multi-metric defense and its two ablations, and the
Krum, Multi-Krum, RFA, Foolsgold and Weak-DP baselines.

Every rule takes the last global model and the round's client updates and
returns an :class:`AggregationResult`. Updates are always reduced in
ascending client_id order so the result does not depend on submission order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import vecmath
from .errors import DegenerateInput, Infeasible, InsufficientPopulation
from .vecmath import METRICS, GradientFeature, as_vector

log = logging.getLogger(__name__)

FEDAVG = "fedavg"
MULTI_METRICS = "multi_metrics"
MULTI_METRICS_MAXNORM = "multi_metrics_maxnorm"
MULTI_METRICS_MEAN = "multi_metrics_mean"
KRUM = "krum"
MULTI_KRUM = "multi_krum"
RFA = "rfa"
FOOLSGOLD = "foolsgold"
WEAK_DP = "weak_dp"
DEFENSE_KINDS = (
    FEDAVG, MULTI_METRICS, MULTI_METRICS_MAXNORM, MULTI_METRICS_MEAN,
    KRUM, MULTI_KRUM, RFA, FOOLSGOLD, WEAK_DP,
)
MULTI_METRIC_FAMILY = (MULTI_METRICS, MULTI_METRICS_MAXNORM, MULTI_METRICS_MEAN)
NO_METRIC = "n/a"


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    model: np.ndarray
    num_samples: int

    def __post_init__(self):
        if self.num_samples < 1:
            raise ValueError("num_samples must be >= 1")
        object.__setattr__(self, "model", as_vector(self.model))


@dataclass(frozen=True)
class DefenseSpec:
    kind: str = FEDAVG
    p: float = 0.3
    f: int = 1
    clip_threshold: float = 2.0
    noise_sigma: float = 0.0025
    rfa_smoothing: float = 1e-5
    rfa_tolerance: float = 1e-1
    rfa_max_iters: int = 500
    eta: float = 1.0
    centered_covariance: bool = True

    def __post_init__(self):
        if self.kind not in DEFENSE_KINDS:
            raise ValueError(f"unknown defense kind {self.kind!r}")
        if not 0.0 < self.p <= 1.0:
            raise ValueError("p must lie in (0, 1]")
        if self.f < 0:
            raise ValueError("f must be >= 0")
        if self.clip_threshold <= 0:
            raise ValueError("clip_threshold must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if self.rfa_smoothing <= 0 or self.rfa_tolerance <= 0 or self.rfa_max_iters < 1:
            raise ValueError("RFA settings must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")


@dataclass
class AggregationResult:
    model: np.ndarray
    selected_ids: list[int]
    scores: dict[int, float] = field(default_factory=dict)
    dominant_metric: str = NO_METRIC


def _sorted(updates) -> list[ClientUpdate]:
    if not updates:
        raise Infeasible("no client updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    for u in ups:
        vecmath.check_same_dim(ups[0].model, u.model)
    ids = [u.client_id for u in ups]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client_id in updates")
    return ups


def _weighted_step(global_model, ups, eta, weights=None) -> np.ndarray:
    """w0 + eta * sum(weight_i * (w_i - w0)) / sum(weight_i), summed in list order."""
    if weights is None:
        weights = [float(u.num_samples) for u in ups]
    total = 0.0
    acc = np.zeros_like(global_model)
    for u, wt in zip(ups, weights):
        acc += wt * (u.model - global_model)
        total += wt
    return global_model + eta * (acc / total)


def fedavg(global_model, updates, eta: float = 1.0) -> AggregationResult:
    g = as_vector(global_model)
    ups = _sorted(updates)
    return AggregationResult(_weighted_step(g, ups, eta), [u.client_id for u in ups])


# --- multi-metric family -------------------------------------------------------


def client_features(global_model, ups) -> np.ndarray:
    feats = []
    for u in ups:
        try:
            feats.append(vecmath.gradient_feature(global_model, u.model))
        except DegenerateInput:
            log.warning("client %d: zero-norm model, cosine feature set to 0", u.client_id)
            diff = u.model - global_model
            feats.append(GradientFeature(float(np.abs(diff).sum()), float(np.linalg.norm(diff)), 0.0))
    return np.array(feats, dtype=np.float64)


def removal_count(k: int, p: float) -> int:
    # guard against 10 * (1 - 0.7) = 3.0000000000000004
    return int(math.ceil(k * (1.0 - p) - 1e-9))


def _select(ups, scores, p):
    k = len(ups)
    remove = removal_count(k, p)
    if k - remove < 1:
        raise InsufficientPopulation(f"p={p} keeps no client out of {k}")
    order = sorted(range(k), key=lambda i: (scores[i], ups[i].client_id))
    keep = sorted(order[: k - remove])
    dropped = sorted(order[k - remove :])
    return keep, dropped


def _dominant(contrib: np.ndarray, dropped) -> str:
    if not dropped:
        return NO_METRIC
    avg = np.abs(contrib[dropped]).mean(axis=0)
    return METRICS[int(np.argmax(avg))]


def _multi_metric(global_model, updates, spec: DefenseSpec, variant: str) -> AggregationResult:
    g = as_vector(global_model)
    ups = _sorted(updates)
    k = len(ups)
    if k <= 3:
        raise InsufficientPopulation(f"multi-metric scoring needs K > 3 clients, got {k}")
    feats = client_features(g, ups)
    if variant == MULTI_METRICS_MEAN:
        rows = np.array(vecmath.mean_deviation_rows(feats))
    else:
        rows = np.array(vecmath.divergence_rows(feats))

    if variant == MULTI_METRICS_MAXNORM:
        colmax = rows.max(axis=0)
        safe = np.where(colmax > 0, colmax, 1.0)
        contrib = np.where(colmax > 0, rows / safe, 0.0)
        scores = np.sqrt((contrib**2).sum(axis=1))
    else:
        cov = vecmath.covariance_of_rows(rows, centered=spec.centered_covariance)
        scores = np.array([vecmath.mahalanobis_score(r, cov) for r in rows])
        contrib = vecmath.whitened(rows, cov)

    keep, dropped = _select(ups, scores, spec.p)
    chosen = [ups[i] for i in keep]
    return AggregationResult(
        _weighted_step(g, chosen, spec.eta),
        [u.client_id for u in chosen],
        {u.client_id: float(s) for u, s in zip(ups, scores)},
        _dominant(contrib, dropped),
    )


def multi_metrics(global_model, updates, spec: DefenseSpec) -> AggregationResult:
    """Manhattan/Euclidean/cosine features, pairwise-sum rows, Mahalanobis score,
    drop the ceil(K(1-p)) most divergent clients and FedAvg the rest."""
    return _multi_metric(global_model, updates, spec, MULTI_METRICS)


def multi_metrics_maxnorm(global_model, updates, spec: DefenseSpec) -> AggregationResult:
    """Ablation: score is the L2 norm of each row divided coordinate-wise by the column max."""
    return _multi_metric(global_model, updates, spec, MULTI_METRICS_MAXNORM)


def multi_metrics_mean(global_model, updates, spec: DefenseSpec) -> AggregationResult:
    """Ablation: rows are |feature - mean feature| instead of pairwise sums."""
    return _multi_metric(global_model, updates, spec, MULTI_METRICS_MEAN)


# --- Krum family -----------------------------------------------------------------


def krum_scores(models: np.ndarray, f: int) -> np.ndarray:
    """Sum of squared L2 distances to the K - f - 2 nearest other models."""
    k = models.shape[0]
    if k < f + 3:
        raise Infeasible(f"Krum needs K >= f + 3 (K={k}, f={f})")
    diff = models[:, None, :] - models[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    np.fill_diagonal(d2, np.inf)
    nearest = np.sort(d2, axis=1)[:, : k - f - 2]
    return nearest.sum(axis=1)


def krum(global_model, updates, spec: DefenseSpec) -> AggregationResult:
    g = as_vector(global_model)
    ups = _sorted(updates)
    scores = krum_scores(np.stack([u.model for u in ups]), spec.f)
    best = int(np.argmin(scores))  # first minimum == lowest client_id
    chosen = ups[best]
    return AggregationResult(
        g + spec.eta * (chosen.model - g),
        [chosen.client_id],
        {u.client_id: float(s) for u, s in zip(ups, scores)},
    )


def multi_krum(global_model, updates, spec: DefenseSpec) -> AggregationResult:
    g = as_vector(global_model)
    ups = _sorted(updates)
    k = len(ups)
    scores = krum_scores(np.stack([u.model for u in ups]), spec.f)
    m = k - spec.f
    keep = sorted(sorted(range(k), key=lambda i: (scores[i], ups[i].client_id))[:m])
    chosen = [ups[i] for i in keep]
    return AggregationResult(
        _weighted_step(g, chosen, spec.eta),
        [u.client_id for u in chosen],
        {u.client_id: float(s) for u, s in zip(ups, scores)},
    )


# --- RFA -------------------------------------------------------------------------


def smoothed_objective(z, points, weights, smoothing) -> float:
    """sum_i w_i * phi(||z - p_i||), phi the Huber-style smoothing of |r| at ``smoothing``."""
    r = np.linalg.norm(points - z, axis=1)
    phi = np.where(r >= smoothing, r, r * r / (2 * smoothing) + smoothing / 2)
    return float((weights * phi).sum())


def geometric_median(points, weights=None, smoothing=1e-5, tol=1e-1, max_iters=500, history=None):
    """Smoothed Weiszfeld iteration; stops once an iterate moves less than ``tol``.

    If ``history`` is a list, the smoothed objective after every iterate is appended.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 1:
        pts = pts[:, None]
    if weights is None:
        weights = np.ones(pts.shape[0])
    alpha = np.asarray(weights, dtype=np.float64)
    alpha = alpha / alpha.sum()
    z = alpha @ pts
    if history is not None:
        history.append(smoothed_objective(z, pts, alpha, smoothing))
    for _ in range(max_iters):
        beta = alpha / np.maximum(smoothing, np.linalg.norm(pts - z, axis=1))
        z_new = beta @ pts / beta.sum()
        moved = float(np.linalg.norm(z_new - z))
        z = z_new
        if history is not None:
            history.append(smoothed_objective(z, pts, alpha, smoothing))
        if moved < tol:
            break
    return z


def rfa(global_model, updates, spec: DefenseSpec) -> AggregationResult:
    g = as_vector(global_model)
    ups = _sorted(updates)
    median = geometric_median(
        np.stack([u.model for u in ups]),
        [u.num_samples for u in ups],
        spec.rfa_smoothing,
        spec.rfa_tolerance,
        spec.rfa_max_iters,
    )
    return AggregationResult(g + spec.eta * (median - g), [u.client_id for u in ups])


# --- Foolsgold ---------------------------------------------------------------------


def _cosine_matrix(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    cs = unit @ unit.T
    cs[norms == 0, :] = 0.0
    cs[:, norms == 0] = 0.0
    return np.clip(cs, -1.0, 1.0)


def foolsgold_weights(histories: np.ndarray, confidence: float = 1.0) -> np.ndarray:
    """Per-client weights from pairwise cosine similarity of cumulative updates,
    with pardoning and logit rescaling."""
    n = histories.shape[0]
    if n == 1:
        return np.ones(1)
    cs = _cosine_matrix(histories) - np.eye(n)
    maxcs = cs.max(axis=1)
    pardoned = cs.copy()
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j]:
                pardoned[i, j] = cs[i, j] * maxcs[i] / maxcs[j]
    wv = np.clip(1.0 - pardoned.max(axis=1), 0.0, 1.0)
    # similarity equal to 1 up to round-off means an exact clone
    wv[wv < 1e-12] = 0.0
    top = wv.max()
    if top <= 0:
        return np.zeros(n)
    wv = wv / top
    wv[wv == 1.0] = 0.99
    with np.errstate(divide="ignore"):
        wv = confidence * (np.log(wv / (1.0 - wv)) + 0.5)
    return np.clip(np.nan_to_num(wv, nan=0.0, posinf=1.0, neginf=0.0), 0.0, 1.0)


def foolsgold(global_model, updates, spec: DefenseSpec, history: dict) -> AggregationResult:
    """Down-weight clients whose cumulative updates look alike.

    ``history`` maps client_id to its cumulative update and is updated in place.
    """
    g = as_vector(global_model)
    ups = _sorted(updates)
    for u in ups:
        prev = history.get(u.client_id)
        delta = u.model - g
        history[u.client_id] = delta.copy() if prev is None else prev + delta
    alphas = foolsgold_weights(np.stack([history[u.client_id] for u in ups]))
    if alphas.sum() > 0:
        model = _weighted_step(g, ups, spec.eta, weights=list(alphas))
    else:
        model = _weighted_step(g, ups, spec.eta)
    return AggregationResult(
        model,
        [u.client_id for u, a in zip(ups, alphas) if a > 0.01],
        {u.client_id: float(a) for u, a in zip(ups, alphas)},
    )


# --- Weak DP ---------------------------------------------------------------------


def clip_difference(diff: np.ndarray, threshold: float) -> np.ndarray:
    norm = float(np.linalg.norm(diff))
    if norm <= threshold:
        return diff
    return diff * (threshold / norm)


def weak_dp(global_model, updates, spec: DefenseSpec, rng: np.random.Generator | None = None) -> AggregationResult:
    """Clip each update to ``clip_threshold``, FedAvg, then add N(0, noise_sigma^2) per coordinate."""
    g = as_vector(global_model)
    ups = _sorted(updates)
    clipped = [
        ClientUpdate(u.client_id, g + clip_difference(u.model - g, spec.clip_threshold), u.num_samples)
        for u in ups
    ]
    model = _weighted_step(g, clipped, spec.eta)
    if spec.noise_sigma > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        model = model + rng.normal(0.0, spec.noise_sigma, size=model.shape)
    return AggregationResult(model, [u.client_id for u in ups])


def aggregate(global_model, updates, spec: DefenseSpec, history: dict | None = None, rng=None) -> AggregationResult:
    kind = spec.kind
    if kind == FEDAVG:
        return fedavg(global_model, updates, spec.eta)
    if kind == MULTI_METRICS:
        return multi_metrics(global_model, updates, spec)
    if kind == MULTI_METRICS_MAXNORM:
        return multi_metrics_maxnorm(global_model, updates, spec)
    if kind == MULTI_METRICS_MEAN:
        return multi_metrics_mean(global_model, updates, spec)
    if kind == KRUM:
        return krum(global_model, updates, spec)
    if kind == MULTI_KRUM:
        return multi_krum(global_model, updates, spec)
    if kind == RFA:
        return rfa(global_model, updates, spec)
    if kind == FOOLSGOLD:
        return foolsgold(global_model, updates, spec, history if history is not None else {})
    if kind == WEAK_DP:
        return weak_dp(global_model, updates, spec, rng)
    raise ValueError(f"unknown defense kind {kind!r}")
