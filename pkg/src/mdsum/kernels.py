"""RBF kernel tooling: bandwidth selection, random Fourier features, MMD.

The kernel is k(x, y) = exp(-||x - y||^2 / (2 l^2)). Its random Fourier
approximation uses frequencies W with rows drawn i.i.d. from
N(0, (1/l^2) I) and phases b ~ U[0, 2 pi):

    z(x) = sqrt(2 / K) * cos(W x + b)

so that z(x) . z(y) is an unbiased estimate of k(x, y), and the squared
distance between mean embeddings estimates the biased (V-statistic) MMD^2.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist

from .util import as_2d_f64, check_finite, decode_floats, encode_floats

BANDWIDTH_FLOOR = 1e-8


@dataclass
class FeatureMap:
    dim: int
    n_features: int
    bandwidth: float
    frequencies: np.ndarray  # (K, d)
    phases: np.ndarray  # (K,)


@dataclass
class MeanEmbedding:
    values: np.ndarray  # (K,)
    sample_count: int  # 0 marks a model-predicted embedding


def _sample_distinct_pairs(n_rows: int, n_pairs: int, rng: np.random.Generator):
    """n_pairs distinct (i, j) index pairs with i < j, without replacement."""
    total = n_rows * (n_rows - 1) // 2
    if n_pairs > total:
        raise ValueError(f"cannot draw {n_pairs} distinct pairs from {total}")
    seen: set = set()
    # rejection is cheap because n_pairs << total whenever this path is taken
    while len(seen) < n_pairs:
        draw = rng.integers(0, total, size=n_pairs - len(seen))
        seen.update(draw.tolist())
    codes = np.fromiter(seen, dtype=np.int64, count=n_pairs)
    codes.sort()
    # decode pair rank to (i, j), i < j, pairs ordered (0,1),(0,2),...,(1,2),...
    i = np.floor((2 * n_rows - 1 - np.sqrt((2 * n_rows - 1) ** 2 - 8 * codes)) / 2).astype(np.int64)
    # sqrt roundoff can land one row off for large n_rows; nudge back exactly
    def offset(k):
        return k * (2 * n_rows - k - 1) // 2
    i = np.where(offset(i + 1) <= codes, i + 1, i)
    i = np.where(offset(i) > codes, i - 1, i)
    j = codes - offset(i) + i + 1
    return i, j


def median_heuristic(data, max_pairs: int = 1_000_000, rng: np.random.Generator | None = None) -> float:
    """Median pairwise Euclidean distance, floored at BANDWIDTH_FLOOR.

    When the number of distinct pairs exceeds max_pairs, a uniform
    without-replacement subsample of pairs is used; pass rng to control it
    (defaults to a fixed stream so results are reproducible regardless).
    """
    x = as_2d_f64("data", data)
    n = x.shape[0]
    if n < 2:
        raise ValueError(f"median heuristic needs at least 2 rows, got {n}")
    if max_pairs < 1:
        raise ValueError(f"max_pairs must be positive, got {max_pairs}")
    total = n * (n - 1) // 2
    if total <= max_pairs:
        dists = pdist(x, metric="euclidean")
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        i, j = _sample_distinct_pairs(n, max_pairs, rng)
        dists = np.sqrt(np.sum((x[i] - x[j]) ** 2, axis=1))
    med = float(np.median(dists))
    return max(med, BANDWIDTH_FLOOR)


def build_feature_map(dim: int, n_features: int, bandwidth: float,
                      rng: np.random.Generator) -> FeatureMap:
    if dim < 1 or n_features < 1:
        raise ValueError(f"dim and n_features must be positive, got {dim}, {n_features}")
    if not (bandwidth > 0.0 and np.isfinite(bandwidth)):
        raise ValueError(f"bandwidth must be positive and finite, got {bandwidth}")
    freqs = rng.standard_normal((n_features, dim)) / bandwidth
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    return FeatureMap(dim=dim, n_features=n_features, bandwidth=float(bandwidth),
                      frequencies=freqs, phases=phases)


def rff(fm: FeatureMap, x) -> np.ndarray:
    """Feature vector z(x) for a single point, every entry in [-sqrt(2/K), sqrt(2/K)]."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != fm.dim:
        raise ValueError(f"expected vector of length {fm.dim}, got shape {v.shape}")
    return np.sqrt(2.0 / fm.n_features) * np.cos(fm.frequencies @ v + fm.phases)


def rff_matrix(fm: FeatureMap, data) -> np.ndarray:
    """Feature vectors for all rows of a (N, d) dataset, returned as (N, K)."""
    x = as_2d_f64("data", data)
    if x.shape[1] != fm.dim:
        raise ValueError(f"expected rows of length {fm.dim}, got {x.shape[1]}")
    return np.sqrt(2.0 / fm.n_features) * np.cos(x @ fm.frequencies.T + fm.phases)


def mean_embedding(fm: FeatureMap, data) -> MeanEmbedding:
    feats = rff_matrix(fm, data)
    return MeanEmbedding(values=feats.mean(axis=0), sample_count=feats.shape[0])


def mmd2_rff(fm: FeatureMap, emb_a: MeanEmbedding, emb_b: MeanEmbedding) -> float:
    """Squared distance between mean embeddings; the RFF estimate of MMD^2."""
    a, b = emb_a.values, emb_b.values
    if a.shape != (fm.n_features,) or b.shape != (fm.n_features,):
        raise ValueError("embedding length does not match the feature map")
    d = a - b
    return float(d @ d)


def mmd2_exact(bandwidth: float, xs, ys) -> float:
    """Biased (V-statistic) MMD^2 under the exact RBF kernel.

    Always >= -1e-12 up to roundoff and exactly symmetric in its arguments.
    """
    if not (bandwidth > 0.0 and np.isfinite(bandwidth)):
        raise ValueError(f"bandwidth must be positive and finite, got {bandwidth}")
    x = as_2d_f64("xs", xs)
    y = as_2d_f64("ys", ys)
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    check_finite("xs", x)
    check_finite("ys", y)
    gamma = 1.0 / (2.0 * bandwidth * bandwidth)
    kxx = np.exp(-gamma * cdist(x, x, metric="sqeuclidean")).mean()
    kyy = np.exp(-gamma * cdist(y, y, metric="sqeuclidean")).mean()
    kxy = np.exp(-gamma * cdist(x, y, metric="sqeuclidean")).mean()
    return float(kxx + kyy - 2.0 * kxy)


def feature_map_to_payload(fm: FeatureMap) -> dict:
    return {
        "kind": "feature_map",
        "dim": fm.dim,
        "n_features": fm.n_features,
        "bandwidth": encode_floats(np.array([fm.bandwidth])),
        "frequencies": encode_floats(fm.frequencies),
        "phases": encode_floats(fm.phases),
    }


def feature_map_from_payload(payload: dict) -> FeatureMap:
    if payload.get("kind") != "feature_map":
        raise ValueError(f"not a feature map payload: kind={payload.get('kind')!r}")
    return FeatureMap(
        dim=int(payload["dim"]),
        n_features=int(payload["n_features"]),
        bandwidth=float(decode_floats(payload["bandwidth"])[0]),
        frequencies=decode_floats(payload["frequencies"]),
        phases=decode_floats(payload["phases"]),
    )


def feature_map_save(fm: FeatureMap, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(feature_map_to_payload(fm), fh)


def feature_map_load(path) -> FeatureMap:
    with open(path, "r", encoding="utf-8") as fh:
        return feature_map_from_payload(json.load(fh))
