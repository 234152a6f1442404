"""Accuracy summaries and embedding compactness metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate, special


@dataclass
class EvalReport:
    mean_top1: float
    ci95: float
    episode_count: int
    accuracies: list[float] = field(repr=False, default_factory=list)
    config_hash: str = ""
    episode_hashes: list[str] = field(repr=False, default_factory=list)

    def cell(self) -> str:
        return f"{self.mean_top1:.2f}±{self.ci95:.2f}"


def summarize(accuracies, config_hash: str = "", episode_hashes=()) -> EvalReport:
    """Mean top-1 and 95% interval half-width, both in percent."""
    acc = np.asarray(accuracies, dtype=np.float64) * 100.0
    if acc.size < 2:
        raise ValueError("need at least 2 episodes for a confidence interval")
    ci = 1.96 * acc.std() / math.sqrt(acc.size)
    return EvalReport(float(acc.mean()), float(ci), int(acc.size), acc.tolist(), config_hash,
                      list(episode_hashes))


@dataclass
class CompactnessReport:
    R_intra_mean: float
    R_inter_mean: float
    rho_proxy: float
    embedding_path: str | None = None


def expected_nn_distance_sphere(n: int, d: int) -> float:
    """Expected nearest-neighbour chord distance among ``n`` uniform points on S^{d-1}."""
    return _expected_nn(int(n), int(d))


@lru_cache(maxsize=256)
def _expected_nn(n: int, d: int) -> float:
    if n < 2 or d < 2:
        raise ValueError("need n >= 2 points on a sphere of dimension >= 2")
    a = (d - 1) / 2.0

    def cap(r):
        # fraction of the sphere within chord distance r of a point
        theta = 2.0 * math.asin(min(r / 2.0, 1.0))
        s2 = math.sin(theta) ** 2
        half = 0.5 * special.betainc(a, 0.5, s2)
        return half if theta <= math.pi / 2 else 1.0 - half

    def survival(r):
        return (1.0 - cap(r)) ** (n - 1)

    val, _ = integrate.quad(survival, 0.0, 2.0, limit=200, points=[math.sqrt(2.0)])
    return float(val)


def compactness_metrics(embeddings, labels) -> CompactnessReport:
    """Intra-class spread, nearest-centroid separation and a space-utilisation proxy.

    ``R_intra_mean``: mean squared distance of points to their class centroid.
    ``R_inter_mean``: mean over classes of the squared distance to the nearest
    other centroid.  ``rho_proxy``: mean nearest-neighbour distance of the
    L2-normalised embeddings divided by its expectation for the same number of
    uniform points on the unit sphere.
    """
    X = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("compactness metrics need at least 2 classes")
    counts = np.array([(y == c).sum() for c in classes])
    if counts.min() < 2:
        raise ValueError("compactness metrics need at least 2 points per class")
    centroids = np.stack([X[y == c].mean(axis=0) for c in classes])
    idx = np.searchsorted(classes, y)
    r_intra = float(((X - centroids[idx]) ** 2).sum(axis=1).mean())
    cd = ((centroids[:, None] - centroids[None]) ** 2).sum(axis=2)
    np.fill_diagonal(cd, np.inf)
    r_inter = float(cd.min(axis=1).mean())

    norms = np.linalg.norm(X, axis=1, keepdims=True)
    Z = X / np.where(norms == 0, 1.0, norms)
    pd = np.sqrt(np.maximum(((Z[:, None] - Z[None]) ** 2).sum(axis=2), 0.0))
    np.fill_diagonal(pd, np.inf)
    nn = float(pd.min(axis=1).mean())
    rho = nn / expected_nn_distance_sphere(len(Z), max(2, Z.shape[1]))
    return CompactnessReport(r_intra, r_inter, rho)
