"""Convergence claims for the two rules, checked against independent oracles.

The competitive rule should park its weight vectors on cluster centroids;
the cumulative-reconstruction rule should align its rows with covariance
eigenvectors. Oracles come from the data generators (true centroids) and
from a direct eigendecomposition of the empirical covariance, never from the
training path itself.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np

from .data import CovarianceSpec, GaussianClustersSpec, gen_synthetic
from .rules import HebbianConfig, train_dense


@dataclass
class ClaimResult:
    name: str
    per_seed: list           # one scalar per seed (error or worst cosine)
    passed_seeds: int
    required_seeds: int
    passed: bool


def matched_centroid_error(weights: np.ndarray, centroids: np.ndarray) -> float:
    """Max row-to-centroid L2 distance under the best bipartite matching."""
    k = centroids.shape[0]
    best = np.inf
    for perm in permutations(range(k)):
        err = max(
            float(np.linalg.norm(
                weights[j].astype(np.float64)
                - centroids[perm[j]].astype(np.float64)
            ))
            for j in range(k)
        )
        best = min(best, err)
    return best


def empirical_eigvecs(samples: np.ndarray) -> np.ndarray:
    """Eigenvectors of the empirical second-moment matrix, descending."""
    x = samples.astype(np.float64)
    cov = x.T @ x / len(x)
    _, vecs = np.linalg.eigh(cov)
    return vecs[:, ::-1]


def swta_centroid_claim(seeds: int = 5, required: int = 4,
                        base_seed: int = 100) -> ClaimResult:
    """Soft-competition training recovers well-separated cluster centroids.

    Three units on three 2-d Gaussian clusters at 10-sigma separation; the
    matched centroid error must be at most half a sigma for most seeds.
    """
    sigma = 1.0
    errors = []
    for i in range(seeds):
        spec = GaussianClustersSpec(k=3, dim=2, separation=10.0 * sigma,
                                    sigma=sigma, count=600,
                                    seed=base_seed + i)
        data = gen_synthetic(spec)
        x = data.samples
        scale = float(np.sqrt((x.astype(np.float64) ** 2).sum(axis=1).mean()))
        cfg = HebbianConfig(rule="swta", eta=0.05, temperature=0.05 * scale)
        w = train_dense(x, 3, cfg, epochs=40, seed=i, batch_size=32)
        errors.append(matched_centroid_error(w, data.centroids))
    passed = sum(e <= 0.5 * sigma for e in errors)
    return ClaimResult(
        name="swta-cluster-centroids",
        per_seed=errors,
        passed_seeds=passed,
        required_seeds=required,
        passed=passed >= required,
    )


def hpca_eigenvector_claim(seeds: int = 5, required: int = 4,
                           base_seed: int = 300) -> ClaimResult:
    """Cumulative-reconstruction training aligns rows with eigenvectors.

    Three units trained 200 epochs on 10,000 zero-mean 8-d samples with a
    geometrically decaying spectrum; each trained row must reach |cos| >= .99
    against the matching eigenvector of the empirical covariance.
    """
    spectrum = (8.0, 4.0, 2.0, 1.0, 0.5, 0.25, 0.125, 0.0625)
    worst_cosines = []
    for i in range(seeds):
        spec = CovarianceSpec(dim=8, spectrum=spectrum, count=10000,
                              seed=base_seed + i)
        data = gen_synthetic(spec)
        cfg = HebbianConfig(rule="hpca", eta=0.05)
        w = train_dense(data.samples, 3, cfg, epochs=200, seed=i)
        vecs = empirical_eigvecs(data.samples)
        cosines = [
            abs(float(np.dot(
                w[j].astype(np.float64) / np.linalg.norm(w[j]), vecs[:, j]
            )))
            for j in range(3)
        ]
        worst_cosines.append(min(cosines))
    passed = sum(c >= 0.99 for c in worst_cosines)
    return ClaimResult(
        name="hpca-covariance-eigenvectors",
        per_seed=worst_cosines,
        passed_seeds=passed,
        required_seeds=required,
        passed=passed >= required,
    )


def run_all_claims(seeds: int = 5) -> list:
    return [swta_centroid_claim(seeds=seeds), hpca_eigenvector_claim(seeds=seeds)]
