"""Electrode graph from absolute Pearson correlation, plus its Laplacians."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import SignalDataset

__all__ = [
    "CorrelationGraph",
    "LaplacianSet",
    "pcc_matrix",
    "build_graph",
    "laplacians",
    "estimate_lambda_max",
    "graph_fingerprint",
]

LAMBDA_MAX_FALLBACK = 2.0


@dataclass(frozen=True)
class CorrelationGraph:
    pcc: np.ndarray
    adjacency: np.ndarray
    degrees: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def abs_pcc(self) -> np.ndarray:
        return np.abs(self.pcc)


@dataclass(frozen=True)
class LaplacianSet:
    combinatorial: np.ndarray
    normalized: np.ndarray
    lambda_max: float
    scaled: np.ndarray


def pcc_matrix(values) -> np.ndarray:
    """Pearson correlation between channels over all rows of ``values``.

    Constant channels get a zero row/column with 1 on the diagonal.
    """
    if isinstance(values, SignalDataset):
        values = values.values
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 samples to correlate channels")
    centred = x - x.mean(axis=0)
    cov = centred.T @ centred
    std = np.sqrt(np.diag(cov))
    live = std > 0
    inv = np.zeros_like(std)
    inv[live] = 1.0 / std[live]
    pcc = cov * inv[:, None] * inv[None, :]
    pcc = np.clip(0.5 * (pcc + pcc.T), -1.0, 1.0)
    np.fill_diagonal(pcc, 1.0)
    return pcc


def build_graph(dataset, indices=None) -> CorrelationGraph:
    """Adjacency ``|P| - I`` (clamped at 0) and node degrees.

    ``indices`` restricts the correlation to a subset of samples, e.g. the
    training split, when test data must not leak into the graph.
    """
    values = dataset.values if isinstance(dataset, SignalDataset) else np.asarray(dataset)
    if indices is not None:
        values = values[np.asarray(indices)]
    pcc = pcc_matrix(values)
    adjacency = np.maximum(np.abs(pcc) - np.eye(pcc.shape[0]), 0.0)
    np.fill_diagonal(adjacency, 0.0)
    return CorrelationGraph(pcc=pcc, adjacency=adjacency, degrees=adjacency.sum(axis=1))


def estimate_lambda_max(laplacian, tol: float = 1e-6, max_iter: int = 1000) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration.

    Returns 2.0 (the normalized-Laplacian bound) when the iteration does not
    converge or the estimate is numerically zero.
    """
    mat = laplacian if sp.issparse(laplacian) else np.asarray(laplacian, dtype=np.float64)
    n = mat.shape[0]
    if n == 0:
        return LAMBDA_MAX_FALLBACK
    # deterministic start vector with a component along every eigenvector in practice
    v = np.random.default_rng(0).uniform(0.5, 1.5, size=n)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(max_iter):
        w = mat @ v
        norm = np.linalg.norm(w)
        if norm < 1e-300:
            return LAMBDA_MAX_FALLBACK
        new_lam = float(v @ w)
        v = w / norm
        if abs(new_lam - lam) <= tol * abs(new_lam):
            lam = new_lam
            break
        lam = new_lam
    else:
        return LAMBDA_MAX_FALLBACK
    if lam < 1e-12:
        return LAMBDA_MAX_FALLBACK
    return lam


def laplacians(graph) -> LaplacianSet:
    """Combinatorial, normalized and scaled Laplacians of a weighted graph.

    Accepts a :class:`CorrelationGraph` or a bare adjacency matrix. Isolated
    nodes get ``D^{-1/2} = 0``, which leaves an identity row in the
    normalized Laplacian. Only the normalized form is scaled, since its
    spectrum is bounded by 2.
    """
    adjacency = graph.adjacency if isinstance(graph, CorrelationGraph) else np.asarray(graph, dtype=np.float64)
    n = adjacency.shape[0]
    degrees = adjacency.sum(axis=1)
    combinatorial = np.diag(degrees) - adjacency
    d_inv_sqrt = np.zeros(n)
    nz = degrees > 0
    d_inv_sqrt[nz] = 1.0 / np.sqrt(degrees[nz])
    normalized = np.eye(n) - d_inv_sqrt[:, None] * adjacency * d_inv_sqrt[None, :]
    normalized = 0.5 * (normalized + normalized.T)
    # an edgeless graph has no spectrum to estimate; use the theoretical bound
    lam = estimate_lambda_max(normalized) if nz.any() else LAMBDA_MAX_FALLBACK
    scaled = 2.0 * normalized / lam - np.eye(n)
    return LaplacianSet(combinatorial, normalized, lam, scaled)


def graph_fingerprint(adjacency: np.ndarray) -> int:
    """64-bit hash of the adjacency's little-endian float64 bytes."""
    data = np.ascontiguousarray(adjacency, dtype="<f8").tobytes()
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")
