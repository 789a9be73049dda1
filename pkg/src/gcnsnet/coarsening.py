"""Graclus multilevel coarsening and the binary-tree node layout.

After coarsening, nodes are laid out so that the two children of coarse node
``i`` sit at fine positions ``2i`` and ``2i + 1``. Graph max-pooling then
reduces to 1-D pooling with stride 2. Singletons get a fake sibling; fake
nodes have zero-weight rows and columns and are tracked by a validity mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .graph import CorrelationGraph, LaplacianSet, laplacians

__all__ = [
    "CoarseningPlan",
    "graclus_match",
    "coarsen",
    "max_levels",
    "permute_input",
    "masked_max_pool",
    "masked_max_pool_backward",
]


def max_levels(n_nodes: int) -> int:
    """Pooling levels a graph of ``n_nodes`` supports, ``floor(log2 N)``."""
    return int(math.floor(math.log2(n_nodes))) if n_nodes >= 1 else 0


def graclus_match(adjacency, degrees=None, rng_seed: int = 0, order=None) -> list[tuple[int, ...]]:
    """One greedy Graclus pass.

    Unmarked nodes are visited in ``order`` (a seeded random permutation by
    default). Each one pairs with the unmarked neighbour maximising the local
    normalized cut ``W_ij * (1/d_i + 1/d_j)``, ties going to the smallest
    index; nodes with no unmarked neighbour stay singletons.
    """
    w = np.asarray(adjacency, dtype=np.float64)
    n = w.shape[0]
    d = w.sum(axis=1) if degrees is None else np.asarray(degrees, dtype=np.float64)
    inv_d = np.zeros(n)
    inv_d[d > 0] = 1.0 / d[d > 0]
    if order is None:
        order = np.random.default_rng(rng_seed).permutation(n)
    marked = np.zeros(n, dtype=bool)
    clusters = []
    for i in order:
        i = int(i)
        if marked[i]:
            continue
        marked[i] = True
        candidates = (w[i] > 0) & ~marked
        if not candidates.any():
            clusters.append((i,))
            continue
        score = np.where(candidates, w[i] * (inv_d[i] + inv_d), -np.inf)
        j = int(np.argmax(score))
        marked[j] = True
        clusters.append((i, j))
    return clusters


@dataclass(frozen=True)
class CoarseningPlan:
    """Coarsening hierarchy; index 0 is the finest (padded) level.

    ``node_at[l][p]`` is the level-``l`` coarse node stored at padded
    position ``p``, or -1 for a fake node.
    """

    levels: int
    seed: int
    n_nodes: int
    graphs: list[np.ndarray]
    laplacian_sets: list[LaplacianSet]
    perm: np.ndarray
    valid_mask: list[np.ndarray]
    node_at: list[np.ndarray]
    coarse_adjacency: list[np.ndarray] = field(repr=False)
    collapsed_weight: list[float] = field(repr=False)
    operators: list = field(repr=False, default_factory=list)

    @property
    def sizes(self) -> list[int]:
        return [g.shape[0] for g in self.graphs]

    @property
    def fake_counts(self) -> list[int]:
        return [int((~m).sum()) for m in self.valid_mask]


def _scaled_operator(scaled: np.ndarray):
    # sparse storage pays off only for sparse padded graphs
    density = np.count_nonzero(scaled) / max(scaled.size, 1)
    return sp.csr_matrix(scaled) if density < 0.5 else scaled


def coarsen(graph, levels: int, seed: int = 0) -> CoarseningPlan:
    """Coarsen ``levels`` times and derive the padded per-level graphs.

    Coarse edge weights are sums of the fine weights crossing two clusters;
    the weight internal to a cluster is dropped and recorded in
    ``collapsed_weight`` so total weight is accounted for exactly.
    Level ``l`` uses the visit order drawn from ``default_rng([seed, l])``.
    """
    adjacency = graph.adjacency if isinstance(graph, CorrelationGraph) else np.asarray(graph, dtype=np.float64)
    n = adjacency.shape[0]
    if not 0 <= levels <= max_levels(n) + 1:
        raise ValueError(f"levels={levels} outside [0, {max_levels(n) + 1}] for {n} nodes")

    weights = [adjacency]
    children: list[list[tuple[int, ...]]] = []
    collapsed = []
    for lvl in range(levels):
        w = weights[-1]
        order = np.random.default_rng([seed, lvl]).permutation(w.shape[0])
        clusters = sorted((tuple(sorted(c)) for c in graclus_match(w, rng_seed=seed, order=order)), key=lambda c: c[0])
        assign = np.zeros((w.shape[0], len(clusters)))
        for cid, members in enumerate(clusters):
            assign[list(members), cid] = 1.0
        coarse = assign.T @ w @ assign
        coarse = 0.5 * (coarse + coarse.T)  # matmul rounding can break exact symmetry
        collapsed.append(float(np.trace(coarse)))
        np.fill_diagonal(coarse, 0.0)
        weights.append(coarse)
        children.append(clusters)

    # top-down layout: coarsest nodes in ascending id order
    node_at = [None] * (levels + 1)
    node_at[levels] = np.arange(weights[levels].shape[0])
    for lvl in range(levels - 1, -1, -1):
        upper = node_at[lvl + 1]
        lower = np.full(2 * upper.size, -1, dtype=np.int64)
        for pos, cid in enumerate(upper):
            if cid < 0:
                continue
            members = children[lvl][cid]
            lower[2 * pos : 2 * pos + len(members)] = members
        node_at[lvl] = lower

    graphs, lap_sets, masks, ops = [], [], [], []
    for lvl in range(levels + 1):
        at = node_at[lvl]
        valid = at >= 0
        padded = np.zeros((at.size, at.size))
        idx = np.flatnonzero(valid)
        padded[np.ix_(idx, idx)] = weights[lvl][np.ix_(at[idx], at[idx])]
        lap = laplacians(padded)
        graphs.append(padded)
        lap_sets.append(lap)
        masks.append(valid)
        ops.append(_scaled_operator(lap.scaled))

    perm = np.empty(n, dtype=np.int64)
    valid0 = node_at[0] >= 0
    perm[node_at[0][valid0]] = np.flatnonzero(valid0)
    return CoarseningPlan(
        levels=levels,
        seed=seed,
        n_nodes=n,
        graphs=graphs,
        laplacian_sets=lap_sets,
        perm=perm,
        valid_mask=masks,
        node_at=node_at,
        coarse_adjacency=weights,
        collapsed_weight=collapsed,
        operators=ops,
    )


def permute_input(sample, plan: CoarseningPlan) -> np.ndarray:
    """Scatter samples (last axis = original nodes) into the padded layout; fakes get 0."""
    x = np.asarray(sample, dtype=np.float64)
    if x.shape[-1] != plan.n_nodes:
        raise ValueError(f"sample has {x.shape[-1]} entries, plan expects {plan.n_nodes}")
    out = np.zeros(x.shape[:-1] + (plan.sizes[0],))
    out[..., plan.perm] = x
    return out


def masked_max_pool(features, mask, return_choice: bool = False):
    """Stride-2 max over node pairs, ignoring invalid (fake) entries.

    ``features`` has the node axis at -2 (``(..., P, F)``) or is 1-D. A pair
    of two fakes yields 0 and an invalid output. ``choice`` records which
    child won (0 or 1; the first child on ties).
    """
    x = np.asarray(features, dtype=np.float64)
    flat = x.ndim == 1
    if flat:
        x = x[:, None]
    mask = np.asarray(mask, dtype=bool)
    n = x.shape[-2]
    if n % 2:
        raise ValueError(f"pooling needs an even node count, got {n}")
    if mask.shape != (n,):
        raise ValueError(f"mask shape {mask.shape} does not match {n} nodes")
    pairs = x.reshape(x.shape[:-2] + (n // 2, 2, x.shape[-1]))
    pmask = mask.reshape(n // 2, 2)
    first = np.where(pmask[:, 0, None], pairs[..., 0, :], -np.inf)
    second = np.where(pmask[:, 1, None], pairs[..., 1, :], -np.inf)
    choice = (second > first).astype(np.int64)
    out = np.where(choice == 1, second, first)
    out_mask = pmask.any(axis=1)
    out = np.where(out_mask[:, None], out, 0.0)
    if flat:
        out, choice = out[:, 0], choice[:, 0]
    if return_choice:
        return out, out_mask, choice
    return out, out_mask


def masked_max_pool_backward(grad_out, choice, out_mask) -> np.ndarray:
    """Route each output gradient to the winning child; fake pairs get nothing."""
    g = np.asarray(grad_out, dtype=np.float64) * np.asarray(out_mask)[:, None]
    pick = np.asarray(choice)
    grad = np.zeros(g.shape[:-2] + (g.shape[-2], 2, g.shape[-1]))
    grad[..., 0, :] = np.where(pick == 0, g, 0.0)
    grad[..., 1, :] = np.where(pick == 1, g, 0.0)
    return grad.reshape(g.shape[:-2] + (2 * g.shape[-2], g.shape[-1]))
