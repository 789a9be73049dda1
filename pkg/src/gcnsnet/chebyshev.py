"""Chebyshev spectral graph convolution and its exact gradients.

Signals keep the node axis at -2, so a single sample is ``(N, F)`` and a
batch is ``(B, N, F)``. The scaled Laplacian may be a dense array or a
scipy sparse matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

__all__ = [
    "ChebConvParams",
    "lap_apply",
    "cheb_basis",
    "cheb_conv_forward",
    "cheb_conv_backward",
    "cheb_sum",
]


@dataclass
class ChebConvParams:
    theta: np.ndarray  # (F_in, F_out, K)
    bias: np.ndarray  # (N, F_out)

    def __post_init__(self):
        if self.theta.ndim != 3:
            raise ValueError(f"theta must be F_in x F_out x K, got shape {self.theta.shape}")
        if self.bias.ndim != 2 or self.bias.shape[1] != self.theta.shape[1]:
            raise ValueError(f"bias shape {self.bias.shape} does not fit theta {self.theta.shape}")

    @property
    def order(self) -> int:
        return self.theta.shape[2]


def lap_apply(lap, x: np.ndarray) -> np.ndarray:
    """``lap @ x`` along the node axis (-2) of ``x``."""
    if not sp.issparse(lap):
        return np.matmul(lap, x)
    n = x.shape[-2]
    moved = np.moveaxis(x, -2, 0)
    out = lap @ moved.reshape(n, -1)
    return np.moveaxis(out.reshape(moved.shape), 0, -2)


def cheb_basis(scaled_laplacian, x, order: int) -> list[np.ndarray]:
    """Terms ``T_k(L) x`` for k < order via the three-term recursion."""
    if order < 1:
        raise ValueError(f"polynomial order must be >= 1, got {order}")
    x = np.asarray(x, dtype=np.float64)
    terms = [x]
    if order > 1:
        terms.append(lap_apply(scaled_laplacian, x))
    for _ in range(2, order):
        terms.append(2.0 * lap_apply(scaled_laplacian, terms[-1]) - terms[-2])
    return terms


def cheb_conv_forward(params: ChebConvParams, basis: list[np.ndarray]) -> np.ndarray:
    """``out[n, o] = sum_{i,k} theta[i, o, k] * basis[k][n, i] + bias[n, o]``."""
    f_in, f_out, order = params.theta.shape
    if len(basis) != order or basis[0].shape[-1] != f_in:
        raise ValueError(
            f"basis of {len(basis)} terms x {basis[0].shape[-1]} features does not fit theta {params.theta.shape}"
        )
    if basis[0].shape[-2] != params.bias.shape[0]:
        raise ValueError(f"signal has {basis[0].shape[-2]} nodes, bias has {params.bias.shape[0]}")
    stacked = np.stack(basis, axis=-1)  # (..., N, F_in, K)
    lead = stacked.shape[:-2]
    w = params.theta.transpose(0, 2, 1).reshape(f_in * order, f_out)
    out = stacked.reshape(-1, f_in * order) @ w
    return out.reshape(lead + (f_out,)) + params.bias


def cheb_sum(scaled_laplacian, coeffs: list[np.ndarray]) -> np.ndarray:
    """``sum_k T_k(L) coeffs[k]`` by Clenshaw's backward recursion."""
    if len(coeffs) == 1:
        return coeffs[0].copy()
    b1 = np.zeros_like(coeffs[0])
    b2 = np.zeros_like(coeffs[0])
    for c in reversed(coeffs[1:]):
        b1, b2 = c + 2.0 * lap_apply(scaled_laplacian, b1) - b2, b1
    return coeffs[0] + lap_apply(scaled_laplacian, b1) - b2


def cheb_conv_backward(params: ChebConvParams, basis, upstream, scaled_laplacian=None):
    """Gradients ``(grad_theta, grad_bias, grad_x)`` of the forward map.

    Batched inputs sum ``grad_theta`` and ``grad_bias`` over the batch.
    ``grad_x`` needs the Laplacian; it is ``None`` when none is given.
    Since the Laplacian is symmetric, each ``T_k(L)`` is self-adjoint and the
    input gradient is ``sum_k T_k(L) (upstream @ theta_k^T)``.
    """
    f_in, f_out, order = params.theta.shape
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape[-1] != f_out or g.shape[-2] != params.bias.shape[0]:
        raise ValueError(f"upstream shape {g.shape} does not match the layer output")
    stacked = np.stack(basis, axis=-1)
    x2 = stacked.reshape(-1, f_in * order)
    g2 = g.reshape(-1, f_out)
    grad_theta = (x2.T @ g2).reshape(f_in, order, f_out).transpose(0, 2, 1)
    grad_bias = g.reshape((-1,) + params.bias.shape).sum(axis=0)
    grad_x = None
    if scaled_laplacian is not None:
        coeffs = [g @ params.theta[:, :, k].T for k in range(order)]
        grad_x = cheb_sum(scaled_laplacian, coeffs)
    return np.ascontiguousarray(grad_theta), grad_bias, grad_x
