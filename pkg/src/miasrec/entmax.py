"""Alpha-entmax: sparse probability mappings with an analytic backward pass.

For ``alpha > 1`` the mapping is ``p_j = [(alpha - 1) z_j - tau]_+ ** (1 / (alpha - 1))``
where the threshold ``tau`` is found by bisection so that ``p`` sums to one.
``alpha == 1`` is softmax and ``alpha == 2`` is sparsemax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch.autograd import Function

N_ITER = 60
TOL = 1e-9


def _bisect_threshold(z: torch.Tensor, alpha: float, dim: int, n_iter: int, tol: float) -> torch.Tensor:
    scaled = (alpha - 1.0) * z
    hi = scaled.max(dim=dim, keepdim=True).values
    lo = hi - 1.0
    exponent = 1.0 / (alpha - 1.0)

    for _ in range(n_iter):
        tau = (lo + hi) / 2
        p = torch.clamp(scaled - tau, min=0) ** exponent
        total = p.sum(dim=dim, keepdim=True)
        too_low = total >= 1
        lo = torch.where(too_low, tau, lo)
        hi = torch.where(too_low, hi, tau)
        if float((total - 1).abs().max()) <= tol:
            break

    p = torch.clamp(scaled - tau, min=0) ** exponent
    return p / p.sum(dim=dim, keepdim=True)


def _entmax_backward(p: torch.Tensor, upstream: torch.Tensor, alpha: float, dim: int) -> torch.Tensor:
    s = torch.where(p > 0, p ** (2.0 - alpha), torch.zeros_like(p))
    grad = s * upstream
    q = grad.sum(dim=dim, keepdim=True) / s.sum(dim=dim, keepdim=True)
    return grad - q * s


class EntmaxBisectFunction(Function):
    @staticmethod
    def forward(ctx, z, alpha, dim, n_iter, tol):
        p = _bisect_threshold(z, alpha, dim, n_iter, tol)
        ctx.alpha = alpha
        ctx.dim = dim
        ctx.save_for_backward(p)
        return p

    @staticmethod
    def backward(ctx, grad_output):
        (p,) = ctx.saved_tensors
        return _entmax_backward(p, grad_output, ctx.alpha, ctx.dim), None, None, None, None


def entmax_bisect(
    z: torch.Tensor, alpha: float = 1.5, dim: int = -1, n_iter: int = N_ITER, tol: float = TOL
) -> torch.Tensor:
    """Differentiable alpha-entmax along ``dim``.

    Entries equal to ``-inf`` are treated as masked out and always receive zero
    probability, provided at least one entry along ``dim`` is finite.
    """
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    if alpha == 1:
        return torch.softmax(z, dim=dim)
    return EntmaxBisectFunction.apply(z, float(alpha), dim, n_iter, tol)


@dataclass(frozen=True)
class SparseDistribution:
    """Output of :func:`entmax` for a single score vector."""

    probabilities: np.ndarray
    alpha: float

    @property
    def support(self) -> frozenset[int]:
        return frozenset(np.flatnonzero(self.probabilities > 0).tolist())

    def __len__(self) -> int:
        return len(self.probabilities)


def _as_scores(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1 or z.size == 0:
        raise ValueError("score vector must be one-dimensional and non-empty")
    if not np.all(np.isfinite(z)):
        raise ValueError("score vector contains non-finite values")
    return z


def entmax(z, alpha: float = 1.5) -> SparseDistribution:
    """alpha-entmax of a single score vector, in double precision."""
    z = _as_scores(z)
    if alpha < 1:
        raise ValueError(f"alpha must be >= 1, got {alpha}")
    p = entmax_bisect(torch.from_numpy(z), alpha=alpha).numpy()
    return SparseDistribution(probabilities=p, alpha=float(alpha))


def entmax_grad(p: SparseDistribution, upstream) -> np.ndarray:
    """Vector-Jacobian product of entmax at ``p``: gradient w.r.t. the scores.

    With ``s = p ** (2 - alpha)`` on the support and zero elsewhere this is
    ``s * u - s * <s, u> / sum(s)``. For ``alpha == 1`` it reduces to the
    softmax product ``p * u - p * <p, u>``.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    probs = torch.from_numpy(np.asarray(p.probabilities, dtype=np.float64))
    if upstream.shape != probs.shape:
        raise ValueError(f"upstream shape {upstream.shape} does not match distribution shape {tuple(probs.shape)}")
    return _entmax_backward(probs, torch.from_numpy(upstream), p.alpha, dim=-1).numpy()


def simplex_projection_oracle(z) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort-based, exact)."""
    z = np.asarray(z, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("score vector contains non-finite values")
    u = np.sort(z)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, len(z) + 1)
    rho = ind[u - css / ind > 0][-1]
    theta = css[rho - 1] / rho
    return np.maximum(z - theta, 0.0)
