"""Score combination, log-domain Sinkhorn normalization and exact assignment."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError
from .geometry import PermutationMatrix

log = logging.getLogger(__name__)

DEFAULT_SINKHORN_ITERATIONS = 100


@dataclass(frozen=True)
class SoftAssignment:
    """Doubly stochastic matrix kept in log space, shape ``(..., N, N)``."""

    log_p: Tensor

    @property
    def n(self) -> int:
        return self.log_p.shape[-1]

    @property
    def p(self) -> np.ndarray:
        return np.exp(self.log_p.data)


def combine_scores(s_clock, s_count) -> Tensor:
    """``S = S_clock + S_count^T`` over the last two axes."""
    s_clock, s_count = ad.as_tensor(s_clock), ad.as_tensor(s_count)
    if s_clock.shape != s_count.shape or s_clock.ndim < 2 or s_clock.shape[-1] != s_clock.shape[-2]:
        raise ContractError(f"score shapes differ or are not square: {s_clock.shape} vs {s_count.shape}")
    return s_clock + ad.swapaxes(s_count, -1, -2)


def _lse(z: np.ndarray, axis: int) -> np.ndarray:
    m = z.max(axis=axis, keepdims=True)
    return np.log(np.exp(z - m).sum(axis=axis, keepdims=True)) + m


def sinkhorn(scores, iterations: int = DEFAULT_SINKHORN_ITERATIONS) -> SoftAssignment:
    """Alternate row and column normalization of ``exp(scores)`` in log space.

    Each iteration normalizes rows then columns, so the columns of the result
    sum to one exactly and the rows to within the convergence error. The
    backward pass runs through every iteration.
    """
    s = ad.as_tensor(scores)
    if iterations < 1:
        raise ContractError("iterations must be >= 1")
    if s.ndim < 2 or s.shape[-1] != s.shape[-2]:
        raise ContractError(f"scores must be square over the last two axes, got {s.shape}")
    if not np.all(np.isfinite(s.data)):
        raise ContractError("scores contain non-finite values")
    z = s.data
    steps = []
    for _ in range(iterations):
        z = z - _lse(z, -1)
        steps.append((-1, z))
        z = z - _lse(z, -2)
        steps.append((-2, z))

    def backward(g):
        for axis, out in reversed(steps):
            g = g - np.exp(out) * g.sum(axis=axis, keepdims=True)
        return (g,)

    return SoftAssignment(ad.custom_op(z, (s,), backward, "sinkhorn"))


def hungarian(scores) -> PermutationMatrix:
    """Permutation maximizing ``sum_i scores[i, sigma(i)]``.

    Shortest augmenting path with dual potentials, O(N^3). Among equally good
    augmenting columns the lowest index wins, so results are deterministic.
    """
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if s.ndim != 2 or s.shape[0] != s.shape[1]:
        raise ContractError(f"hungarian needs a square matrix, got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ContractError("scores contain non-finite values")
    n = s.shape[0]
    if n == 0:
        return PermutationMatrix(np.zeros(0, dtype=np.int64))
    cost = -s
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    nxt = np.empty(n, dtype=np.int64)
    nxt[p[1:] - 1] = np.arange(n)
    return PermutationMatrix(nxt)


class Hardened(NamedTuple):
    next_index: np.ndarray
    bijective: bool

    @property
    def perm(self) -> PermutationMatrix | None:
        return PermutationMatrix(self.next_index) if self.bijective else None


def harden(assignment: SoftAssignment | np.ndarray) -> Hardened:
    """Row-wise argmax. Not guaranteed to be a permutation; check ``bijective``."""
    p = assignment.p if isinstance(assignment, SoftAssignment) else np.asarray(assignment)
    idx = np.argmax(p, axis=-1)
    bijective = np.unique(idx).size == idx.size
    if not bijective:
        log.warning("row-argmax of the soft assignment is not a bijection; use hungarian()")
    return Hardened(idx, bool(bijective))
