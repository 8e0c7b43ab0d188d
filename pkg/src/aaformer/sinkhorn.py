"""Balanced entropic transport of patches onto part prototypes, plus hard rounding.

All routines accept arrays with arbitrary leading batch axes; the last two
axes are (parts P, patches N). Plans and masks are plain numpy arrays: the
assignment is a constant as far as differentiation is concerned.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class TransportInputError(ValueError):
    pass


class DegenerateSimilarityError(FloatingPointError):
    pass


@dataclass
class TransportPlan:
    values: np.ndarray
    residual: np.ndarray
    iterations: int

    @property
    def num_parts(self) -> int:
        return self.values.shape[-2]

    @property
    def num_patches(self) -> int:
        return self.values.shape[-1]

    @property
    def row_target(self) -> float:
        return 1.0 / self.num_parts

    @property
    def col_target(self) -> float:
        return 1.0 / self.num_patches


@dataclass
class AssignmentMask:
    """``part_of[..., n]`` is the part index (within one granularity set) owning patch n."""

    part_of: np.ndarray
    num_parts: int
    repairs: list[tuple[int, ...]] = field(default_factory=list)

    def membership(self) -> np.ndarray:
        """Boolean [..., num_parts, N]: True where patch n belongs to part p."""
        return self.part_of[..., None, :] == np.arange(self.num_parts)[:, None]

    def counts(self) -> np.ndarray:
        return self.membership().sum(axis=-1)

    def largest_share(self) -> np.ndarray:
        """Fraction of patches held by the biggest cluster, per assignment."""
        return self.counts().max(axis=-1) / self.part_of.shape[-1]


def _as_array(sim) -> np.ndarray:
    return np.asarray(sim.data if isinstance(sim, Tensor) else sim, dtype=np.float64)


def _logsumexp(x: np.ndarray, axis: int) -> np.ndarray:
    m = x.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.exp(x - m).sum(axis=axis))


def marginal_residual(values: np.ndarray) -> np.ndarray:
    P, N = values.shape[-2:]
    rows = np.abs(values.sum(axis=-1) - 1.0 / P).max(axis=-1)
    cols = np.abs(values.sum(axis=-2) - 1.0 / N).max(axis=-1)
    return np.maximum(rows, cols)


def entropic_transport(sim, epsilon: float = 0.05, iters: int = 3, tol: float | None = None) -> TransportPlan:
    """Scale exp(sim / epsilon) towards row sums 1/P and column sums 1/N.

    Each round rescales rows, then columns. The iteration runs in the log
    domain (max-subtracted log-sum-exp), which yields the same
    Diag(u) exp(sim/eps) Diag(v) iterates without under/overflow.

    With ``tol`` set the loop stops early once the marginal residual of every
    plan in the batch drops below it; ``iters`` is then an upper bound.
    """
    s = _as_array(sim)
    if epsilon <= 0:
        raise TransportInputError("epsilon must be positive")
    if iters < 1:
        raise TransportInputError("iters must be >= 1")
    if s.ndim < 2:
        raise TransportInputError(f"similarity must be at least 2-D, got shape {s.shape}")
    P, N = s.shape[-2:]
    if P > N:
        raise TransportInputError(f"need P <= N, got P={P}, N={N}")
    if not np.all(np.isfinite(s)):
        raise TransportInputError("similarity contains non-finite values")

    with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
        log_k = (s - s.max(axis=(-2, -1), keepdims=True)) / epsilon
        log_r = -np.log(P)
        log_c = -np.log(N)
        log_u = np.zeros(s.shape[:-1])
        log_v = np.zeros(s.shape[:-2] + (N,))
        done = 0
        for done in range(1, iters + 1):
            log_u = log_r - _logsumexp(log_k + log_v[..., None, :], axis=-1)
            log_v = log_c - _logsumexp(log_k + log_u[..., :, None], axis=-2)
            if tol is not None:
                plan = np.exp(log_u[..., :, None] + log_k + log_v[..., None, :])
                if np.all(marginal_residual(plan) < tol):
                    break
    if not (np.all(np.isfinite(log_u)) and np.all(np.isfinite(log_v))):
        raise DegenerateSimilarityError("scaling vectors under/overflowed")
    plan = np.exp(log_u[..., :, None] + log_k + log_v[..., None, :])
    if np.any(plan.sum(axis=-1) == 0) or np.any(plan.sum(axis=-2) == 0):
        raise DegenerateSimilarityError("a row or column of the plan underflowed to zero")
    return TransportPlan(values=plan, residual=marginal_residual(plan), iterations=done)


def round_assignment(plan: TransportPlan | np.ndarray, rounding: str = "argmax") -> AssignmentMask:
    """Turn a soft plan into a hard patch -> part map.

    ``argmax``: each patch goes to its highest-mass part, ties to the lowest
    index. ``balanced``: greedy by descending mass with capacity ceil(N/P)
    per part, so no part can take more than its share.
    """
    values = plan.values if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=np.float64)
    if np.isnan(values).any():
        raise TransportInputError("plan contains NaN")
    P = values.shape[-2]
    if rounding == "argmax":
        return AssignmentMask(np.argmax(values, axis=-2), P)
    if rounding == "balanced":
        return AssignmentMask(_balanced_round(values), P)
    raise ValueError(f"unknown rounding {rounding!r}")


def _balanced_round(values: np.ndarray) -> np.ndarray:
    P, N = values.shape[-2:]
    flat = values.reshape(-1, P, N)
    out = np.empty((flat.shape[0], N), dtype=np.int64)
    cap = -(-N // P)
    for b, mat in enumerate(flat):
        order = np.argsort(-mat.ravel(), kind="stable")
        part_of = np.full(N, -1)
        load = np.zeros(P, dtype=np.int64)
        left = N
        for k in order:
            p, n = divmod(int(k), N)
            if part_of[n] >= 0 or load[p] >= cap:
                continue
            part_of[n] = p
            load[p] += 1
            left -= 1
            if left == 0:
                break
        out[b] = part_of
    return out.reshape(values.shape[:-2] + (N,))


def nearest_neighbor_assignment(sim) -> AssignmentMask:
    """Each patch to its most similar part; no balance constraint (may collapse)."""
    s = _as_array(sim)
    if not np.all(np.isfinite(s)):
        raise TransportInputError("similarity contains non-finite values")
    return AssignmentMask(np.argmax(s, axis=-2), s.shape[-2])


def stripe_assignment(num_parts: int, num_patches: int, batch_shape: tuple[int, ...] = ()) -> AssignmentMask:
    """Fixed horizontal bands: row-major patch n goes to part floor(n * P / N)."""
    part_of = (np.arange(num_patches) * num_parts) // num_patches
    return AssignmentMask(np.broadcast_to(part_of, batch_shape + (num_patches,)).copy(), num_parts)


def repair_empty(mask: AssignmentMask, mass: np.ndarray) -> AssignmentMask:
    """Give every empty part the patch it holds most mass on.

    Only patches whose current owner keeps at least one other patch are
    eligible, so a repair never empties another part. Repairs are logged as
    (leading index..., part) tuples.
    """
    P = mask.num_parts
    N = mask.part_of.shape[-1]
    if P > N:
        raise TransportInputError(f"cannot give {P} parts a patch each from {N} patches")
    counts = mask.counts()
    if counts.min() > 0:
        return mask
    part_of = mask.part_of.copy()
    lead = part_of.shape[:-1]
    flat_part = part_of.reshape(-1, N)
    flat_mass = np.broadcast_to(mass, lead + (P, N)).reshape(-1, P, N)
    flat_counts = counts.reshape(-1, P)
    repairs = list(mask.repairs)
    for b in np.flatnonzero((flat_counts == 0).any(axis=-1)):
        load = flat_counts[b].copy()
        for p in range(P):
            if load[p] > 0:
                continue
            eligible = load[flat_part[b]] > 1
            scores = np.where(eligible, flat_mass[b, p], -np.inf)
            n = int(np.argmax(scores))
            load[flat_part[b, n]] -= 1
            flat_part[b, n] = p
            load[p] = 1
            repairs.append(tuple(int(i) for i in np.unravel_index(b, lead)) + (p,) if lead else (p,))
    return AssignmentMask(flat_part.reshape(part_of.shape), P, repairs)
