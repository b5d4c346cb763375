"""ADMM-style opacity sparsification for trained submaps.

During a window of the mapping run the opacity vector a is optimized
jointly with an auxiliary z constrained to at most kappa nonzeros:

    a      <- clamp(a - eta (dL/da + delta (a - z + lam)), 0, 1)
    z      <- prox_topk(a + lam, kappa)
    lam    <- lam + a - z

with penalty (delta/2)||a - z + lam||^2 + (delta/2)||lam||^2. The triple
stops once ||a - z||^2 <= epsilon; Gaussians with a below the prune
threshold are removed at the prune iteration.
"""

from dataclasses import dataclass, field, replace
from math import ceil

import numpy as np


class CompactionError(Exception):
    pass


class LengthMismatch(CompactionError):
    pass


@dataclass
class CompactionConfig:
    kappa: int | None = None  # explicit target count; None = ratio of count at start
    kappa_ratio: float = 0.4
    # delta large enough that the penalty drives losing opacities to zero
    # well inside the window; small delta leaves the triple oscillating
    delta: float = 1.0
    epsilon: float = 0.005
    start: int = 700
    prune_iter: int = 950
    total: int = 1000
    prune_threshold: float = 0.005

    def __post_init__(self):
        if not 0 < self.start < self.prune_iter <= self.total:
            raise CompactionError(
                f"need 0 < start < prune_iter <= total, got "
                f"{self.start}/{self.prune_iter}/{self.total}"
            )
        if self.kappa is None and not 0.0 < self.kappa_ratio <= 1.0:
            raise CompactionError(f"kappa_ratio {self.kappa_ratio} outside (0, 1]")
        if self.delta <= 0.0 or self.epsilon <= 0.0:
            raise CompactionError("delta and epsilon must be positive")

    def resolve_kappa(self, count):
        if self.kappa is not None:
            if not 0 < self.kappa <= count:
                raise CompactionError(f"kappa {self.kappa} outside (0, {count}]")
            return self.kappa
        return max(1, ceil(self.kappa_ratio * count))


@dataclass
class CompactionState:
    a: np.ndarray
    z: np.ndarray
    lam: np.ndarray
    t: int = 0

    def __post_init__(self):
        if not (self.a.shape == self.z.shape == self.lam.shape):
            raise LengthMismatch(
                f"{self.a.shape} vs {self.z.shape} vs {self.lam.shape}"
            )


def prox_topk(v, kappa):
    """Keep the kappa largest-magnitude entries, zero the rest.

    Ties are broken toward the lower index (stable sort contract).
    """
    v = np.asarray(v, dtype=np.float64)
    if kappa >= v.size:
        return v.copy()
    out = np.zeros_like(v)
    if kappa <= 0:
        return out
    keep = np.argsort(-np.abs(v), kind="stable")[:kappa]
    out[keep] = v[keep]
    return out


def augmented_penalty_grad(a, z, lam, delta):
    """Penalty (delta/2)||a-z+lam||^2 + (delta/2)||lam||^2 and its a-gradient."""
    a = np.asarray(a, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    if not (a.shape == z.shape == lam.shape):
        raise LengthMismatch(f"{a.shape} vs {z.shape} vs {lam.shape}")
    r = a - z + lam
    penalty = 0.5 * delta * float(r @ r) + 0.5 * delta * float(lam @ lam)
    return penalty, delta * r


def compaction_step(state, dL_da, eta, kappa, delta):
    """One sparsification triple; the Gaussian attributes themselves are
    stepped by the mapper against the same combined loss."""
    _, pen_grad = augmented_penalty_grad(state.a, state.z, state.lam, delta)
    a = np.clip(state.a - eta * (np.asarray(dL_da, dtype=np.float64) + pen_grad), 0.0, 1.0)
    z = prox_topk(a + state.lam, kappa)
    lam = state.lam + a - z
    return CompactionState(a=a, z=z, lam=lam, t=state.t + 1)


def feasibility_gap(state):
    d = state.a - state.z
    return float(d @ d)


def prune_zeros(submap, threshold):
    """Drop Gaussians whose opacity fell below threshold; returns a new submap."""
    keep = submap.gaussians.opacities >= threshold
    return replace(submap, gaussians=submap.gaussians.subset(keep))


@dataclass
class CompactionDriver:
    """Schedule adapter the mapper invokes every iteration; activates the
    triple inside [start, prune_iter), freezes it on convergence, and
    reports the prune mask at prune_iter."""

    cfg: CompactionConfig
    state: CompactionState | None = None
    kappa: int | None = None
    converged_at: int | None = None
    feasibility: list = field(default_factory=list)

    def raw_opacity(self, t):
        """From the window start on, opacities live unsquashed in [0,1]."""
        return t >= self.cfg.start

    def wants_step(self, t):
        return (
            self.cfg.start <= t < self.cfg.prune_iter
            and self.converged_at is None
        )

    def holding(self, t):
        """True while a converged sparse state waits for the prune pass."""
        return self.converged_at is not None and t < self.cfg.prune_iter

    def begin(self, opacities):
        a = np.asarray(opacities, dtype=np.float64).copy()
        self.kappa = self.cfg.resolve_kappa(a.size)
        self.state = CompactionState(
            a=a, z=prox_topk(a, self.kappa), lam=np.zeros_like(a)
        )

    def step(self, t, dL_da, eta):
        if self.state is None:
            raise CompactionError("step() before begin()")
        self.state = compaction_step(self.state, dL_da, eta, self.kappa, self.cfg.delta)
        gap = feasibility_gap(self.state)
        self.feasibility.append(gap)
        if gap <= self.cfg.epsilon:
            self.converged_at = t
            # adopt the feasible point so losing entries end at exact zero
            self.state = replace(self.state, a=self.state.z.copy())
        return self.state.a

    def prune_mask(self, opacities):
        return opacities >= self.cfg.prune_threshold
