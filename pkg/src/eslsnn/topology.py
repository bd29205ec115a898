"""Connection masks and their prune/regrow evolution.

A layer's connectivity is a boolean matrix of shape ``(n_pre, n_post)``.
Convolution kernels are addressed through the same matrix by flattening
``(c_in, k_h, k_w)`` into rows, so every routine here is shape-agnostic.

Tie-breaking is always lexicographic on ``(i, j)``, i.e. row-major flat
index order, which makes every selection reproducible.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "PruneRule",
    "GrowthRule",
    "SparseMask",
    "ErdosRenyiConfig",
    "EvolutionSchedule",
    "GrowthSignals",
    "RewireEvent",
    "er_probability",
    "epsilon_for_density",
    "er_init",
    "cosine_decay",
    "prune",
    "grow",
    "rewire_step",
]


class PruneRule(str, Enum):
    MAGNITUDE = "magnitude"
    SET = "set"


class GrowthRule(str, Enum):
    RANDOM_UNFIRED = "random_unfired"
    GRADIENT = "gradient"
    MOMENTUM = "momentum"


@dataclass
class SparseMask:
    """Active-connection bitmap of one layer."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.ascontiguousarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {self.bits.shape}")

    @classmethod
    def dense(cls, n_pre: int, n_post: int) -> "SparseMask":
        return cls(np.ones((n_pre, n_post), dtype=bool))

    @classmethod
    def from_pairs(cls, n_pre: int, n_post: int, pairs) -> "SparseMask":
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        if pairs.size and (
            pairs.min() < 0 or pairs[:, 0].max() >= n_pre or pairs[:, 1].max() >= n_post
        ):
            raise ValueError("pair index out of range")
        bits = np.zeros((n_pre, n_post), dtype=bool)
        flat = pairs[:, 0] * n_post + pairs[:, 1]
        if np.unique(flat).size != flat.size:
            raise ValueError("duplicate pairs in mask")
        bits.ravel()[flat] = True
        return cls(bits)

    @property
    def n_pre(self) -> int:
        return self.bits.shape[0]

    @property
    def n_post(self) -> int:
        return self.bits.shape[1]

    @property
    def size(self) -> int:
        return self.bits.size

    @property
    def cardinality(self) -> int:
        return int(np.count_nonzero(self.bits))

    @property
    def density(self) -> float:
        return self.cardinality / self.size

    def pairs(self) -> np.ndarray:
        """Active ``(i, j)`` pairs as a ``(k, 2)`` array in lexicographic order."""
        return np.argwhere(self.bits)

    @property
    def active(self) -> set[tuple[int, int]]:
        return {(int(i), int(j)) for i, j in self.pairs()}

    def copy(self) -> "SparseMask":
        return SparseMask(self.bits.copy())

    def __eq__(self, other):
        if not isinstance(other, SparseMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.array_equal(self.bits, other.bits))


@dataclass(frozen=True)
class ErdosRenyiConfig:
    epsilon: float

    def __post_init__(self):
        if not (self.epsilon > 0) or not math.isfinite(self.epsilon):
            raise ValueError(f"epsilon must be a positive finite number, got {self.epsilon}")


@dataclass(frozen=True)
class EvolutionSchedule:
    """Rewiring schedule.

    ``alpha == 0`` is accepted and means static sparse training.
    """

    alpha: float = 0.3
    t_iter: int = 1000
    t_end: int = 1000
    prune_rule: PruneRule = PruneRule.SET
    growth_rule: GrowthRule = GrowthRule.MOMENTUM

    def __post_init__(self):
        if not 0 <= self.alpha < 1:
            raise ValueError(f"alpha must lie in [0, 1), got {self.alpha}")
        if self.t_iter < 1:
            raise ValueError("t_iter must be >= 1")
        if self.t_end < self.t_iter:
            raise ValueError("t_end must be >= t_iter")
        object.__setattr__(self, "prune_rule", PruneRule(self.prune_rule))
        object.__setattr__(self, "growth_rule", GrowthRule(self.growth_rule))

    def is_rewire_iteration(self, iteration: int) -> bool:
        return self.alpha > 0 and iteration % self.t_iter == 0 and iteration <= self.t_end


@dataclass
class GrowthSignals:
    """Dense per-entry signals a growth rule may need.

    Each array, when given, has the mask's shape.
    """

    gradient: np.ndarray | None = None
    momentum: np.ndarray | None = None
    ever_active: np.ndarray | None = None


@dataclass(frozen=True)
class RewireEvent:
    iteration: int
    layer_id: str
    n_pruned: int
    n_grown: int
    density_after: float


def er_probability(n_pre: int, n_post: int, epsilon: float) -> float:
    return min(1.0, epsilon * (n_pre + n_post) / (n_pre * n_post))


def epsilon_for_density(n_pre: int, n_post: int, density: float) -> float:
    """Inverse of :func:`er_probability` (before clamping)."""
    if not 0 < density <= 1:
        raise ValueError("density must lie in (0, 1]")
    return density * n_pre * n_post / (n_pre + n_post)


def er_init(n_pre: int, n_post: int, cfg: ErdosRenyiConfig, seed: int) -> SparseMask:
    """Erdos-Renyi mask: every entry independently active with probability
    ``min(1, eps * (n_pre + n_post) / (n_pre * n_post))``."""
    if n_pre < 1 or n_post < 1:
        raise ValueError(f"layer dimensions must be positive, got {n_pre}x{n_post}")
    if not isinstance(cfg, ErdosRenyiConfig):
        cfg = ErdosRenyiConfig(float(cfg))
    p = er_probability(n_pre, n_post, cfg.epsilon)
    rng = np.random.default_rng(seed)
    return SparseMask(rng.random((n_pre, n_post)) < p)


def cosine_decay(t: int, alpha: float, t_end: int) -> float:
    if t_end <= 0:
        raise ValueError("t_end must be positive")
    if t < 0 or t > t_end:
        raise ValueError(f"t={t} outside [0, {t_end}]")
    return alpha / 2.0 * (1.0 + math.cos(t * math.pi / t_end))


def _stable_order(keys: np.ndarray) -> np.ndarray:
    # keys are given in flat-index order, so a stable sort breaks ties lexicographically
    return np.argsort(keys, kind="stable")


def _to_pairs(flat: np.ndarray, n_post: int) -> set[tuple[int, int]]:
    return {(int(f // n_post), int(f % n_post)) for f in flat}


def _prune_flat(mask: SparseMask, weights: np.ndarray, k: int, rule) -> np.ndarray:
    rule = PruneRule(rule)
    weights = np.asarray(weights).reshape(mask.bits.shape)
    active = np.flatnonzero(mask.bits)
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > active.size:
        raise ValueError(f"cannot prune {k} of {active.size} active connections")
    if k == 0:
        return active[:0]
    w = weights.ravel()[active]
    by_magnitude = active[_stable_order(np.abs(w))]
    if rule is PruneRule.MAGNITUDE:
        return np.sort(by_magnitude[:k])

    # SET: the negatives closest to zero and the smallest positives, half each
    neg = w < 0
    neg_idx = active[neg][_stable_order(-w[neg])]
    pos_idx = active[~neg][_stable_order(w[~neg])]
    n_neg = min((k + 1) // 2, neg_idx.size)
    n_pos = min(k // 2, pos_idx.size)
    chosen = np.concatenate([neg_idx[:n_neg], pos_idx[:n_pos]])
    short = k - chosen.size
    if short:
        taken = np.zeros(mask.size, dtype=bool)
        taken[chosen] = True
        rest = by_magnitude[~taken[by_magnitude]]
        chosen = np.concatenate([chosen, rest[:short]])
    return np.sort(chosen)


def prune(mask: SparseMask, weights: np.ndarray, k: int, rule) -> set[tuple[int, int]]:
    """Select ``k`` active connections to remove.

    ``magnitude`` takes the smallest ``|w|``. ``set`` takes ``ceil(k/2)``
    negative weights closest to zero and ``floor(k/2)`` smallest non-negative
    weights, topping up in magnitude order when a sign class runs out.
    The mask is not modified.
    """
    return _to_pairs(_prune_flat(mask, weights, k, rule), mask.n_post)


def _grow_flat(mask, k, rule, aux, seed, candidates=None) -> np.ndarray:
    rule = GrowthRule(rule)
    aux = aux if aux is not None else GrowthSignals()
    if candidates is None:
        candidates = np.flatnonzero(~mask.bits)
    if k < 0:
        raise ValueError("k must be non-negative")
    if k > candidates.size:
        raise ValueError(f"cannot grow {k} connections, only {candidates.size} inactive")

    if rule is GrowthRule.RANDOM_UNFIRED:
        if aux.ever_active is None:
            raise ValueError("random_unfired growth needs the ever_active bitmap")
        if k == 0:
            return candidates[:0]
        rng = np.random.default_rng(seed)
        fired = np.asarray(aux.ever_active, dtype=bool).ravel()[candidates]
        fresh, stale = candidates[~fired], candidates[fired]
        if fresh.size >= k:
            return np.sort(rng.choice(fresh, size=k, replace=False))
        extra = rng.choice(stale, size=k - fresh.size, replace=False)
        return np.sort(np.concatenate([fresh, extra]))

    signal = aux.gradient if rule is GrowthRule.GRADIENT else aux.momentum
    if signal is None:
        raise ValueError(f"{rule.value} growth needs the {rule.value} signal")
    if k == 0:
        return candidates[:0]
    score = np.abs(np.asarray(signal, dtype=float).ravel()[candidates])
    return np.sort(candidates[_stable_order(-score)[:k]])


def grow(mask: SparseMask, k: int, rule, aux: GrowthSignals | None = None, seed: int = 0):
    """Select ``k`` inactive connections to add. The mask is not modified."""
    return _to_pairs(_grow_flat(mask, k, rule, aux, seed), mask.n_post)


def rewire_step(
    mask: SparseMask,
    weights: np.ndarray,
    schedule: EvolutionSchedule,
    iteration: int,
    aux: GrowthSignals | None = None,
    seed: int = 0,
    layer_id: str = "",
) -> RewireEvent:
    """Prune then regrow the same number of connections, in place.

    ``weights`` must be a writable array with the mask's number of entries;
    pruned and grown entries are zeroed. Growth only draws from connections
    that were inactive before the step, so ``k`` is capped by that count
    (at density 1 the step is a no-op).
    """
    if iteration % schedule.t_iter != 0 or iteration > schedule.t_end or iteration < 0:
        raise ValueError(
            f"iteration {iteration} is not a rewire point (t_iter={schedule.t_iter}, t_end={schedule.t_end})"
        )
    if not weights.flags.c_contiguous:
        raise ValueError("weights must be C-contiguous to be edited in place")
    flat_w = weights.reshape(-1)
    if flat_w.size != mask.size:
        raise ValueError("weights and mask sizes differ")
    card = mask.cardinality
    frac = cosine_decay(iteration, schedule.alpha, schedule.t_end)
    k = int(math.floor(frac * card + 0.5))
    inactive = np.flatnonzero(~mask.bits)
    k = min(k, inactive.size)

    if k > 0:
        pruned = _prune_flat(mask, flat_w.reshape(mask.bits.shape), k, schedule.prune_rule)
        grown = _grow_flat(mask, k, schedule.growth_rule, aux, seed, candidates=inactive)
        bits = mask.bits.reshape(-1)
        bits[pruned] = False
        bits[grown] = True
        flat_w[pruned] = 0.0
        flat_w[grown] = 0.0
        if aux is not None and aux.ever_active is not None and aux.ever_active.flags.writeable:
            aux.ever_active.reshape(-1)[grown] = True
    # enforce W = M * W
    flat_w[~mask.bits.reshape(-1)] = 0.0
    return RewireEvent(
        iteration=iteration,
        layer_id=layer_id,
        n_pruned=k,
        n_grown=k,
        density_after=mask.density,
    )
