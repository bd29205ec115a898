"""Evolving sparse spiking neural networks in numpy.

Two network families share one sparse-topology engine:

* :mod:`eslsnn.temporal` - single-spike networks with exact z-domain gradients
* :mod:`eslsnn.lif` - iterative LIF networks trained by BPTT with a surrogate

Masks are initialised Erdős-Rényi style and periodically pruned and regrown
(:mod:`eslsnn.topology`); :mod:`eslsnn.trainer` runs the loop.
"""
from .config import TrainingConfig, load_config, parse, serialize
from .energy import EnergyModel, count_ops, estimate_energy
from .topology import (
    ErdosRenyiConfig,
    EvolutionSchedule,
    GrowthRule,
    PruneRule,
    SparseMask,
    cosine_decay,
    er_init,
    rewire_step,
)
from .trainer import Checkpoint, evaluate, sweep_epsilon, train

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "EnergyModel",
    "ErdosRenyiConfig",
    "EvolutionSchedule",
    "GrowthRule",
    "PruneRule",
    "SparseMask",
    "TrainingConfig",
    "cosine_decay",
    "count_ops",
    "er_init",
    "estimate_energy",
    "evaluate",
    "load_config",
    "parse",
    "rewire_step",
    "serialize",
    "sweep_epsilon",
    "train",
]
