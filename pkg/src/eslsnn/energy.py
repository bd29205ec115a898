"""Synaptic-operation counts and a linear energy estimate.

One operation is one active synapse used once: a dense layer costs its
active connections, a conv layer costs its active kernel elements times
the number of output positions (per timestep).
"""
from __future__ import annotations

from dataclasses import dataclass

GPU_J_PER_OP = 1.78e-11
NEUROMORPHIC_J_PER_OP = 1.25e-11


@dataclass(frozen=True)
class EnergyModel:
    joules_per_op_gpu: float = GPU_J_PER_OP
    joules_per_op_neuromorphic: float = NEUROMORPHIC_J_PER_OP

    def __post_init__(self):
        if not (self.joules_per_op_gpu > 0 and self.joules_per_op_neuromorphic > 0):
            raise ValueError("energy per operation must be positive")


@dataclass(frozen=True)
class LayerOps:
    name: str
    kind: str
    connections: int
    ops_per_step: int


@dataclass(frozen=True)
class OpsReport:
    layers: tuple

    @property
    def total_connections(self) -> int:
        return sum(l.connections for l in self.layers)

    @property
    def total_ops(self) -> int:
        return sum(l.ops_per_step for l in self.layers)


def count_ops(checkpoint) -> OpsReport:
    """Active-connection and per-timestep op counts from the masks only."""
    rows = []
    for l in checkpoint.layers:
        conn = int(l.mask.cardinality)
        rows.append(LayerOps(l.name, l.kind, conn, conn * int(l.out_positions)))
    return OpsReport(tuple(rows))


def estimate_energy(op_count, model: EnergyModel = EnergyModel()):
    """``(joules_gpu, joules_neuromorphic)`` for ``op_count`` operations."""
    if op_count < 0:
        raise ValueError("op count must be non-negative")
    return op_count * model.joules_per_op_gpu, op_count * model.joules_per_op_neuromorphic


def format_report(report: OpsReport, model: EnergyModel = EnergyModel()) -> str:
    lines = ["layer,kind,connections,ops_per_step"]
    lines += [f"{l.name},{l.kind},{l.connections},{l.ops_per_step}" for l in report.layers]
    gpu, neuro = estimate_energy(report.total_ops, model)
    lines.append(f"total_connections {report.total_connections}")
    lines.append(f"ops_per_step {report.total_ops} ({report.total_ops / 1000:.1f}K)")
    lines.append(f"energy_gpu_joules {gpu:.3g}")
    lines.append(f"energy_neuromorphic_joules {neuro:.3g}")
    return "\n".join(lines)
