"""Mask-aware placement, scheduling and simulated execution of blockwise attention."""

from .blocks import BlockGraph, generate_blocks
from .hypergraph import Infeasible, build_hypergraph, connectivity_cost, partition_heuristic
from .model import Batch, DeviceTopology, MaskDescriptor, SequenceSpec, gen_mask
from .placement import communication_volume, place
from .plan import compile_plans, verify_plans
from .scheduler import schedule, schedule_cost
from .simexec import run

__all__ = [
    "Batch", "BlockGraph", "DeviceTopology", "Infeasible", "MaskDescriptor", "SequenceSpec",
    "build_hypergraph", "communication_volume", "compile_plans", "connectivity_cost", "gen_mask",
    "generate_blocks", "partition_heuristic", "place", "run", "schedule", "schedule_cost", "verify_plans",
]
