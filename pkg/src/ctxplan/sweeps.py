"""Communication-volume sweeps over block size, imbalance tolerance and mask density."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .blocks import BlockGraph, generate_blocks
from .hypergraph import Infeasible, build_hypergraph
from .model import Batch, DeviceTopology, MaskDescriptor, mask_sparsity
from .placement import (EPS_DATA, EPS_INTER, EPS_INTRA, carry_assignment, communication_volume, place,
                        project_assignment)


def block_size_sweep(batch: Batch, sizes, topo: DeviceTopology, eps_inter: float = EPS_INTER,
                     eps_intra: float = EPS_INTRA, eps_data: float = EPS_DATA, seed: int = 0) -> list[dict]:
    """Place at every block size, coarsest first, seeding each finer size with the coarser plan.

    Sizes should divide one another so that coarse tiles are unions of fine tiles.
    """
    rows = []
    prev: tuple[BlockGraph, object] | None = None
    for bs in sorted(sizes, reverse=True):
        g = generate_blocks(batch, bs)
        warm = project_assignment(g, prev[0], prev[1]) if prev else None
        try:
            pl = place(g, topo, eps_inter, eps_intra, eps_data, seed=seed, warm_start=warm)
        except Infeasible as e:
            rows.append({"block_size": bs, "error": str(e)})
            continue
        cv = communication_volume(g, pl)
        rows.append({"block_size": bs, "comm_bytes": cv.total, "inter_machine_bytes": cv.inter_machine,
                     "comp_blocks": g.num_comp, "balance": pl.balance()})
        prev = (g, pl)
    return sorted(rows, key=lambda r: r["block_size"])


def epsilon_sweep(batch: Batch, block_size: int, eps_values, topo: DeviceTopology,
                  eps_data: float = EPS_DATA, seed: int = 0) -> list[dict]:
    """Place with ``eps`` as the compute tolerance at both levels, loosest last.

    Each placement is feasible under the next, looser tolerance and seeds it.
    """
    g = generate_blocks(batch, block_size)
    h = build_hypergraph(g)
    rows = []
    warm = None
    for eps in sorted(eps_values):
        try:
            pl = place(g, topo, eps, eps, eps_data, seed=seed, warm_start=warm, hypergraph=h)
        except Infeasible as e:
            rows.append({"eps": eps, "error": str(e)})
            continue
        cv = communication_volume(g, pl)
        rows.append({"eps": eps, "comm_bytes": cv.total, "inter_machine_bytes": cv.inter_machine,
                     "flops_max_over_mean": pl.balance()["flops_max_over_mean"]})
        warm = pl.vertex_assignment()
    return rows


def with_window(batch: Batch, fraction: float, sink: int = 1) -> Batch:
    """Every sequence gets a sink-plus-window mask whose window is ``fraction`` of its length."""
    seqs = tuple(replace(s, mask=MaskDescriptor.lambda_(min(sink, s.length), max(1, int(round(fraction * s.length)))))
                 for s in batch.sequences)
    return replace(batch, sequences=seqs)


def sparsity_sweep(batch: Batch, block_size: int, fractions, topo: DeviceTopology,
                   eps_inter: float = EPS_INTER, eps_intra: float = EPS_INTRA, eps_data: float = EPS_DATA,
                   seed: int = 0) -> list[dict]:
    """Widest window first; each narrower mask is seeded with the wider mask's placement."""
    rows = []
    prev = None
    for f in sorted(fractions, reverse=True):
        b = with_window(batch, f)
        g = generate_blocks(b, block_size)
        row = {"window_fraction": f, "sparsity": mask_sparsity(b)}
        warm = carry_assignment(g, prev[0], prev[1]) if prev else None
        try:
            pl = place(g, topo, eps_inter, eps_intra, eps_data, seed=seed, warm_start=warm)
        except Infeasible as e:
            rows.append(row | {"error": str(e)})
            continue
        rows.append(row | {"comm_bytes": communication_volume(g, pl).total})
        prev = (g, pl)
    return sorted(rows, key=lambda r: r["window_fraction"])


def fraction_monotone(series: list[list[float]], increasing: bool = True) -> float:
    """Share of series that never step the wrong way."""
    ok = 0
    for s in series:
        d = np.diff(np.asarray(s, dtype=float))
        ok += bool(np.all(d >= 0) if increasing else np.all(d <= 0))
    return ok / len(series) if series else 1.0
