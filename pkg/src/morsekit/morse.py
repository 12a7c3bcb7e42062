"""Attractors, basins, repellers and Morse decompositions of transition graphs.

All operations are combinatorial surrogates on the outer approximation: the
graph attractor is the omega-limit of the viability kernel (largest exit-free
forward-invariant subset), basins are all-paths absorption sets, Morse sets
are recurrent strongly connected components of the attractor subgraph ordered
by a condensation-compatible linear extension.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.sparse.csgraph import connected_components

from .errors import (InvariantViolationError, MalformedSpecError, NoAttractorError,
                     NotAttractedError)
from .grids import CubicalGrid, TransitionGraph, build_graph, subdivide

__all__ = ["AttractorReport", "MorseDecomposition", "omega_limit", "find_attractor",
           "dual_repeller", "morse_decomposition", "inflated_robustness"]


# ---------------------------------------------------------------------------
# low-level kernels (masks are over local cell positions)

def _rev_csr(graph):
    if getattr(graph, "_rev", None) is None:
        graph._rev = graph.csr().T.tocsr()
    return graph._rev


def _gather(csr, cells):
    """Union of out-neighbors of the given cells."""
    ptr, idx = csr.indptr, csr.indices
    if len(cells) == 0:
        return np.zeros(0, dtype=idx.dtype)
    parts = [idx[ptr[c]:ptr[c + 1]] for c in cells]
    return np.unique(np.concatenate(parts)) if parts else np.zeros(0, idx.dtype)


def reach_mask(graph, seed_mask, backward=False):
    """Cells reachable from the seeds (including them)."""
    csr = _rev_csr(graph) if backward else graph.csr()
    visited = seed_mask.copy()
    frontier = np.nonzero(seed_mask)[0]
    while len(frontier):
        nb = _gather(csr, frontier)
        nb = nb[~visited[nb]]
        visited[nb] = True
        frontier = nb
    return visited


def image_counts(graph, mask):
    """Per-cell count of out-edges landing in mask."""
    return graph.csr() @ mask.astype(np.float32)


def viability_kernel(graph, umask):
    """Largest S subset of U with no exit flag and image(S) subset S."""
    outdeg = graph.out_degree()
    S = umask & ~graph.exit & (outdeg > 0)
    while True:
        cnt = image_counts(graph, S)
        bad = S & (cnt < outdeg - 1e-6)
        if not bad.any():
            return S
        S = S & ~bad


def dilate_mask(grid, mask, rings):
    """Morphological dilation of a cell mask by full-box rings."""
    if rings <= 0 or not mask.any():
        return mask.copy()
    n = grid.cells_per_axis
    m = grid.dimension
    full = np.zeros(n ** m, dtype=bool)
    full[grid.cell_ids[mask]] = True
    nd = full.reshape((n,) * m)
    nd = ndimage.binary_dilation(nd, structure=np.ones((3,) * m, bool),
                                 iterations=int(rings))
    out = nd.reshape(-1)[grid.cell_ids]
    return out


def absorb(graph, target_mask, slack_rings=0, within_mask=None):
    """Upstream absorption: add cells all of whose images lie in the current
    set (dilated by slack_rings for the membership test) until a fixpoint."""
    outdeg = graph.out_degree()
    B = target_mask.copy()
    ok = (~graph.exit) & (outdeg > 0)
    if within_mask is not None:
        ok = ok & within_mask
    rev = _rev_csr(graph)
    D = dilate_mask(graph.grid, B, slack_rings) if slack_rings else B
    cnt = np.asarray(image_counts(graph, D))
    while True:
        add = ok & ~B & (cnt >= outdeg - 1e-6)
        if not add.any():
            break
        B = B | add
        Dn = dilate_mask(graph.grid, B, slack_rings) if slack_rings else B
        delta = np.nonzero(Dn & ~D)[0]
        D = Dn
        if len(delta) == 0:
            continue
        preds = np.concatenate([rev.indices[rev.indptr[c]:rev.indptr[c + 1]]
                                for c in delta]) if len(delta) else []
        np.add.at(cnt, preds, 1.0)
    return B


def scc_info(graph):
    """(labels, recurrent component ids) of the full graph, cached."""
    if getattr(graph, "_scc", None) is None:
        ncomp, labels = connected_components(graph.csr(), directed=True,
                                             connection="strong")
        sizes = np.bincount(labels, minlength=ncomp)
        rec = sizes >= 2
        loops = graph.self_loops()
        rec[labels[loops]] = True
        graph._scc = (labels, np.nonzero(rec)[0])
    return graph._scc


def _invalidate(graph):
    for a in ("_scc", "_rev", "_region", "_global"):
        if hasattr(graph, a):
            delattr(graph, a)
    graph._csr_cache = None


def recurrent_mask(graph):
    labels, rec = scc_info(graph)
    mask = np.zeros(graph.ncells, dtype=bool)
    if len(rec):
        mask[np.isin(labels, rec)] = True
    return mask


# ---------------------------------------------------------------------------
# spec-level operations

def _as_mask(graph, cells):
    if cells is None:
        return np.ones(graph.ncells, dtype=bool)
    cells = np.asarray(cells)
    if cells.dtype == bool:
        return cells.copy()
    m = np.zeros(graph.ncells, dtype=bool)
    m[cells.astype(np.int64)] = True
    return m


def omega_limit(graph, cells):
    """Union of recurrent components reachable from the cells, plus the cells
    on connecting paths between them (reachable from and reaching recurrence).
    """
    S = _as_mask(graph, cells)
    if not S.any():
        raise MalformedSpecError("omega_limit of an empty cell set")
    R = reach_mask(graph, S)
    if graph.exit[R].any():
        raise NotAttractedError("cell set reaches the exit sink")
    rec = recurrent_mask(graph) & R
    if not rec.any():
        return np.zeros(graph.ncells, dtype=bool)
    fwd = reach_mask(graph, rec)
    bwd = reach_mask(graph, rec, backward=True)
    return fwd & bwd


@dataclass(eq=False)
class AttractorReport:
    attractor: np.ndarray          # bool mask
    basin: np.ndarray              # bool mask
    relative_basin: np.ndarray     # bool mask (w.r.t. the requested U)
    dual_repeller: np.ndarray      # bool mask (vs the global graph attractor)
    absorbing: np.ndarray          # viability kernel used as absorbing set

    def cells(self, which="attractor"):
        return np.nonzero(getattr(self, which))[0]


def global_attractor(graph):
    """Graph attractor of the whole box (cached).

    Every cell of the viability kernel X reaches recurrence (all its paths
    stay in the finite exit-free set X forever), so the omega-limit of X is
    just the forward closure of the recurrent cells inside X.
    """
    if getattr(graph, "_global", None) is None:
        X = viability_kernel(graph, np.ones(graph.ncells, dtype=bool))
        rec = recurrent_mask(graph) & X
        if not rec.any():
            raise NoAttractorError("no recurrent dynamics survives in the box")
        att = reach_mask(graph, rec) & X
        basin = absorb(graph, X)
        graph._global = (att, X, basin)
    return graph._global


def find_attractor(graph, cells=None):
    """Attractor report for the candidate absorbing set U (default: full box).

    U is "eventually absorbed" when its viability kernel (largest exit-free
    forward-invariant subset) is nonempty and carries recurrence; the
    attractor is the omega-limit of that kernel.
    """
    U = _as_mask(graph, cells)
    X = viability_kernel(graph, U)
    rec = recurrent_mask(graph) & X
    if not X.any() or not rec.any():
        raise NoAttractorError("candidate set is not eventually absorbed")
    att = reach_mask(graph, rec) & X
    basin = absorb(graph, X)
    rel = basin & X
    g_att, _, _ = global_attractor(graph)
    dual = dual_repeller(graph, att & g_att, g_att)
    return AttractorReport(attractor=att, basin=basin, relative_basin=rel,
                           dual_repeller=dual, absorbing=X)


def dual_repeller(graph, attractor_cells, global_cells):
    """Dual repeller of an attractor inside the global attractor cell set."""
    A = _as_mask(graph, attractor_cells)
    G = _as_mask(graph, global_cells)
    if (A & ~G).any():
        raise MalformedSpecError("attractor cells not inside the global attractor")
    if not A.any():
        return G.copy()
    om = absorb(graph, A)
    return G & ~om


# ---------------------------------------------------------------------------
# Morse decompositions

@dataclass(eq=False)
class MorseDecomposition:
    graph: TransitionGraph
    morse_sets: list                 # list of local-id arrays, order M_1..M_l
    filtration: list                 # list of bool masks A_1..A_l
    attractor: np.ndarray            # bool mask A_l
    region: np.ndarray               # analysis region (exit-free basin)
    basin_index: np.ndarray          # per cell: max reachable Morse index, 0=none
    comp_edges: list                 # (i, j) 1-based ordered indices, i > j
    pruned: list = field(default_factory=list)

    @property
    def count(self):
        return len(self.morse_sets)

    def morse_mask(self, k=None):
        out = np.zeros(self.graph.ncells, dtype=bool)
        if k is None:
            for s in self.morse_sets:
                out[s] = True
        else:
            out[self.morse_sets[k - 1]] = True
        return out

    def hulls(self):
        """State-space bounding box per Morse set: (l, 2, m)."""
        g = self.graph.grid
        out = []
        for s in self.morse_sets:
            boxes = g.boxes(g.cell_ids[s])
            out.append(np.stack([boxes[:, 0].min(axis=0), boxes[:, 1].max(axis=0)]))
        return np.array(out)

    def to_json_dict(self):
        return {
            "morse_sets": [np.asarray(s).tolist() for s in self.morse_sets],
            "filtration": [np.nonzero(a)[0].tolist() for a in self.filtration],
            "order": list(range(1, self.count + 1)),
            "basin_index": self.basin_index.tolist(),
            "condensation_edges": [[int(i), int(j)] for i, j in self.comp_edges],
            "hulls": self.hulls().tolist(),
            "pruned": self.pruned,
        }

    def condensation_dot(self):
        lines = ["digraph morse {", "  rankdir=TB;"]
        hulls = self.hulls()
        for k in range(self.count):
            c = 0.5 * (hulls[k][0] + hulls[k][1])
            lines.append(
                f'  M{k+1} [label="M{k+1}\\n{len(self.morse_sets[k])} cells\\n'
                f'center {np.round(c, 3).tolist()}"];')
        for i, j in self.comp_edges:
            lines.append(f"  M{i} -> M{j};")
        lines.append("}")
        return "\n".join(lines)


def _hull_diameter(grid, cells):
    boxes = grid.boxes(grid.cell_ids[cells])
    lo = boxes[:, 0].min(axis=0)
    hi = boxes[:, 1].max(axis=0)
    return float(np.max(hi - lo))


def _refute_by_refinement(graph, comps, spec):
    """Subset of comps with no recurrence among their children in a depth+1
    rebuild of the local graph (all candidates plus one ring, rebuilt once)."""
    if not comps:
        return []
    grid = graph.grid
    union = np.zeros(graph.ncells, dtype=bool)
    for c in comps:
        union[c] = True
    ring = dilate_mask(grid, union, 1)
    fine = subdivide(grid, grid.cell_ids[np.nonzero(ring)[0]])
    meta = graph.meta
    fg = build_graph(spec, fine, meta["tau"],
                     {"points_per_cell": meta["points_per_cell"],
                      "selections_per_point": meta["selections_per_point"],
                      "seed": meta["seed"]},
                     meta["rho"] * 0.5, steps_per_tau=meta["steps_per_tau"],
                     inflation_delta=meta.get("inflation_delta", 0.0))
    rec = recurrent_mask(fg)
    rec_global = fg.grid.active[np.nonzero(rec)[0]]
    refuted = []
    for c in comps:
        children = subdivide(grid, grid.cell_ids[np.asarray(c)]).active
        if not np.isin(rec_global, children).any():
            refuted.append(c)
    return refuted


def _delete_internal_edges(graph, comp_mask):
    """Remove edges with both ends in comp_mask (certified spurious recurrence)."""
    C = graph.ncells
    src = np.repeat(np.arange(C), np.diff(graph.indptr))
    keep = ~(comp_mask[src] & comp_mask[graph.indices])
    new_indices = graph.indices[keep]
    counts = np.bincount(src[keep], minlength=C)
    new_indptr = np.zeros(C + 1, dtype=np.int64)
    np.cumsum(counts, out=new_indptr[1:])
    graph.indices = new_indices
    graph.indptr = new_indptr
    _invalidate(graph)


def morse_decomposition(graph, attractor_cells, prune=False, spec=None,
                        prune_max_diameter_cells=None):
    """Morse sets, order and filtration of the attractor cell set.

    Recurrent components of the attractor subgraph become Morse sets; the
    order is a linear extension of the condensation (sinks first, ties broken
    by ascending hull-centroid lexicographic order); A_k is the set of cells
    reachable from M_1..M_k inside the attractor.

    With prune=True, components whose recurrence does not persist under one
    subdivision (depth+1 rebuild of the local graph) are demoted to connecting
    cells; prune_max_diameter_cells limits candidates by hull diameter.
    """
    if prune and spec is None:
        raise MalformedSpecError("pruning needs the map spec for refinement")
    att = _as_mask(graph, attractor_cells)
    widths = graph.grid.widths
    pruned_log = []
    for _round in range(4):
        labels, rec_ids = scc_info(graph)
        comps = []
        for cid in rec_ids:
            cells = np.nonzero(labels == cid)[0]
            if att[cells[0]]:
                if not att[cells].all():
                    raise InvariantViolationError(
                        "recurrent component straddles the attractor")
                comps.append(cells)
        if not prune:
            break
        cands = comps
        if prune_max_diameter_cells is not None:
            gate = prune_max_diameter_cells * float(widths.max()) + 1e-12
            cands = [c for c in comps if _hull_diameter(graph.grid, c) <= gate]
        refuted = _refute_by_refinement(graph, cands, spec)
        if not refuted:
            break
        for c in refuted:
            _delete_internal_edges(graph, _as_mask(graph, c))
            pruned_log.append({"ncells": int(len(c)), "round": _round,
                               "cells": np.asarray(c).tolist()})
    if not comps:
        raise NoAttractorError("attractor cell set carries no recurrence")

    # order: reachability condensation, sinks first
    l = len(comps)
    fwd = [reach_mask(graph, _as_mask(graph, c)) for c in comps]
    edges = set()
    for i in range(l):
        for j in range(l):
            if i != j and fwd[i][comps[j][0]]:
                edges.add((i, j))       # i reaches j: j must come first
    # Kahn on "prerequisites": comp j before comp i whenever (i, j) in edges
    succ = {i: set() for i in range(l)}
    indeg = {i: 0 for i in range(l)}
    for i, j in edges:
        succ[j].add(i)
        indeg[i] += 1
    centroids = []
    g = graph.grid
    for c in comps:
        boxes = g.boxes(g.cell_ids[c])
        centroids.append(tuple(0.5 * (boxes[:, 0].min(0) + boxes[:, 1].max(0))))
    ready = sorted([i for i in range(l) if indeg[i] == 0], key=lambda i: centroids[i])
    order = []
    while ready:
        i = ready.pop(0)
        order.append(i)
        for nxt in succ[i]:
            indeg[nxt] -= 1
            if indeg[nxt] == 0:
                ready.append(nxt)
        ready.sort(key=lambda q: centroids[q])
    if len(order) != l:
        raise InvariantViolationError("condensation of recurrent components has a cycle")
    comps = [comps[i] for i in order]
    remap = {order[i]: i for i in range(l)}
    comp_edges = sorted({(remap[i] + 1, remap[j] + 1) for i, j in edges})

    # filtration and region (A_l replaces att: pruning may have demoted cells)
    filtration = []
    acc = np.zeros(graph.ncells, dtype=bool)
    for k in range(l):
        acc = acc | _as_mask(graph, comps[k])
        filtration.append(reach_mask(graph, acc) & att)
    att = filtration[-1]
    _, _, region = global_attractor(graph)
    basin_index = np.zeros(graph.ncells, dtype=np.int64)
    for k in range(l):
        bwd = reach_mask(graph, _as_mask(graph, comps[k]), backward=True)
        basin_index[bwd] = k + 1
    basin_index[~region] = 0

    dec = MorseDecomposition(graph=graph, morse_sets=comps, filtration=filtration,
                             attractor=att, region=region, basin_index=basin_index,
                             comp_edges=comp_edges, pruned=pruned_log)
    _verify_decomposition(dec)
    return dec


def _verify_decomposition(dec):
    graph = dec.graph
    l = dec.count
    # pairwise disjoint
    seen = np.zeros(graph.ncells, dtype=bool)
    for s in dec.morse_sets:
        if seen[s].any():
            raise InvariantViolationError("Morse sets overlap")
        seen[s] = True
    # condensation edges decrease the 1-based order index
    for i, j in dec.comp_edges:
        if not i > j:
            raise InvariantViolationError("condensation edge increases the Morse order")
    # forward invariance of the filtration, and M_k = A_k minus basin(A_{k-1})
    C = graph.ncells
    src = np.repeat(np.arange(C), np.diff(graph.indptr))
    for k in range(l):
        A = dec.filtration[k]
        leaving = A[src] & ~A[graph.indices]
        if leaving.any():
            raise InvariantViolationError("filtration set is not forward invariant")
    for k in range(1, l):
        om = absorb(graph, dec.filtration[k - 1])
        if om[dec.morse_sets[k]].any():
            raise InvariantViolationError("Morse set meets the basin of A_{k-1}")


# ---------------------------------------------------------------------------
# robustness of the attractor under inflation

def inflated_robustness(spec, grid, tau, delta_list, sampling, rho,
                        steps_per_tau=10):
    """Hausdorff distances delta_H(A(delta), A(0)) for the inflated systems.

    The inflated field adds a deterministic delta-ball offset to every
    selection value (the argument ball of the relaxation is outer-approximated
    by the per-cell sampling the graph builder already performs).
    """
    deltas = [float(d) for d in delta_list]
    if deltas != sorted(deltas) or deltas[0] != 0.0:
        raise MalformedSpecError("delta list must start at 0 and be ascending")
    results = []
    base_pts = None
    from scipy.spatial import cKDTree
    for d in deltas:
        g = build_graph(spec, grid, tau, sampling, rho, steps_per_tau=steps_per_tau,
                        inflation_delta=d)
        try:
            rep = find_attractor(g)
        except NoAttractorError as exc:
            results.append((d, None, str(exc)))
            continue
        pts = grid.centers(grid.cell_ids[rep.cells("attractor")])
        if base_pts is None:
            base_pts = pts
            results.append((d, 0.0, None))
            continue
        t0, t1 = cKDTree(base_pts), cKDTree(pts)
        d01 = float(t1.query(base_pts)[0].max())
        d10 = float(t0.query(pts)[0].max())
        results.append((d, max(d01, d10), None))
    return results
