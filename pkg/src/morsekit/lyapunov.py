"""Discrete strict Morse-Lyapunov functions and the integral construction.

The graph field assigns V = k-1 exactly on the k-th Morse set and grades the
transient cells of each basin class by their longest-path rank in the
(acyclic) transient subgraph, scaled into (k-1, k). This makes V strictly
decrease along every edge leaving a non-Morse cell and keeps every sublevel
set forward invariant. The per-cell margin w is the smallest one-step drop.

The integral construction estimates sup over sampled selections of
int_0^inf e^t alpha(x(t)) dt with a bump weight alpha vanishing on a
neighborhood of the attractor.
"""

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from ._rng import hash_points, uniform01, substream
from .errors import InvariantViolationError, MalformedSpecError, TruncationUnsoundError
from .flows import integrate
from .maps import Selection, evaluate, make_selection

__all__ = ["BumpAlpha", "LyapunovField", "integral_lyapunov", "graph_ml_function",
           "decrease_certificate", "sublevel"]


# ---------------------------------------------------------------------------
# bump weight

@dataclass(eq=False)
class BumpAlpha:
    """Smooth weight: 0 within delta/2 of the attractor set, 1 beyond delta.

    The attractor is a union of boxes (cell boxes of a grid set) or a finite
    point list; distance is Euclidean to the nearest box/point.
    """
    boxes: np.ndarray          # (n, 2, m) lower/upper corners (points: lo=hi)
    delta: float

    def __post_init__(self):
        b = np.asarray(self.boxes, dtype=float)
        if b.ndim == 2:                      # interpret as points
            b = np.stack([b, b], axis=1)
        object.__setattr__(self, "boxes", b)
        if self.delta <= 0:
            raise MalformedSpecError("bump radius must be positive")

    @classmethod
    def from_cells(cls, grid, cells, delta):
        cells = np.asarray(cells)
        if cells.dtype == bool:
            cells = np.nonzero(cells)[0]
        return cls(grid.boxes(grid.cell_ids[cells.astype(np.int64)]), delta)

    def distance(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lo, hi = self.boxes[:, 0], self.boxes[:, 1]
        d = np.empty((len(X),))
        for r, x in enumerate(X):
            gap = np.maximum(lo - x, 0.0) + np.maximum(x - hi, 0.0)
            d[r] = np.sqrt((gap ** 2).sum(axis=1).min())
        return d

    def __call__(self, X):
        """alpha(x): exactly 0 for d <= delta/2, exactly 1 for d >= delta."""
        d = self.distance(X)
        u = (d - self.delta / 2.0) / (self.delta / 2.0)
        out = np.zeros_like(u)
        mid = (u > 0) & (u < 1)
        if mid.any():
            a = np.exp(-1.0 / u[mid])
            b = np.exp(-1.0 / (1.0 - u[mid]))
            out[mid] = a / (a + b)
        out[u >= 1] = 1.0
        return out


def integral_lyapunov(spec, alpha, x, T, n_selections, seed, h=None):
    """Max over sampled selections of the truncated integral of e^t alpha.

    Trajectories are integrated until they have spent one full time unit in
    the zero zone of alpha (the remaining tail contributes exactly 0); a
    trajectory that never settles there by time T raises
    TruncationUnsoundError, since the e^t weight forbids silent truncation.
    """
    if n_selections < 1:
        raise MalformedSpecError("need at least one selection")
    x = np.asarray(x, dtype=float)
    h = (T / 400.0) if h is None else float(h)
    best = 0.0
    for i in range(int(n_selections)):
        sel = Selection("random-convex", seed=substream(seed, i), index=i)
        tr = integrate(make_selection(spec, sel), x, T, h)
        a = alpha(tr.states)
        dt = tr.times[1] - tr.times[0]
        window = max(1, int(np.ceil(1.0 / dt)))
        settled = None
        run = 0
        for j, v in enumerate(a):
            run = run + 1 if v == 0.0 else 0
            if run >= window + 1:
                settled = j
                break
        if settled is None:
            raise TruncationUnsoundError(
                "trajectory did not settle in the zero zone by time T")
        integrand = np.exp(tr.times[:settled + 1]) * a[:settled + 1]
        best = max(best, float(np.trapezoid(integrand, dx=dt)))
    return best


# ---------------------------------------------------------------------------
# graph Morse-Lyapunov field

@dataclass(eq=False)
class LyapunovField:
    grid: object
    values: np.ndarray          # per-cell V, NaN outside the region
    margins: np.ndarray         # per-cell w, NaN outside the region
    levels: list                # c_k = k-1 per Morse set
    region: np.ndarray          # bool mask
    morse: np.ndarray           # bool mask of Morse-set cells
    quantum: np.ndarray         # per-cell minimum level increment (tolerance unit)
    mode: str = "graph"

    def to_csv(self, path):
        ids = np.nonzero(self.region)[0]
        centers = self.grid.centers(self.grid.cell_ids[ids])
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["cell"] + [f"x{i}" for i in range(self.grid.dimension)]
                        + ["V", "w"])
            for j, c in zip(ids, centers):
                wr.writerow([int(j)] + [f"{v:.12g}" for v in c]
                            + [f"{self.values[j]:.12g}", f"{self.margins[j]:.12g}"])

    def summary(self):
        reg = self.region
        return {
            "levels": [float(c) for c in self.levels],
            "region_cells": int(reg.sum()),
            "v_max": float(np.nanmax(self.values[reg])) if reg.any() else 0.0,
            "w_min_positive": float(self.margins[reg & ~self.morse].min())
            if (reg & ~self.morse).any() else 0.0,
            "mode": self.mode,
        }


def _region_edges(graph, region):
    C = graph.ncells
    src = np.repeat(np.arange(C), np.diff(graph.indptr))
    dst = graph.indices.astype(np.int64)
    keep = region[src]
    src, dst = src[keep], dst[keep]
    if not region[dst].all():
        raise InvariantViolationError("analysis region is not forward closed")
    return src, dst


def graph_ml_function(decomp, graph=None):
    """Strict Morse-Lyapunov field: V(M_k) = k-1 exactly, strict decrease
    along every edge leaving a non-Morse cell of the region."""
    graph = decomp.graph if graph is None else graph
    region = decomp.region
    ridx = decomp.basin_index
    if (region & (ridx == 0)).any():
        raise InvariantViolationError("region cell with no reachable Morse set")
    src, dst = _region_edges(graph, region)
    if (ridx[src] < ridx[dst]).any():
        raise InvariantViolationError("graph edge increases the Morse index")
    C = graph.ncells
    l = decomp.count
    morse = decomp.morse_mask()
    V = np.full(C, np.nan)
    quantum = np.full(C, np.nan)
    for k in range(1, l + 1):
        V[decomp.morse_sets[k - 1]] = float(k - 1)
    transient = region & ~morse
    # longest-path rank within each basin class of the transient DAG
    L = np.zeros(C, dtype=np.int64)
    L[transient] = 1
    for k in range(1, l + 1):
        cls_edges = transient[src] & transient[dst] & (ridx[src] == k) & (ridx[dst] == k)
        es, ed = src[cls_edges], dst[cls_edges]
        if (es == ed).any():
            raise InvariantViolationError("transient cell with a self loop")
        for _ in range(C):
            cand = L[ed] + 1
            cur = L[es]
            if (cand <= cur).all():
                break
            np.maximum.at(L, es, cand)
        cls = transient & (ridx == k)
        if not cls.any():
            quantum[decomp.morse_sets[k - 1]] = 1.0
            continue
        lmax = int(L[cls].max())
        eps = 1.0 / (4.0 * C)
        if 1.0 / (lmax + 1) < eps:
            raise InvariantViolationError("level grading below the strictness floor")
        V[cls] = (k - 1) + L[cls] / (lmax + 1.0)
        quantum[cls] = 1.0 / (lmax + 1.0)
        quantum[decomp.morse_sets[k - 1]] = 1.0 / (lmax + 1.0)
    # margins: smallest one-step drop; exactly 0 on Morse cells
    w = np.full(C, np.nan)
    w[region] = np.inf
    drop = V[src] - V[dst]
    trans_src = transient[src]
    if (drop[trans_src] <= 0).any():
        raise InvariantViolationError("V fails to decrease along a transient edge")
    np.minimum.at(w, src[trans_src], drop[trans_src])
    w[morse] = 0.0
    w[region & ~morse & ~np.isfinite(w)] = 0.0
    return LyapunovField(grid=graph.grid, values=V, margins=w,
                         levels=[float(k - 1) for k in range(1, l + 1)],
                         region=region, morse=morse, quantum=quantum, mode="graph")


def sublevel(fld, a):
    """Cells of the region with V <= a."""
    with np.errstate(invalid="ignore"):
        mask = fld.region & (fld.values <= a)
    return np.nonzero(mask)[0]


# ---------------------------------------------------------------------------
# sampled decrease certificate

def _interp_values(fld, X, fallback):
    """Multilinear interpolation of cell-center values at points X.

    Lattice nodes outside the region (or the box) fall back to the per-point
    fallback value, so gradients flatten instead of turning NaN at the rim.
    """
    g = fld.grid
    n = g.cells_per_axis
    X = np.clip(X, g.lo, g.hi)
    u = (X - g.lo) / g.widths - 0.5
    base = np.floor(u).astype(np.int64)
    frac = u - base
    m = g.dimension
    out = np.zeros(len(X))
    for corner in range(1 << m):
        bits = np.array([(corner >> ax) & 1 for ax in range(m)])
        idx = np.clip(base + bits, 0, n - 1)
        ids = g.ids_of(idx)
        loc = g.local_index(ids)
        vals = np.where(loc >= 0, fld.values[np.clip(loc, 0, None)], np.nan)
        vals = np.where(np.isfinite(vals), vals, fallback)
        wgt = np.prod(np.where(bits, frac, 1.0 - frac), axis=1)
        out += wgt * vals
    return out


def decrease_certificate(fld, spec, graph, n_samples, seed, tol=None):
    """Fraction of sampled points with max_{v in F(x)} grad V . v <= -w + tol.

    Samples are uniform in the region outside the Morse cells; the gradient
    is a central difference of the multilinear interpolant at pitch half a
    cell width; tol defaults to the field's level quantum at the sample
    ("one cell-width slope unit": the V-change across one cell at the
    construction's coarsest graded slope).
    """
    cand = np.nonzero(fld.region & ~fld.morse)[0]
    if len(cand) == 0:
        raise MalformedSpecError("no transient cells to sample")
    h = hash_points(seed, np.arange(n_samples, dtype=float)[:, None], 0xCE27)
    cells = cand[(uniform01(h) * len(cand)).astype(np.int64)]
    g = fld.grid
    boxes = g.boxes(g.cell_ids[cells])
    m = g.dimension
    U = np.column_stack([
        uniform01(hash_points(substream(seed, 0xF00D, ax),
                              np.arange(n_samples, dtype=float)[:, None]))
        for ax in range(m)])
    X = boxes[:, 0] + U * (boxes[:, 1] - boxes[:, 0])
    pitch = g.widths / 2.0
    fallback = fld.values[cells]
    grad = np.zeros((n_samples, m))
    for ax in range(m):
        e = np.zeros(m)
        e[ax] = pitch[ax]
        grad[:, ax] = (_interp_values(fld, X + e, fallback)
                       - _interp_values(fld, X - e, fallback)) / (2.0 * pitch[ax])
    # max of grad.v over the vertices of F(x)
    base = X @ spec.matrix.T + spec.offset
    lhs = np.einsum("ij,ij->i", grad, base)
    for coord, gain in spec.switching:
        term = grad @ gain
        s = np.sign(X[:, coord])
        on = s == 0.0
        contrib = np.where(on, np.abs(term), s * term)
        lhs = lhs + contrib
    if spec.regions:
        for r, x in enumerate(X):
            verts = evaluate(spec, x)
            lhs[r] = np.max(verts @ grad[r])
    wvals = fld.margins[cells]
    tols = fld.quantum[cells] if tol is None else np.full(n_samples, float(tol))
    margin = lhs + wvals - tols
    passed = margin <= 1e-9
    return {
        "n_samples": int(n_samples),
        "pass_fraction": float(passed.mean()),
        "worst_margin": float(margin.max()),
        "tolerance": "level-quantum" if tol is None else float(tol),
        "mean_lhs": float(lhs.mean()),
    }
