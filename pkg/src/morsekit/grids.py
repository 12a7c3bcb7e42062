"""Cubical grids over a state-space box and outer transition graphs.

A grid covers the box with 2^depth cells per axis. The transition graph of
the time-tau map sends every cell to the cells covered by the rho-bloated
endpoints of sampled trajectories (corner/center/extra points per cell, one
or more selections per point). Covering uses closed cell boxes, so an image
point on a grid face covers every adjacent cell; images leaving the box (or
the active region of a restricted grid) are routed to a virtual exit sink.
"""

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ._rng import hash_points, uniform01, substream
from .errors import MalformedSpecError
from .flows import integrate_batch
from .maps import Selection, make_selection

__all__ = ["CubicalGrid", "TransitionGraph", "build_graph", "subdivide", "suggest_tau"]


@dataclass(frozen=True, eq=False)
class CubicalGrid:
    lo: np.ndarray
    hi: np.ndarray
    depth: int
    active: Optional[np.ndarray] = None   # sorted global flat ids, or None

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float)
        hi = np.asarray(self.hi, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1 or not (hi > lo).all():
            raise MalformedSpecError("empty or malformed box")
        if self.depth < 0 or self.depth > 20:
            raise MalformedSpecError("unreasonable depth")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)
        if self.active is not None:
            a = np.unique(np.asarray(self.active, dtype=np.int64))
            object.__setattr__(self, "active", a)

    # -- geometry -----------------------------------------------------------
    @property
    def dimension(self):
        return len(self.lo)

    @property
    def cells_per_axis(self):
        return 1 << self.depth

    @property
    def widths(self):
        return (self.hi - self.lo) / self.cells_per_axis

    @property
    def ncells(self):
        if self.active is not None:
            return len(self.active)
        return self.cells_per_axis ** self.dimension

    @property
    def cell_ids(self):
        """Global flat ids of the cells of this grid."""
        if self.active is not None:
            return self.active
        return np.arange(self.ncells, dtype=np.int64)

    def coords_of(self, ids):
        """Global flat ids -> integer coordinates (N, m)."""
        ids = np.asarray(ids, dtype=np.int64)
        n = self.cells_per_axis
        m = self.dimension
        out = np.empty(ids.shape + (m,), dtype=np.int64)
        rem = ids
        for ax in range(m - 1, -1, -1):
            out[..., ax] = rem % n
            rem = rem // n
        return out

    def ids_of(self, coords):
        coords = np.asarray(coords, dtype=np.int64)
        n = self.cells_per_axis
        ids = coords[..., 0]
        for ax in range(1, self.dimension):
            ids = ids * n + coords[..., ax]
        return ids

    def centers(self, ids):
        return self.lo + (self.coords_of(ids) + 0.5) * self.widths

    def boxes(self, ids):
        """(N, 2, m) lower/upper corners of cells."""
        c = self.coords_of(ids)
        lo = self.lo + c * self.widths
        return np.stack([lo, lo + self.widths], axis=1)

    def locate(self, points):
        """Points -> (global ids, inside mask). Boundary points clip inward."""
        P = np.atleast_2d(np.asarray(points, dtype=float))
        u = (P - self.lo) / self.widths
        inside = ((P >= self.lo) & (P <= self.hi)).all(axis=1)
        idx = np.clip(np.floor(u).astype(np.int64), 0, self.cells_per_axis - 1)
        return self.ids_of(idx), inside

    def local_index(self, ids):
        """Global ids -> positions 0..ncells-1 (-1 if not active)."""
        ids = np.asarray(ids, dtype=np.int64)
        if self.active is None:
            return ids.copy()
        pos = np.searchsorted(self.active, ids)
        pos = np.clip(pos, 0, len(self.active) - 1)
        ok = self.active[pos] == ids
        return np.where(ok, pos, -1)

    def sample_points(self, ids, points_per_cell, seed):
        """(N, P, m) deterministic sample points per cell.

        Always the center; corners when points_per_cell >= 2^m + 1 (partial
        corner lists for smaller counts); hashed interior points beyond.
        """
        m = self.dimension
        N = len(ids)
        P = int(points_per_cell)
        if P < 1:
            raise MalformedSpecError("points_per_cell must be >= 1")
        boxes = self.boxes(ids)
        pts = np.empty((N, P, m))
        pts[:, 0, :] = 0.5 * (boxes[:, 0] + boxes[:, 1])
        ncorners = 1 << m
        take = min(P - 1, ncorners)
        for j in range(take):
            bits = np.array([(j >> ax) & 1 for ax in range(m)])
            pts[:, 1 + j, :] = np.where(bits, boxes[:, 1], boxes[:, 0])
        for j in range(1 + take, P):
            h = np.column_stack([
                uniform01(hash_points(substream(seed, 0x5A17, j, ax),
                                      ids.astype(float)[:, None]))
                for ax in range(m)])
            pts[:, j, :] = boxes[:, 0] + h * (boxes[:, 1] - boxes[:, 0])
        return pts

    def cover(self, points, rho):
        """Cells intersected by the closed sup-norm rho-box around each point.

        Returns (point_index, global cell id) pairs and a per-point exit mask
        (bloated box not contained in the grid box / active set).
        """
        P = np.atleast_2d(np.asarray(points, dtype=float))
        N, m = P.shape
        w = self.widths
        n = self.cells_per_axis
        lo_u = (P - rho - self.lo) / w
        hi_u = (P + rho - self.lo) / w
        exit_mask = (lo_u < 0).any(axis=1) | (hi_u > n).any(axis=1)
        k0 = np.floor(lo_u).astype(np.int64)
        k0 = np.where(lo_u == k0, k0 - 1, k0)     # closed-box face touch
        k1 = np.floor(hi_u).astype(np.int64)
        k0c = np.clip(k0, 0, n - 1)
        k1c = np.clip(k1, 0, n - 1)
        counts = k1c - k0c + 1
        maxc = counts.max(axis=0)
        offs = np.stack(np.meshgrid(*[np.arange(int(c)) for c in maxc],
                                    indexing="ij"), axis=-1).reshape(-1, m)
        coords = k0c[:, None, :] + offs[None, :, :]
        valid = (offs[None, :, :] < counts[:, None, :]).all(axis=2)
        ids = self.ids_of(coords)
        pt_idx = np.broadcast_to(np.arange(N)[:, None], ids.shape)
        ids = ids[valid]
        pt_idx = pt_idx[valid]
        if self.active is not None:
            lp = self.local_index(ids)
            missing = lp < 0
            if missing.any():
                exit_mask = exit_mask.copy()
                exit_mask[pt_idx[missing]] = True
                ids = ids[~missing]
                pt_idx = pt_idx[~missing]
        return pt_idx, ids, exit_mask

    def to_dict(self):
        return {"lo": self.lo.tolist(), "hi": self.hi.tolist(), "depth": self.depth,
                "active": None if self.active is None else self.active.tolist()}

    @classmethod
    def from_dict(cls, d):
        act = d.get("active")
        return cls(np.asarray(d["lo"], float), np.asarray(d["hi"], float),
                   int(d["depth"]), None if act is None else np.asarray(act, np.int64))


@dataclass(eq=False)
class TransitionGraph:
    """Outer approximation of the time-tau reachability relation on cells."""
    grid: CubicalGrid
    indptr: np.ndarray            # (C+1,) int64, CSR over local cell positions
    indices: np.ndarray           # (E,) int32 local cell positions
    exit: np.ndarray              # (C,) bool: some bloated image leaves the grid
    meta: dict = field(default_factory=dict)

    _csr_cache: object = field(default=None, repr=False, compare=False)

    @property
    def ncells(self):
        return len(self.indptr) - 1

    @property
    def nedges(self):
        return len(self.indices)

    def out_neighbors(self, local_id):
        return self.indices[self.indptr[local_id]:self.indptr[local_id + 1]]

    def csr(self):
        if self._csr_cache is None:
            from scipy.sparse import csr_matrix
            C = self.ncells
            data = np.ones(len(self.indices), dtype=np.int8)
            self._csr_cache = csr_matrix(
                (data, self.indices.astype(np.int64), self.indptr), shape=(C, C))
        return self._csr_cache

    def out_degree(self):
        return np.diff(self.indptr)

    def self_loops(self):
        """Boolean mask of cells with a self edge."""
        C = self.ncells
        out = np.zeros(C, dtype=bool)
        src = np.repeat(np.arange(C), np.diff(self.indptr))
        out[src[src == self.indices]] = True
        return out

    # -- persistence: binary edge list with a JSON header --------------------
    def save(self, path):
        path = Path(path)
        header = {
            "format": "morsekit-transition-graph-v1",
            "grid": self.grid.to_dict(),
            "ncells": int(self.ncells),
            "nedges": int(self.nedges),
            "meta": self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True))
        with open(path.with_suffix(".bin"), "wb") as fh:
            fh.write(self.indptr.astype("<i8").tobytes())
            fh.write(self.indices.astype("<i4").tobytes())
            fh.write(self.exit.astype(np.uint8).tobytes())

    @classmethod
    def load(cls, path):
        path = Path(path)
        header = json.loads(path.with_suffix(".json").read_text())
        if header.get("format") != "morsekit-transition-graph-v1":
            raise MalformedSpecError("not a transition graph file")
        grid = CubicalGrid.from_dict(header["grid"])
        C, E = header["ncells"], header["nedges"]
        raw = Path(path.with_suffix(".bin")).read_bytes()
        o1 = 8 * (C + 1)
        o2 = o1 + 4 * E
        indptr = np.frombuffer(raw[:o1], dtype="<i8").copy()
        indices = np.frombuffer(raw[o1:o2], dtype="<i4").copy()
        exit_ = np.frombuffer(raw[o2:o2 + C], dtype=np.uint8).astype(bool)
        return cls(grid, indptr, indices, exit_, header["meta"])


def _ball_points(X, seed, tag):
    """Deterministic unit-ball point per row (direction and radius hashed)."""
    from scipy.special import ndtri
    m = X.shape[1]
    cols = [uniform01(hash_points(substream(seed, 0x0FF5, tag, j), X))
            for j in range(m + 1)]
    g = ndtri(np.clip(np.column_stack(cols[:m]), 1e-12, 1 - 1e-12))
    nrm = np.linalg.norm(g, axis=1, keepdims=True)
    nrm[nrm == 0] = 1.0
    return g / nrm * (cols[m] ** (1.0 / m))[:, None]


def suggest_tau(spec, steps_per_tau=10):
    """tau making the fastest linear mode contract by about one half."""
    ev = np.linalg.eigvals(spec.matrix)
    rate = float(np.abs(ev.real).max())
    if rate <= 0:
        return 1.0
    return float(np.log(2.0) / rate)


def _selection_list(count, seed):
    """Default selection set: centroid, sliding, then random convex picks.

    The sliding selection keeps trajectories on switching surfaces wherever
    staying is admissible; without it the outer graph misses the solutions
    that approach surface-bound Morse sets.
    """
    sels = [Selection("centroid", seed=seed, index=0)]
    if count >= 2:
        sels.append(Selection("sliding", seed=seed, index=1))
    for j in range(2, int(count)):
        sels.append(Selection("random-convex", seed=seed, index=j))
    return sels


def build_graph(spec, grid, tau, sampling, rho, steps_per_tau=10,
                inflation_delta=0.0, threads=1, chunk_cells=8192):
    """Outer transition graph of the time-tau flow of spec on grid.

    sampling: {"points_per_cell": int, "selections_per_point": int, "seed": int}.
    rho >= 0 bloats image points in the sup norm before covering.
    """
    if tau <= 0 or rho < 0:
        raise MalformedSpecError("need tau > 0 and rho >= 0")
    ppc = int(sampling["points_per_cell"])
    spp = int(sampling["selections_per_point"])
    seed = int(sampling["seed"])
    if ppc < 1 or spp < 1:
        raise MalformedSpecError("sampling counts must be >= 1")
    sels = _selection_list(spp, seed)
    fields = [make_selection(spec, s) for s in sels]
    cells = grid.cell_ids
    C = grid.ncells
    chunks = [cells[i:i + chunk_cells] for i in range(0, C, chunk_cells)]
    offsets = list(range(0, C, chunk_cells))

    def work(args):
        off, ids = args
        pts = grid.sample_points(ids, ppc, seed)
        flat = pts.reshape(-1, grid.dimension)
        nloc = len(ids)
        src_local = np.repeat(np.arange(off, off + nloc, dtype=np.int64), ppc)
        pair_list = []
        exit_local = np.zeros(nloc, dtype=bool)
        for jsel, f in enumerate(fields):
            vel_off = None
            if inflation_delta:
                # constant admissible ball offset per trajectory
                vel_off = inflation_delta * _ball_points(flat, seed, jsel)
            ends, diverged = integrate_batch(f, flat, tau, steps_per_tau,
                                             offset=vel_off)
            pt_idx, cov_ids, ex = grid.cover(ends, rho)
            ex = ex | diverged
            exit_local |= np.bincount(src_local[ex] - off, minlength=nloc) > 0
            keep = ~diverged[pt_idx]
            dst_local = grid.local_index(cov_ids[keep])
            pairs = src_local[pt_idx[keep]] * np.int64(C) + dst_local
            pair_list.append(np.unique(pairs))
        return off, np.unique(np.concatenate(pair_list)), exit_local

    results = []
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(work, zip(offsets, chunks)))
    else:
        results = [work(a) for a in zip(offsets, chunks)]
    results.sort(key=lambda r: r[0])
    exit_mask = np.concatenate([r[2] for r in results]) if results else np.zeros(0, bool)
    pairs = np.concatenate([r[1] for r in results]) if results else np.zeros(0, np.int64)
    src = (pairs // C).astype(np.int64)
    dst = (pairs % C).astype(np.int32)
    indptr = np.zeros(C + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    np.cumsum(indptr, out=indptr)
    meta = {"tau": float(tau), "steps_per_tau": int(steps_per_tau), "rho": float(rho),
            "points_per_cell": ppc, "selections_per_point": spp, "seed": seed,
            "inflation_delta": float(inflation_delta)}
    return TransitionGraph(grid, indptr, dst, exit_mask, meta)


def subdivide(graph, cells):
    """Refined grid (depth+1) restricted to the given cells' boxes."""
    grid = graph.grid if isinstance(graph, TransitionGraph) else graph
    cells = np.asarray(cells, dtype=np.int64)
    if cells.size == 0:
        raise MalformedSpecError("cannot subdivide an empty cell set")
    coords = grid.coords_of(cells)
    m = grid.dimension
    shifts = np.stack(np.meshgrid(*([np.arange(2)] * m), indexing="ij"),
                      axis=-1).reshape(-1, m)
    children = (2 * coords)[:, None, :] + shifts[None, :, :]
    fine = CubicalGrid(grid.lo, grid.hi, grid.depth + 1)
    ids = fine.ids_of(children.reshape(-1, m))
    return CubicalGrid(grid.lo, grid.hi, grid.depth + 1, active=np.unique(ids))
