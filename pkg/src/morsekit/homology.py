"""Cubical homology: Betti numbers, critical groups, Morse inequalities.

Cell sets become full cubical complexes (every grid cell contributes its
closed cube and all faces, encoded by doubled integer coordinates). Homology
ranks are computed by shaving the chain complex with free-face collapses and
coreductions (both remove pairs with a +-1 incidence and no fill-in, hence
preserve homology over any coefficients) and then reducing the small core:
Gaussian elimination over Z/2, or integer Smith normal form, which also
reports torsion.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .errors import InvariantViolationError, MalformedSpecError
from .morse import absorb, reach_mask, dilate_mask, _as_mask

__all__ = ["CubicalComplex", "BettiVector", "MorseReport", "complex_of", "betti",
           "relative_betti", "critical_groups", "critical_groups_levelset",
           "morse_report", "attractor_neighborhood"]


# ---------------------------------------------------------------------------
# complexes

@dataclass(eq=False)
class CubicalComplex:
    """Elementary cubes of all dimensions, sorted by packed key per dimension."""
    m: int
    base: int                      # doubled-coordinate radix (2*cells_per_axis+1)
    coords: list                   # coords[q]: (n_q, m) int64 doubled coordinates
    keys: list                     # keys[q]: (n_q,) sorted uint64

    @property
    def counts(self):
        return [len(k) for k in self.keys]

    def euler_characteristic(self):
        return int(sum((-1) ** q * n for q, n in enumerate(self.counts)))


def _pack(coords, base):
    coords = np.asarray(coords, dtype=np.int64)
    key = coords[..., 0].astype(np.uint64)
    for ax in range(1, coords.shape[-1]):
        key = key * np.uint64(base) + coords[..., ax].astype(np.uint64)
    return key


def _faces_once(coords):
    """All codimension-1 faces of the given cubes (with repetitions)."""
    out = []
    m = coords.shape[1]
    for ax in range(m):
        odd = coords[:, ax] % 2 == 1
        if odd.any():
            for shift in (-1, 1):
                f = coords[odd].copy()
                f[:, ax] += shift
                out.append(f)
    if not out:
        return np.empty((0, m), dtype=np.int64)
    return np.vstack(out)


def complex_of(cells, grid):
    """Full cubical complex of a cell set (cubes plus all faces)."""
    m = grid.dimension
    base = 2 * grid.cells_per_axis + 1
    cells = np.asarray(cells, dtype=np.int64)
    if cells.dtype == bool:
        cells = np.nonzero(cells)[0]
    layers = [None] * (m + 1)
    if len(cells) == 0:
        empty = np.empty((0, m), dtype=np.int64)
        return CubicalComplex(m, base, [empty.copy() for _ in range(m + 1)],
                              [np.empty(0, np.uint64) for _ in range(m + 1)])
    top = 2 * grid.coords_of(grid.cell_ids[cells]) + 1
    k = _pack(top, base)
    order = np.argsort(k)
    layers[m] = top[order][np.concatenate([[True], np.diff(k[order]) > 0])]
    for q in range(m - 1, -1, -1):
        f = _faces_once(layers[q + 1])
        k = _pack(f, base)
        order = np.argsort(k)
        f, k = f[order], k[order]
        keep = np.concatenate([[True], np.diff(k) > 0]) if len(k) else np.zeros(0, bool)
        layers[q] = f[keep]
    keys = [_pack(c, base) if len(c) else np.empty(0, np.uint64) for c in layers]
    return CubicalComplex(m, base, layers, keys)


def _boundary_arrays(cx, rel_keys=None):
    """faces_idx[q]: (n_q, 2q) indices into dim q-1 (-1 if absent), signs[q].

    rel_keys: per-dim key arrays of a closed subcomplex to quotient out;
    faces falling in it are dropped (index -1).
    """
    faces_idx = [None] * (cx.m + 1)
    signs = [None] * (cx.m + 1)
    for q in range(1, cx.m + 1):
        D = cx.coords[q]
        n = len(D)
        fi = np.full((n, 2 * q), -1, dtype=np.int64)
        sg = np.zeros((n, 2 * q), dtype=np.int8)
        if n == 0:
            faces_idx[q], signs[q] = fi, sg
            continue
        odd = (D % 2 == 1)
        alpha = np.cumsum(odd, axis=1) - odd      # odd axes before each axis
        col = np.zeros(n, dtype=np.int64)
        for ax in range(cx.m):
            rows = np.nonzero(odd[:, ax])[0]
            if len(rows) == 0:
                continue
            s = np.where(alpha[rows, ax] % 2 == 0, 1, -1).astype(np.int8)
            for shift, orient in ((-1, -1), (1, 1)):
                f = D[rows].copy()
                f[:, ax] += shift
                fk = _pack(f, cx.base)
                pos = np.searchsorted(cx.keys[q - 1], fk)
                pos = np.clip(pos, 0, max(len(cx.keys[q - 1]) - 1, 0))
                ok = (len(cx.keys[q - 1]) > 0) & (cx.keys[q - 1][pos] == fk)
                cc = col[rows]
                fi[rows, cc] = np.where(ok, pos, -1)
                sg[rows, cc] = (orient * s).astype(np.int8)
                col[rows] += 1
        faces_idx[q], signs[q] = fi, sg
    for q in range(cx.m + 1):
        if faces_idx[q] is None:
            faces_idx[q] = np.full((len(cx.keys[q]), 0), -1, dtype=np.int64)
            signs[q] = np.zeros((len(cx.keys[q]), 0), dtype=np.int8)
    if rel_keys is not None:
        # relabel: drop cubes of the subcomplex entirely
        keep = [~np.isin(cx.keys[q], rel_keys[q]) for q in range(cx.m + 1)]
        remap = []
        for q in range(cx.m + 1):
            r = np.full(len(cx.keys[q]), -1, dtype=np.int64)
            r[keep[q]] = np.arange(int(keep[q].sum()))
            remap.append(r)
        out_fi, out_sg = [], []
        for q in range(cx.m + 1):
            fi, sg = faces_idx[q][keep[q]], signs[q][keep[q]]
            if fi.size:
                valid = fi >= 0
                fi = np.where(valid, remap[q - 1][np.clip(fi, 0, None)], -1)
                sg = np.where(fi >= 0, sg, 0)
            out_fi.append(fi)
            out_sg.append(sg)
        counts = [int(k.sum()) for k in keep]
        return out_fi, out_sg, counts
    return faces_idx, signs, [len(k) for k in cx.keys]


# ---------------------------------------------------------------------------
# shaving: free-face collapses + coreductions (no fill-in, +-1 pairs)

def _coface_csr(faces_idx, counts):
    """Per dim q-1: CSR of cofaces (dim-q cube row ids)."""
    m = len(counts) - 1
    ptr, arr = [None] * (m + 1), [None] * (m + 1)
    for q in range(1, m + 1):
        fi = faces_idx[q]
        flat = fi.ravel()
        src = np.repeat(np.arange(fi.shape[0]), fi.shape[1])
        ok = flat >= 0
        flat, src = flat[ok], src[ok]
        order = np.argsort(flat, kind="stable")
        flat, src = flat[order], src[order]
        p = np.zeros(counts[q - 1] + 1, dtype=np.int64)
        np.add.at(p, flat + 1, 1)
        np.cumsum(p, out=p)
        ptr[q - 1], arr[q - 1] = p, src
    ptr[m] = np.zeros(counts[m] + 1, dtype=np.int64)
    arr[m] = np.empty(0, dtype=np.int64)
    return ptr, arr


def _ragged_gather(ptr, arr, rows):
    lens = ptr[rows + 1] - ptr[rows]
    total = int(lens.sum())
    if total == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    seg = np.repeat(np.arange(len(rows)), lens)
    idx = np.concatenate([arr[ptr[r]:ptr[r + 1]] for r in rows])
    return seg, idx


def _shave(faces_idx, signs, counts, alive=None):
    """Remove collapse/coreduction pairs until none remain. Returns alive."""
    m = len(counts) - 1
    if alive is None:
        alive = [np.ones(c, dtype=bool) for c in counts]
    cptr, carr = _coface_csr(faces_idx, counts)
    # current counts of alive faces / cofaces
    fcnt = []
    for q in range(m + 1):
        fi = faces_idx[q]
        if fi.size:
            valid = fi >= 0
            av = np.zeros_like(valid)
            av[valid] = alive[q - 1][fi[valid]]
            fcnt.append((valid & av).sum(axis=1).astype(np.int64))
        else:
            fcnt.append(np.zeros(counts[q], dtype=np.int64))
    ccnt = []
    for q in range(m + 1):
        if counts[q] == 0:
            ccnt.append(np.zeros(0, dtype=np.int64))
            continue
        seg, idx = _ragged_gather(cptr[q], carr[q], np.arange(counts[q]))
        c = np.zeros(counts[q], dtype=np.int64)
        if len(seg):
            np.add.at(c, seg, alive[q + 1][idx].astype(np.int64))
        ccnt.append(c)

    def kill(q, rows):
        alive[q][rows] = False
        fi = faces_idx[q][rows]
        if fi.size:
            v = fi[fi >= 0]
            np.add.at(ccnt[q - 1], v, -1)
        seg, idx = _ragged_gather(cptr[q], carr[q], rows)
        if len(idx):
            np.add.at(fcnt[q + 1], idx, -1)

    changed = True
    while changed:
        changed = False
        # coreduction: b (dim q) whose unique alive face is a (dim q-1)
        for q in range(1, m + 1):
            cand = np.nonzero(alive[q] & (fcnt[q] == 1))[0]
            if len(cand) == 0:
                continue
            fi = faces_idx[q][cand]
            msk = (fi >= 0)
            msk[msk] = alive[q - 1][fi[msk]]
            a = fi[np.arange(len(cand)), np.argmax(msk, axis=1)]
            _, first = np.unique(a, return_index=True)
            b_sel, a_sel = cand[first], a[first]
            kill(q, b_sel)
            kill(q - 1, a_sel)
            changed = True
        # collapse: a (dim q) whose unique alive coface is b (dim q+1)
        for q in range(m):
            cand = np.nonzero(alive[q] & (ccnt[q] == 1))[0]
            if len(cand) == 0:
                continue
            seg, idx = _ragged_gather(cptr[q], carr[q], cand)
            ok = alive[q + 1][idx]
            seg, idx = seg[ok], idx[ok]
            first = np.unique(seg, return_index=True)[1]
            a_rows, b_rows = cand[seg[first]], idx[first]
            _, bfirst = np.unique(b_rows, return_index=True)
            a_rows, b_rows = a_rows[bfirst], b_rows[bfirst]
            kill(q + 1, b_rows)
            kill(q, a_rows)
            changed = True
    return alive


# ---------------------------------------------------------------------------
# core matrix reductions

def _core_matrix(faces_idx, signs, alive, q):
    """Dense int matrix of the boundary dim q -> q-1 on the shaved core."""
    rows = np.nonzero(alive[q - 1])[0]
    cols = np.nonzero(alive[q])[0]
    rmap = np.full(len(alive[q - 1]), -1, dtype=np.int64)
    rmap[rows] = np.arange(len(rows))
    M = np.zeros((len(rows), len(cols)), dtype=np.int64)
    fi = faces_idx[q][cols]
    sg = signs[q][cols]
    for j in range(fi.shape[1]):
        f = fi[:, j]
        ok = f >= 0
        ok[ok] = alive[q - 1][f[ok]]
        cc = np.nonzero(ok)[0]
        M[rmap[f[cc]], cc] += sg[cc, j]
    return M


def _rank_gf2(M):
    A = (np.asarray(M) % 2).astype(np.uint8)
    r = 0
    rows, cols = A.shape
    for c in range(cols):
        if r >= rows:
            break
        piv = np.nonzero(A[r:, c])[0]
        if len(piv) == 0:
            continue
        p = r + piv[0]
        if p != r:
            A[[r, p]] = A[[p, r]]
        hit = np.nonzero(A[:, c])[0]
        hit = hit[hit != r]
        A[hit] ^= A[r]
        r += 1
    return r


def _smith_diagonal(M):
    """Nonzero diagonal of an integer diagonalization of M, as a divisibility
    chain (invariant factors). Magnitude-controlled pivoting, python ints."""
    from math import gcd
    M = np.asarray(M)
    A = [[int(v) for v in row] for row in M] if M.size else []
    rows = len(A)
    cols = len(A[0]) if rows else 0
    diag = []
    top = 0
    while top < min(rows, cols):
        best, piv = None, None
        for i in range(top, rows):
            Ai = A[i]
            for j in range(top, cols):
                v = Ai[j]
                if v and (best is None or abs(v) < best):
                    best, piv = abs(v), (i, j)
        if piv is None:
            break
        i0, j0 = piv
        A[top], A[i0] = A[i0], A[top]
        if j0 != top:
            for row in A:
                row[top], row[j0] = row[j0], row[top]
        while True:
            p = A[top][top]
            dirty = False
            for i in range(top + 1, rows):
                if A[i][top]:
                    q = round(A[i][top] / p)
                    if q:
                        Ai, At = A[i], A[top]
                        for j in range(top, cols):
                            Ai[j] -= q * At[j]
                    if A[i][top]:
                        A[top], A[i] = A[i], A[top]
                        dirty = True
                        p = A[top][top]
            for j in range(top + 1, cols):
                if A[top][j]:
                    q = round(A[top][j] / p)
                    if q:
                        for i in range(top, rows):
                            A[i][j] -= q * A[i][top]
                    if A[top][j]:
                        for i in range(top, rows):
                            A[i][top], A[i][j] = A[i][j], A[i][top]
                        dirty = True
                        p = A[top][top]
            if not dirty:
                break
        diag.append(abs(A[top][top]))
        top += 1
    d = [v for v in diag if v]
    for i in range(len(d)):
        for j in range(i + 1, len(d)):
            g = gcd(d[i], d[j])
            d[i], d[j] = g, d[i] * d[j] // g
    return d


@dataclass(eq=False)
class BettiVector:
    ranks: tuple
    coefficients: str = "z2"         # "z2" | "int"
    torsion: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "ranks", tuple(int(r) for r in self.ranks))

    def __eq__(self, other):
        return (self.ranks == tuple(other.ranks)
                and self.coefficients == other.coefficients)

    def to_list(self):
        return list(self.ranks)


def _betti_from_core(faces_idx, signs, alive, m, coefficients):
    counts = [int(a.sum()) for a in alive]
    ranks_bd = [0] * (m + 2)
    torsion = {}
    for q in range(1, m + 1):
        if counts[q] == 0 or counts[q - 1] == 0:
            continue
        M = _core_matrix(faces_idx, signs, alive, q)
        if coefficients == "z2":
            ranks_bd[q] = _rank_gf2(M)
        else:
            d = _smith_diagonal(M)
            ranks_bd[q] = len(d)
            tors = [int(v) for v in d if abs(v) > 1]
            if tors:
                torsion[q - 1] = tors
    betti_q = [counts[q] - ranks_bd[q] - ranks_bd[q + 1] for q in range(m + 1)]
    return betti_q, torsion


def _vertex_labels(cx):
    """Connected-component label per 0-cube (via the vertex-edge graph)."""
    n0 = len(cx.keys[0])
    if cx.m < 1 or len(cx.keys[1]) == 0:
        return np.arange(n0)
    E = cx.coords[1]
    ends = []
    for shift in (-1, 1):
        f = E.copy()
        odd_ax = np.argmax(f % 2 == 1, axis=1)
        f[np.arange(len(f)), odd_ax] += shift
        ends.append(np.searchsorted(cx.keys[0], _pack(f, cx.base)))
    g = coo_matrix((np.ones(len(E)), (ends[0], ends[1])), shape=(n0, n0))
    _, labels = connected_components(g, directed=False)
    return labels


def betti(cx, coefficients="z2"):
    """Betti vector (beta_0..beta_m) of an absolute cubical complex."""
    m = cx.m
    if len(cx.keys[0]) == 0:
        return BettiVector((0,) * (m + 1), coefficients)
    labels = _vertex_labels(cx)
    ncomp = int(labels.max()) + 1
    faces_idx, signs, counts = _boundary_arrays(cx)
    # puncture one vertex per component, then shave the rest
    alive = [np.ones(c, dtype=bool) for c in counts]
    first = np.unique(labels, return_index=True)[1]
    alive[0][first] = False
    alive = _shave(faces_idx, signs, counts, alive)
    bq, torsion = _betti_from_core(faces_idx, signs, alive, m, coefficients)
    if bq[0] != 0:
        raise InvariantViolationError("punctured complex kept degree-0 homology")
    bq[0] = ncomp
    return BettiVector(tuple(bq), coefficients, torsion)


def relative_betti(w_cells, u_cells, grid, coefficients="z2"):
    """Ranks of H_*(W, U) via the quotient boundary complex."""
    W = complex_of(w_cells, grid)
    U = complex_of(u_cells, grid)
    for q in range(grid.dimension + 1):
        if not np.isin(U.keys[q], W.keys[q]).all():
            raise MalformedSpecError("U is not a subset of W")
    if len(U.keys[0]) == 0:
        return betti(W, coefficients)
    faces_idx, signs, counts = _boundary_arrays(W, rel_keys=U.keys)
    alive = _shave(faces_idx, signs, counts)
    bq, torsion = _betti_from_core(faces_idx, signs, alive, W.m, coefficients)
    return BettiVector(tuple(bq), coefficients, torsion)


# ---------------------------------------------------------------------------
# critical groups of Morse sets

def attractor_neighborhood(decomp, k, slack_rings=1):
    """Forward-invariant (modulo slack) cell neighborhood of A_k.

    Absorbing-set iteration from the filtration set A_k, restricted to cells
    that cannot reach any Morse set outside A_k (a true attractor neighborhood
    lies in the basin of A_k).
    """
    graph = decomp.graph
    if k == 0:
        return np.zeros(graph.ncells, dtype=bool)
    A = decomp.filtration[k - 1]
    bad = np.zeros(graph.ncells, dtype=bool)
    for j in range(k, decomp.count):
        bad |= reach_mask(graph, decomp.morse_mask(j + 1), backward=True)
    within = decomp.region & ~bad
    return absorb(graph, A & decomp.region, slack_rings=slack_rings,
                  within_mask=within)


def critical_groups(decomp, k, grid=None, coefficients="z2"):
    """Ranks of C_*(M_k) = H_*(W, U) for attractor neighborhood pairs.

    Computed twice with independently constructed pairs (1 and 2 dilation
    rings of slack); unequal ranks raise InvariantViolationError.
    """
    if not (1 <= k <= decomp.count):
        raise MalformedSpecError("Morse index out of range")
    grid = decomp.graph.grid if grid is None else grid
    results = []
    for slack in (1, 2):
        W = attractor_neighborhood(decomp, k, slack)
        U = attractor_neighborhood(decomp, k - 1, slack)
        if (U & ~W).any():
            raise InvariantViolationError("neighborhood pair is not nested")
        bv = relative_betti(np.nonzero(W)[0], np.nonzero(U)[0], grid, coefficients)
        results.append(bv)
    if results[0] != results[1]:
        raise InvariantViolationError(
            f"critical groups depend on the neighborhood pair: "
            f"{results[0].ranks} vs {results[1].ranks}")
    return results[0]


def critical_groups_levelset(fld, a, b, grid=None, coefficients="z2"):
    """Ranks of H_*(V_b, V_a) for a window isolating exactly one Morse level."""
    from .lyapunov import sublevel
    if not a < b:
        raise MalformedSpecError("need a < b")
    inside = [k for k, c in enumerate(fld.levels, start=1) if a < c < b]
    if len(inside) != 1:
        raise MalformedSpecError(
            f"window ({a}, {b}) isolates {len(inside)} Morse levels, need exactly 1")
    grid = fld.grid if grid is None else grid
    Wb = sublevel(fld, b)
    Ua = sublevel(fld, a)
    return relative_betti(Wb, Ua, grid, coefficients)


# ---------------------------------------------------------------------------
# Morse inequalities and equation

@dataclass(eq=False)
class MorseReport:
    morse_type_numbers: list
    betti_numbers: list
    critical_group_ranks: list      # per Morse set
    q_polynomial: list
    inequalities_pass: bool
    equation_pass: bool
    torsion: dict
    coefficients: str

    def poincare_polynomial(self):
        return list(self.betti_numbers)

    def morse_polynomial(self):
        return list(self.morse_type_numbers)

    def to_json_dict(self):
        return {
            "morse_type_numbers": [int(v) for v in self.morse_type_numbers],
            "betti": [int(v) for v in self.betti_numbers],
            "critical_groups": [[int(v) for v in row]
                                for row in self.critical_group_ranks],
            "Q": [int(v) for v in self.q_polynomial],
            "inequalities_pass": bool(self.inequalities_pass),
            "equation_pass": bool(self.equation_pass),
            "torsion": {str(k): v for k, v in self.torsion.items()},
            "coefficients": self.coefficients,
        }


def _divide_by_one_plus_t(c):
    """Coefficients of (sum c_q t^q) / (1+t); returns (gamma, remainder)."""
    gamma = []
    acc = 0
    for q, cq in enumerate(c):
        g = cq - acc
        gamma.append(g)
        acc = g
    rem = gamma.pop() if gamma else 0
    return gamma, rem


def morse_report(decomp, fld, region, coefficients="z2"):
    """Morse type numbers, Betti numbers of the region, inequality checks."""
    grid = decomp.graph.grid
    m = grid.dimension
    cgs = []
    for k in range(1, decomp.count + 1):
        cgs.append(critical_groups(decomp, k, grid, coefficients))
    mq = [sum(cg.ranks[q] for cg in cgs) for q in range(m + 1)]
    region_mask = _as_mask(decomp.graph, region)
    bv = betti(complex_of(np.nonzero(region_mask)[0], grid), coefficients)
    bq = list(bv.ranks)
    ineq = True
    for q in range(m + 1):
        lhs = sum((-1) ** (q - j) * mq[j] for j in range(q + 1))
        rhs = sum((-1) ** (q - j) * bq[j] for j in range(q + 1))
        if lhs < rhs:
            ineq = False
    euler = sum((-1) ** q * (mq[q] - bq[q]) for q in range(m + 1)) == 0
    diff = [mq[q] - bq[q] for q in range(m + 1)]
    gamma, rem = _divide_by_one_plus_t(diff)
    q_ok = rem == 0 and all(g >= 0 for g in gamma)
    torsion = {}
    for k, cg in enumerate(cgs, start=1):
        if cg.torsion:
            torsion[k] = {q: t for q, t in cg.torsion.items()}
    if bv.torsion:
        torsion["region"] = bv.torsion
    return MorseReport(
        morse_type_numbers=mq,
        betti_numbers=bq,
        critical_group_ranks=[list(cg.ranks) for cg in cgs],
        q_polynomial=gamma,
        inequalities_pass=bool(ineq and q_ok),
        equation_pass=bool(euler and rem == 0),
        torsion=torsion,
        coefficients=coefficients,
    )
