"""Set-valued right-hand sides x' in F(x) and their basic constructions.

F is described as an affine part A x + c, plus switching terms g * Sgn(x_i)
(Sgn(0) = [-1, 1]), plus optional general piecewise regions. Values are
convex polytopes kept in V-representation (finite vertex lists), which is
adequate in the low dimensions this package targets (m <= 4).
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Optional

import numpy as np
from scipy.optimize import nnls
from scipy.spatial import ConvexHull, QhullError

from ._rng import hash_points, uniform01, substream
from .errors import DimensionMismatchError, MalformedSpecError, ResolutionError

__all__ = [
    "SetValuedMapSpec", "Region", "InflationParams", "Selection", "SelectionField",
    "evaluate", "inflate", "make_selection", "lipschitz_approximation",
    "membership", "project_onto_polytope", "ball_outer_polytope",
]


# ---------------------------------------------------------------------------
# polytope helpers (V-representation)

def unique_rows(verts):
    verts = np.atleast_2d(np.asarray(verts, dtype=float))
    return np.unique(verts, axis=0)


def hull_prune(verts):
    """Drop non-extreme points. Falls back to unique rows on degenerate input."""
    verts = unique_rows(verts)
    if verts.shape[1] == 1:
        return np.array([[verts.min()], [verts.max()]]) if len(verts) > 1 else verts
    if len(verts) <= verts.shape[1] + 1:
        return verts
    try:
        h = ConvexHull(verts)
        return verts[np.sort(h.vertices)]
    except QhullError:
        return verts


def _simplex_weights(verts, target, big=1e7):
    """NNLS weights lam >= 0, sum lam = 1 minimizing |verts.T lam - target|."""
    V = np.asarray(verts, dtype=float)
    t = np.asarray(target, dtype=float)
    scale = max(1.0, np.abs(V).max(), np.abs(t).max())
    A = np.vstack([V.T / scale, np.full((1, len(V)), big)])
    b = np.concatenate([t / scale, [big]])
    lam, _ = nnls(A, b)
    s = lam.sum()
    if s <= 0:
        lam = np.full(len(V), 1.0 / len(V))
    else:
        lam = lam / s
    return lam


def project_onto_polytope(verts, target):
    """Euclidean projection of target onto conv(verts)."""
    verts = np.atleast_2d(np.asarray(verts, dtype=float))
    if len(verts) == 1:
        return verts[0].copy()
    lam = _simplex_weights(verts, target)
    return verts.T @ lam


def membership(verts, point, tol=1e-9):
    """Whether point lies in conv(verts) within convex-combination round-off."""
    p = project_onto_polytope(verts, point)
    scale = max(1.0, float(np.abs(np.asarray(verts)).max()))
    return float(np.linalg.norm(p - np.asarray(point, dtype=float))) <= tol * scale


def _sphere_directions(m, n):
    if m == 1:
        return np.array([[-1.0], [1.0]])
    if m == 2:
        th = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
        return np.column_stack([np.cos(th), np.sin(th)])
    if m == 3:
        # Fibonacci sphere
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        th = np.pi * (1 + 5 ** 0.5) * i
        return np.column_stack([np.cos(th) * np.sin(phi),
                                np.sin(th) * np.sin(phi), np.cos(phi)])
    # m >= 4: hashed quasi-random directions plus the cross-polytope corners
    u = uniform01(np.reshape(hash_points(797, np.arange(n * m, dtype=float)[:, None]), (n, m)))
    from scipy.special import ndtri
    g = ndtri(np.clip(u, 1e-12, 1 - 1e-12))
    g = np.vstack([g, np.vstack([np.eye(m), -np.eye(m)])])
    return g / np.linalg.norm(g, axis=1, keepdims=True)


@lru_cache(maxsize=None)
def _ball_outer_cached(m, slack_key):
    slack = slack_key / 1e6
    if m == 1:
        return np.array([[-1.0], [1.0]])
    n = {2: 8, 3: 32, 4: 256}.get(m, 256)
    for _ in range(12):
        dirs = _sphere_directions(m, n)
        hull = ConvexHull(dirs)
        # facet equations n.x + b <= 0 with |n| = 1; inradius = min(-b)
        inr = float(np.min(-hull.equations[:, -1]))
        if inr > 0 and 1.0 / inr <= 1.0 + slack:
            scale = 1.0 / inr
            return dirs[np.sort(hull.vertices)] * scale
        n *= 2
    raise ResolutionError(f"cannot build outer ball polytope for m={m}, slack={slack}")


def ball_outer_polytope(m, slack=0.05):
    """Vertices V with unit ball subset conv(V) subset (1+slack) unit ball."""
    return _ball_outer_cached(m, int(round(slack * 1e6))).copy()


# ---------------------------------------------------------------------------
# map specification

@dataclass(frozen=True)
class Region:
    """General piecewise term: additive polytope value on a predicate region."""
    contains: Callable[[np.ndarray], bool]
    vertices: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class SetValuedMapSpec:
    """Affine + switching (+ optional piecewise) description of F."""
    dimension: int
    matrix: np.ndarray
    offset: np.ndarray
    switching: tuple = ()          # tuple of (coord_index, gain_vector)
    regions: tuple = ()            # tuple of Region

    def __post_init__(self):
        A = np.asarray(self.matrix, dtype=float)
        c = np.asarray(self.offset, dtype=float)
        m = self.dimension
        if A.shape != (m, m) or c.shape != (m,):
            raise MalformedSpecError("matrix/offset shape does not match dimension")
        if not (np.isfinite(A).all() and np.isfinite(c).all()):
            raise MalformedSpecError("non-finite entries in affine part")
        sw = []
        for coord, gain in self.switching:
            gain = np.asarray(gain, dtype=float)
            if not (0 <= int(coord) < m) or gain.shape != (m,):
                raise MalformedSpecError("bad switching term")
            sw.append((int(coord), gain))
        object.__setattr__(self, "matrix", A)
        object.__setattr__(self, "offset", c)
        object.__setattr__(self, "switching", tuple(sw))

    # -- serialization ------------------------------------------------------
    def to_dict(self):
        if self.regions:
            raise MalformedSpecError("piecewise regions are not serializable")
        return {
            "matrix": self.matrix.tolist(),
            "offset": self.offset.tolist(),
            "switching": [{"coord": i, "gain": g.tolist()} for i, g in self.switching],
        }

    @classmethod
    def from_dict(cls, d):
        A = np.asarray(d["matrix"], dtype=float)
        m = A.shape[0]
        return cls(
            dimension=m,
            matrix=A,
            offset=np.asarray(d.get("offset", np.zeros(m)), dtype=float),
            switching=tuple((t["coord"], np.asarray(t["gain"], dtype=float))
                            for t in d.get("switching", [])),
        )

    @property
    def gain_matrix(self):
        """(T, m) stack of switching gains."""
        if not self.switching:
            return np.zeros((0, self.dimension))
        return np.vstack([g for _, g in self.switching])

    @property
    def switch_coords(self):
        return np.array([i for i, _ in self.switching], dtype=int)


@dataclass(frozen=True)
class InflationParams:
    """Radius of the inflated system con F(x + delta B) + delta B."""
    delta: float
    slack: float = 0.05

    def __post_init__(self):
        if self.delta < 0:
            raise MalformedSpecError("inflation radius must be nonnegative")


def _check_point(spec, x):
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dimension,):
        raise DimensionMismatchError(f"point shape {x.shape} vs dimension {spec.dimension}")
    if not np.isfinite(x).all():
        raise DimensionMismatchError("non-finite point")
    return x


def evaluate(spec, x):
    """Vertex list of F(x). Singleton off all switching surfaces."""
    x = _check_point(spec, x)
    base = spec.matrix @ x + spec.offset
    verts = base[None, :]
    for coord, gain in spec.switching:
        xi = x[coord]
        if xi > 0:
            verts = verts + gain
        elif xi < 0:
            verts = verts - gain
        else:
            verts = np.vstack([verts - gain, verts + gain])
    if spec.regions:
        covering = [r for r in spec.regions if r.contains(x)]
        if not covering:
            raise MalformedSpecError("no piecewise region covers the point")
        rverts = np.vstack([np.atleast_2d(np.asarray(r.vertices(x), dtype=float))
                            for r in covering])
        verts = (verts[:, None, :] + rverts[None, :, :]).reshape(-1, spec.dimension)
    return unique_rows(verts)


def inflate(spec, params, x):
    """Outer polytope of con F(x + delta B1) + delta B1 (within params.slack)."""
    x = _check_point(spec, x)
    d = float(params.delta)
    if d == 0.0:
        return evaluate(spec, x)
    ball = ball_outer_polytope(spec.dimension, params.slack)
    samples = [evaluate(spec, x + d * u) for u in ball]
    samples.append(evaluate(spec, x))
    inner = np.vstack(samples)
    out = (inner[:, None, :] + d * ball[None, :, :]).reshape(-1, spec.dimension)
    return hull_prune(out)


# ---------------------------------------------------------------------------
# selections

_STRATEGIES = ("vertex-index", "centroid", "random-convex", "closest-to-target",
               "sliding")


@dataclass(frozen=True)
class Selection:
    """Strategy for picking a single admissible velocity g(x) in F(x)."""
    strategy: str = "centroid"
    seed: int = 0
    target: Optional[np.ndarray] = None
    index: int = 0

    def __post_init__(self):
        if self.strategy not in _STRATEGIES:
            raise MalformedSpecError(f"unknown selection strategy {self.strategy!r}")
        if self.strategy == "closest-to-target" and self.target is None:
            raise MalformedSpecError("closest-to-target needs a target")


class SelectionField:
    """Single-valued field g with g(x) in F(x), deterministic given the seed.

    Scalar calls work on any spec (going through the vertex list); the batch
    path used by the grid builder supports the affine+switching form and
    picks the Sgn coefficient per switching term instead of per vertex.
    """

    def __init__(self, spec, selection, inflation_delta=0.0):
        self.spec = spec
        self.selection = selection
        self.inflation_delta = float(inflation_delta)

    # -- scalar -------------------------------------------------------------
    def __call__(self, x):
        x = _check_point(self.spec, x)
        sel = self.selection
        if sel.strategy == "sliding" and not self.spec.regions:
            return self.eval_batch(x[None, :])[0]
        verts = evaluate(self.spec, x)
        if len(verts) == 1:
            v = verts[0]
        elif sel.strategy == "vertex-index":
            v = verts[sel.index % len(verts)]
        elif sel.strategy == "centroid":
            v = verts.mean(axis=0)
        elif sel.strategy == "random-convex":
            h = hash_points(sel.seed, x[None, :], sel.index)[0]
            w = -np.log1p(-uniform01(
                np.array([h ^ np.uint64(j * 0x9E37) for j in range(len(verts))],
                         dtype=np.uint64)))
            w = np.maximum(w, 1e-12)
            v = verts.T @ (w / w.sum())
        else:  # closest-to-target
            v = project_onto_polytope(verts, sel.target)
        if self.inflation_delta:
            v = v + self.inflation_delta * self._ball_offset(x[None, :])[0]
        return v

    # -- batch --------------------------------------------------------------
    def eval_batch(self, X, offset=None):
        """(N, m) -> (N, m) velocities. Affine+switching specs only.

        offset: optional per-row constant velocity (held fixed by the caller
        along a trajectory; used for inflated systems)."""
        spec, sel = self.spec, self.selection
        if spec.regions:
            out = np.vstack([self(x) for x in X])
            return out if offset is None else out + offset
        X = np.ascontiguousarray(X, dtype=float)
        base = X @ spec.matrix.T + spec.offset
        if spec.switching:
            G = spec.gain_matrix
            coords = spec.switch_coords
            S = np.sign(X[:, coords])
            pin_zero = []        # (term coord, row indices) with exact v_i = 0
            for t, (i, g) in enumerate(spec.switching):
                on = X[:, i] == 0.0
                if not on.any():
                    continue
                rest_vec = base[on].copy()
                for j, (_, gj) in enumerate(spec.switching):
                    if j != t:
                        rest_vec += S[on, j][:, None] * gj
                rest = rest_vec[:, i]
                gii = g[i]
                s_on = self._surface_coefficients(X[on], t, rest_vec, g)
                stay = np.zeros(len(rest), dtype=bool)
                if self.selection.strategy == "sliding" and gii != 0.0:
                    stay = np.abs(rest) <= abs(gii)
                    s_on = np.where(stay, np.clip(-rest / gii, -1.0, 1.0), s_on)
                if gii < 0:
                    # attractive surface: Filippov equivalent control
                    filippov = np.abs(rest) < -gii
                    s_on = np.where(filippov, -rest / gii, s_on)
                    stay = stay | filippov
                S[on, t] = s_on
                if stay.any():
                    pin_zero.append((i, np.nonzero(on)[0][stay]))
            base = base + S @ G
            for i, rows in pin_zero:
                base[rows, i] = 0.0
        if self.inflation_delta:
            base = base + self.inflation_delta * self._ball_offset(X)
        if offset is not None:
            base = base + offset
        return base

    def _surface_coefficients(self, Xon, term, rest_vec, gain):
        """Sgn coefficient chosen by the strategy at points on surface term."""
        sel = self.selection
        if sel.strategy == "centroid":
            return np.zeros(len(Xon))
        if sel.strategy == "vertex-index":
            return np.full(len(Xon), 1.0 if (sel.index >> term) & 1 else -1.0)
        if sel.strategy == "closest-to-target":
            gg = float(gain @ gain)
            if gg == 0.0:
                return np.zeros(len(Xon))
            want = (np.asarray(sel.target, dtype=float) - rest_vec) @ gain / gg
            return np.clip(want, -1.0, 1.0)
        if sel.strategy == "sliding":
            return np.zeros(len(Xon))   # overridden where staying is admissible
        h = hash_points(sel.seed, Xon, term, sel.index)
        return 2.0 * uniform01(h) - 1.0

    def _ball_offset(self, X):
        """Deterministic point of the unit ball per row (inflated systems)."""
        sel = self.selection
        if sel.strategy == "centroid":
            return np.zeros_like(X)
        from scipy.special import ndtri
        m = X.shape[1]
        cols = []
        for j in range(m + 1):
            h = hash_points(substream(sel.seed, 0xB411, j), X, sel.index)
            cols.append(uniform01(h))
        U = np.column_stack(cols[:m])
        g = ndtri(np.clip(U, 1e-12, 1 - 1e-12))
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        norm[norm == 0] = 1.0
        radius = cols[m] ** (1.0 / m)
        return g / norm * radius[:, None]


def make_selection(spec, sel, inflation_delta=0.0):
    """Selection field for spec; deterministic given sel.seed."""
    return SelectionField(spec, sel, inflation_delta=inflation_delta)


# ---------------------------------------------------------------------------
# Lipschitz approximation by a lazy ball cover

class _LazyCover:
    """Implicit cover of B_R by balls B(c_i, r/4) on a regular grid of pitch p.

    Only the balls whose support touches the query point are materialized;
    the conceptual cover stays finite. Hat functions give the Lipschitz
    partition of unity.
    """

    def __init__(self, spec, delta, radius_bound, r, pitch, slack, query_budget):
        self.spec = spec
        self.delta = float(delta)
        self.R = float(radius_bound)
        self.r = float(r)
        self.pitch = float(pitch)
        self.slack = slack
        self.query_budget = int(query_budget)
        self.pad = self._value_pad()

    def _value_pad(self):
        # outer box padding for F over a ball of radius r/4 around a center
        A = self.spec.matrix
        row = np.abs(A).sum(axis=1)          # sup-norm Lipschitz row bounds
        return row * (self.r / 4.0) * np.sqrt(self.spec.dimension)

    def value(self, x):
        spec = self.spec
        x = _check_point(spec, x)
        m = spec.dimension
        p, quarter = self.pitch, self.r / 4.0
        lo = np.floor((x - quarter) / p).astype(int)
        hi = np.floor((x + quarter) / p).astype(int)
        axes = [np.arange(l, h + 1) for l, h in zip(lo, hi)]
        if int(np.prod([len(a) for a in axes])) > self.query_budget:
            raise ResolutionError("ball budget exceeded; increase delta")
        mesh = np.meshgrid(*axes, indexing="ij")
        centers = np.stack([g.ravel() for g in mesh], axis=1) * p
        d = np.linalg.norm(centers - x, axis=1)
        weights = np.maximum(0.0, 1.0 - d / quarter)
        keep = weights > 0
        if not keep.any():
            raise ResolutionError("cover does not reach the query point")
        centers, weights = centers[keep], weights[keep]
        weights = weights / weights.sum()

        base = centers @ spec.matrix.T + spec.offset
        b = weights @ base
        verts = b[None, :]
        for coord, gain in spec.switching:
            ci = centers[:, coord]
            s_lo = np.where(ci - quarter > 0, 1.0, -1.0)
            s_hi = np.where(ci + quarter < 0, -1.0, 1.0)
            lo_t = float(weights @ s_lo)
            hi_t = float(weights @ s_hi)
            ends = (lo_t,) if lo_t == hi_t else (lo_t, hi_t)
            verts = np.vstack([verts + s * gain for s in ends])
        if np.any(self.pad > 0):
            ball = ball_outer_polytope(m, self.slack) * self.pad
            verts = (verts[:, None, :] + ball[None, :, :]).reshape(-1, m)
        return unique_rows(verts)


def lipschitz_approximation(spec, delta, radius_bound, query_budget=100000):
    """Lipschitz multifunction F_L with F subset F_L subset inflate(delta) on B_R.

    Returned as a SetValuedMapSpec whose single region evaluates the cover;
    the cover radius follows the bisection criterion F(B(c, r/4)) subset
    F(c) + delta B1 for the affine modulus of the spec.
    """
    if delta <= 0 or radius_bound <= 0:
        raise MalformedSpecError("delta and R must be positive")
    if spec.regions:
        raise MalformedSpecError("lipschitz_approximation needs affine+switching form")
    norm_a = float(np.linalg.norm(spec.matrix, 2))
    r = delta
    while norm_a * (r / 4.0) * np.sqrt(spec.dimension) > delta / 4.0 or r > delta:
        r *= 0.5
        if r < delta * 2.0 ** -60:
            raise ResolutionError("cover radius underflow; increase delta")
    pitch = r / (4.0 * np.sqrt(spec.dimension)) * 1.9
    cover = _LazyCover(spec, delta, radius_bound, r, pitch, 0.05, query_budget)
    region = Region(contains=lambda x: bool(np.linalg.norm(x) <= radius_bound + 1e-12),
                    vertices=cover.value)
    out = SetValuedMapSpec(dimension=spec.dimension,
                           matrix=np.zeros((spec.dimension, spec.dimension)),
                           offset=np.zeros(spec.dimension),
                           regions=(region,))
    object.__setattr__(out, "cover", cover)
    return out
