"""Trajectories of single-valued selections of x' in F(x).

Fixed-step RK4 on a selection field, with event handling at the switching
surfaces x_i = 0: a step that crosses a surface is bisected to land within
h*1e-3 of it; if the surface is attractive there (Filippov condition) the
coordinate is clamped to exactly 0 and the equivalent-control sliding value
takes over inside the field evaluation, otherwise the state is nudged to the
crossing side and integration continues with the remaining fraction of the
step.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError

__all__ = ["Trajectory", "integrate", "integrate_batch"]

BLOWUP_NORM = 1e6


@dataclass(frozen=True, eq=False)
class Trajectory:
    times: np.ndarray
    states: np.ndarray

    def __post_init__(self):
        if not np.isfinite(self.states).all():
            raise DivergenceError("trajectory contains non-finite states")

    @property
    def final(self):
        return self.states[-1]


def _rk4(field, X, hvec, offset=None):
    """RK4 step with a per-row step size (offset: constant extra velocity)."""
    h = np.asarray(hvec, dtype=float).reshape(-1, 1)
    k1 = field.eval_batch(X, offset)
    k2 = field.eval_batch(X + 0.5 * h * k1, offset)
    k3 = field.eval_batch(X + 0.5 * h * k2, offset)
    k4 = field.eval_batch(X + h * k3, offset)
    return X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _attractive_mask(field, P, term):
    """Filippov attractiveness of surface `term` at points P (x_i set to 0)."""
    spec = field.spec
    i, g = spec.switching[term]
    gii = g[i]
    if gii >= 0:
        return np.zeros(len(P), dtype=bool)
    Q = P.copy()
    Q[:, i] = 0.0
    base = Q @ spec.matrix.T + spec.offset
    rest = base[:, i].copy()
    for j, (cj, gj) in enumerate(spec.switching):
        if j == term:
            continue
        rest += np.sign(Q[:, cj]) * gj[i]
    return np.abs(rest) < -gii


def _first_crossing(field, X, h, i, sgn0, offset=None):
    """Per-row crossing parameter of coordinate i within the RK4 step.

    Scans a coarse lambda grid for the first sign change of the step map;
    stage-averaging can hide the crossing from the endpoint (the map may even
    have a spurious fixed point off the surface), so rows without a visible
    flip fall back to the Euler crossing estimate.
    """
    n = len(X)
    lo = np.zeros(n)
    hi = np.full(n, np.nan)
    prev = np.zeros(n)
    for j in range(1, 17):
        lam = j / 16.0
        Xm = _rk4(field, X, lam * h, offset)
        flipped = (np.sign(Xm[:, i]) != sgn0) & np.isnan(hi)
        hi[flipped] = lam
        lo[~flipped & np.isnan(hi)] = lam
        prev[:] = lam
    missing = np.isnan(hi)
    if missing.any():
        k1 = field.eval_batch(X[missing], None if offset is None else offset[missing])
        vi = k1[:, i]
        with np.errstate(divide="ignore", invalid="ignore"):
            lam_lin = np.where(vi != 0.0, -X[missing][:, i] / (h[missing] * vi), 1.0)
        hi[missing] = np.clip(lam_lin, 1.0 / 16.0, 1.0)
        lo[missing] = 0.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        Xm = _rk4(field, X, mid * h, offset)
        same = np.sign(Xm[:, i]) == sgn0
        lo = np.where(same, mid, lo)
        hi = np.where(same, hi, mid)
    return 0.5 * (lo + hi)


def _step(field, X, hvec, depth=0, offset=None):
    """One step of the whole batch with per-row h, resolving crossings."""
    h = np.broadcast_to(np.asarray(hvec, dtype=float).reshape(-1), (len(X),)).copy()
    X1 = _rk4(field, X, h, offset)
    coords = field.spec.switch_coords
    if len(coords) == 0 or depth >= 8:
        return X1
    # endpoint sign change, or an Euler substep would cross (stage averaging
    # can mask the crossing entirely)
    k1 = field.eval_batch(X, offset)
    x0c = X[:, coords]
    crossed = (x0c * X1[:, coords] < 0.0) | (
        (x0c != 0.0) & (x0c * (x0c + h[:, None] * k1[:, coords]) < 0.0))
    rows = np.nonzero(crossed.any(axis=1))[0]
    if len(rows) == 0:
        return X1
    sub = X[rows]
    hr = h[rows]
    tol = hr * 1e-3
    lam = np.full(len(rows), 1.0)
    coord_star = np.full(len(rows), -1, dtype=int)
    for t, i in enumerate(coords):
        rmask = np.asarray(crossed[rows, t])
        if not rmask.any():
            continue
        base_rows = sub[rmask]
        sgn0 = np.sign(base_rows[:, i])
        off_r = None if offset is None else offset[rows][rmask]
        cand = _first_crossing(field, base_rows, hr[rmask], i, sgn0, off_r)
        idx = np.nonzero(rmask)[0]
        better = cand < lam[idx]
        lam[idx[better]] = cand[better]
        coord_star[idx[better]] = i
    off_rows = None if offset is None else offset[rows]
    Xs = _rk4(field, sub, lam * hr, off_rows)
    for t, i in enumerate(coords):
        sel_rows = coord_star == i
        if not sel_rows.any():
            continue
        P = Xs[sel_rows]
        attract = _attractive_mask(field, P, t)
        side = -np.sign(sub[sel_rows][:, i])
        side[side == 0] = 1.0
        P[:, i] = np.where(attract, 0.0, side * tol[sel_rows])
        Xs[sel_rows] = P
    X1[rows] = _step(field, Xs, (1.0 - lam) * hr, depth + 1, off_rows)
    return X1


def integrate_batch(field, X0, T, steps, blowup=BLOWUP_NORM, offset=None):
    """Endpoints x(T) for a batch of starts; returns (XT, diverged mask).

    offset: optional (N, m) constant velocity added per row (selections of an
    inflated system hold their ball offset along the whole trajectory)."""
    X = np.array(X0, dtype=float, copy=True)
    if X.ndim == 1:
        X = X[None, :]
    h = float(T) / int(steps)
    diverged = np.zeros(len(X), dtype=bool)
    for _ in range(int(steps)):
        live = ~diverged
        if not live.any():
            break
        Xl = _step(field, X[live], h, 0, None if offset is None else offset[live])
        bad = ~np.isfinite(Xl).all(axis=1) | (np.linalg.norm(Xl, axis=1) > blowup)
        Xl[bad] = X[live][bad]
        idx = np.nonzero(live)[0]
        X[idx] = Xl
        diverged[idx[bad]] = True
    return X, diverged


def integrate(field, x0, T, h, blowup=BLOWUP_NORM):
    """Trajectory of the selection field from x0 over [0, T] at step <= h.

    The number of steps is ceil(T/h); the actual uniform step is T/steps so
    the trajectory lands exactly on T with ceil(T/h)+1 samples.
    """
    if T <= 0 or h <= 0 or h > T:
        raise ValueError("need 0 < h <= T")
    steps = int(np.ceil(T / h - 1e-12))
    hh = float(T) / steps
    x = np.asarray(x0, dtype=float)[None, :].copy()
    states = np.empty((steps + 1, x.shape[1]))
    states[0] = x[0]
    for j in range(steps):
        x = _step(field, x, hh)
        if not np.isfinite(x).all() or np.linalg.norm(x[0]) > blowup:
            raise DivergenceError(f"state norm exceeded {blowup:g} at t={(j+1)*hh:g}")
        states[j + 1] = x[0]
    times = np.arange(steps + 1) * hh
    return Trajectory(times=times, states=states)
