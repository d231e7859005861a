"""Poincare-ball primitives with analytic forwards and vector-Jacobian rules.

All operations work on float64 arrays whose last axis holds the vector
coordinates; leading axes broadcast. A point x lies in the ball of curvature
c > 0 when c * ||x||^2 < 1. Each differentiable operation ``op`` has a
companion ``op_vjp`` returning upstream gradients in the broadcasted shapes
(callers reduce over broadcast axes themselves).
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteError

# Boundary clamp: projected points are kept at radius <= (1 - BALL_EPS)/sqrt(c).
BALL_EPS = 1e-5
# Denominators below this floor signal a degenerate configuration.
DENOM_FLOOR = 1e-12
# Relative slack on the projection trigger so project(project(x)) == project(x)
# bit-exactly despite rounding of the rescaled norm.
_PROJ_SLACK = 1.0 + 1e-12
# Switch point for series expansions of tanh/artanh ratio derivatives.
_SERIES_CUT = 1e-3


def check_curvature(c: float) -> float:
    c = float(c)
    if not np.isfinite(c) or c <= 0.0:
        raise ValueError(f"curvature must be a positive finite real, got {c}")
    return c


def _sq(x: np.ndarray) -> np.ndarray:
    return np.sum(x * x, axis=-1, keepdims=True)


def _dot(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.sum(x * y, axis=-1, keepdims=True)


def _norm(x: np.ndarray) -> np.ndarray:
    return np.sqrt(_sq(x))


# -- projection ---------------------------------------------------------------


def project(x: np.ndarray, c: float) -> np.ndarray:
    """Clamp x to radius (1 - BALL_EPS)/sqrt(c); interior points pass through."""
    x = np.asarray(x, dtype=np.float64)
    rmax = (1.0 - BALL_EPS) / np.sqrt(c)
    n = _norm(x)
    scale = np.where(n > rmax * _PROJ_SLACK, rmax / np.maximum(n, DENOM_FLOOR), 1.0)
    return x * scale


def project_vjp(g: np.ndarray, x: np.ndarray, c: float) -> np.ndarray:
    """Backward of project. On the clamped branch the Jacobian is
    (rmax/n) (I - x x^T / n^2); elsewhere identity."""
    x = np.asarray(x, dtype=np.float64)
    rmax = (1.0 - BALL_EPS) / np.sqrt(c)
    n = _norm(x)
    clamped = n > rmax * _PROJ_SLACK
    nsafe = np.maximum(n, DENOM_FLOOR)
    radial = _dot(g, x) / (nsafe * nsafe)
    g_clamped = (rmax / nsafe) * (g - radial * x)
    return np.where(clamped, g_clamped, g)


# -- exponential / logarithmic maps at the origin ------------------------------


def expmap0(v: np.ndarray, c: float) -> np.ndarray:
    """Map a tangent vector at the origin into the ball:
    tanh(sqrt(c)||v||) * v / (sqrt(c)||v||); the zero vector maps to itself."""
    v = np.asarray(v, dtype=np.float64)
    sc = np.sqrt(c)
    n = _norm(v)
    x = sc * n
    small = n < DENOM_FLOOR
    xs = np.where(small, 1.0, x)
    f = np.where(small, 0.0, np.tanh(xs) / xs)
    return v * f


def expmap0_vjp(g: np.ndarray, v: np.ndarray, c: float) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    sc = np.sqrt(c)
    n = _norm(v)
    x = sc * n
    # f(n) = tanh(x)/x with x = sc*n;  d(out)/dv = f I + (f'(n)/n) v v^T
    small = x < _SERIES_CUT
    xs = np.where(small, 1.0, x)
    f = np.where(small, 1.0 - x * x / 3.0 + 2.0 * x**4 / 15.0, np.tanh(xs) / xs)
    sech2 = 1.0 - np.tanh(xs) ** 2
    n3 = np.where(small, 1.0, n**3)
    fp_over_n = np.where(
        small,
        c * (-2.0 / 3.0 + (8.0 / 15.0) * x * x),
        (xs * sech2 - np.tanh(xs)) / (sc * n3),
    )
    return f * g + fp_over_n * _dot(g, v) * v


def logmap0(x: np.ndarray, c: float) -> np.ndarray:
    """Inverse of expmap0: artanh(sqrt(c)||x||) * x / (sqrt(c)||x||)."""
    x = np.asarray(x, dtype=np.float64)
    sc = np.sqrt(c)
    n = _norm(x)
    if np.any(sc * n >= 1.0):
        raise NonFiniteError("logmap0: point on or outside the ball boundary")
    t = sc * n
    small = n < DENOM_FLOOR
    ts = np.where(small, 0.5, t)
    h = np.where(small, 0.0, np.arctanh(ts) / ts)
    return x * h


def logmap0_vjp(g: np.ndarray, x: np.ndarray, c: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sc = np.sqrt(c)
    n = _norm(x)
    t = sc * n
    small = t < _SERIES_CUT
    ts = np.where(small, 0.5, t)
    h = np.where(small, 1.0 + t * t / 3.0 + t**4 / 5.0, np.arctanh(ts) / ts)
    n3 = np.where(small, 1.0, n**3)
    hp_over_n = np.where(
        small,
        c * (2.0 / 3.0 + (4.0 / 5.0) * t * t),
        (ts / (1.0 - ts * ts) - np.arctanh(ts)) / (sc * n3),
    )
    return h * g + hp_over_n * _dot(g, x) * x


# -- Mobius addition -----------------------------------------------------------


def _mobius_terms(x: np.ndarray, y: np.ndarray, c: float):
    xy = _dot(x, y)
    x2 = _sq(x)
    y2 = _sq(y)
    a = 1.0 + 2.0 * c * xy + c * y2
    b = 1.0 - c * x2
    d = 1.0 + 2.0 * c * xy + c * c * x2 * y2
    return xy, x2, y2, a, b, d


def mobius_add(x: np.ndarray, y: np.ndarray, c: float) -> np.ndarray:
    """Gyrovector addition x (+) y, projected back into the ball."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, _, _, a, b, d = _mobius_terms(x, y, c)
    if np.any(np.abs(d) < DENOM_FLOOR):
        raise NonFiniteError("mobius_add: near-antipodal boundary inputs")
    return project((a * x + b * y) / d, c)


def mobius_add_vjp(
    g: np.ndarray, x: np.ndarray, y: np.ndarray, c: float
) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _, x2, y2, a, b, d = _mobius_terms(x, y, c)
    raw = (a * x + b * y) / d
    g = project_vjp(g, raw, c)
    gn = g / d
    q = _dot(gn, raw)  # (g . out_raw)/d
    gx = (
        a * gn
        + 2.0 * c * _dot(gn, x) * y
        - 2.0 * c * _dot(gn, y) * x
        - q * (2.0 * c * y + 2.0 * c * c * y2 * x)
    )
    gy = (
        b * gn
        + _dot(gn, x) * (2.0 * c * x + 2.0 * c * y)
        - q * (2.0 * c * x + 2.0 * c * c * x2 * y)
    )
    return gx, gy


# -- hyperplane (gyroplane) logit ----------------------------------------------


def _logit_core(z, r, c):
    sc = np.sqrt(c)
    rn = _norm(r)
    if np.any(rn <= DENOM_FLOOR):
        raise NonFiniteError("hyperplane_logit: degenerate orientation")
    s = 1.0 - c * _sq(z)
    if np.any(s < DENOM_FLOOR):
        raise NonFiniteError("hyperplane_logit: point at the ball boundary")
    u = 2.0 * sc * _dot(z, r) / (s * rn)
    return sc, rn, s, u


def hyperplane_logit(
    x: np.ndarray, offset: np.ndarray, orientation: np.ndarray, c: float
) -> np.ndarray:
    """Signed-distance logit of a class hyperplane with the given ball offset
    and tangent orientation:

        (2/sqrt(c)) ||r|| asinh( 2 sqrt(c) <z, r> / ((1 - c||z||^2) ||r||) )

    with z = mobius_add(-offset, x, c). Positive on the orientation side,
    zero when x equals the offset. The last axis is reduced away.
    """
    z = mobius_add(-np.asarray(offset, dtype=np.float64), x, c)
    sc, rn, s, u = _logit_core(z, np.asarray(orientation, dtype=np.float64), c)
    out = (2.0 / sc) * rn * np.arcsinh(u)
    return out[..., 0]


def hyperplane_logit_vjp(
    g: np.ndarray, x: np.ndarray, offset: np.ndarray, orientation: np.ndarray, c: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward of hyperplane_logit; returns (g_x, g_offset, g_orientation)."""
    x = np.asarray(x, dtype=np.float64)
    offset = np.asarray(offset, dtype=np.float64)
    r = np.asarray(orientation, dtype=np.float64)
    z = mobius_add(-offset, x, c)
    sc, rn, s, u = _logit_core(z, r, c)
    g = np.asarray(g, dtype=np.float64)[..., None]
    asinh_u = np.arcsinh(u)
    inv_sqrt = 1.0 / np.sqrt(1.0 + u * u)
    zr = _dot(z, r)
    gz = g * inv_sqrt * ((4.0 / s) * r + (8.0 * c * zr / (s * s)) * z)
    gr = g * (
        (2.0 * asinh_u / (sc * rn)) * r
        + (4.0 * inv_sqrt / s) * z
        - (2.0 * inv_sqrt * u / (sc * rn)) * r
    )
    gneg, gx = mobius_add_vjp(gz, -offset, x, c)
    return gx, -gneg, gr


# -- fused batched hyperplane logits -------------------------------------------
#
# The logit needs z = (-o) (+) x only through the scalars <z,r> and ||z||^2,
# both of which expand into Gram-matrix entries of x, o and r. That keeps the
# whole head at O(P*V) memory plus a few [P,N]x[N,V] GEMMs instead of a
# [P,V,N] broadcast. Same math as hyperplane_logit, different factorization.


def _gyroplane_tables(x, o, r, c):
    rmax = (1.0 - BALL_EPS) / np.sqrt(c)
    xx = np.sum(x * x, axis=1)[:, None]  # [P,1]
    ww = np.sum(o * o, axis=1)[None, :]  # [1,V]  (w = -o, so ||w||^2 = ||o||^2)
    wx = -(x @ o.T)  # [P,V]   <w, x>
    xr = x @ r.T  # [P,V]
    wr = -np.sum(o * r, axis=1)[None, :]  # [1,V]
    rn = np.sqrt(np.sum(r * r, axis=1))[None, :]  # [1,V]
    a = 1.0 + 2.0 * c * wx + c * xx
    b = 1.0 - c * ww
    d = 1.0 + 2.0 * c * wx + c * c * ww * xx
    if np.any(np.abs(d) < DENOM_FLOOR):
        raise NonFiniteError("batched_logits: near-antipodal boundary inputs")
    zr_raw = (a * wr + b * xr) / d
    zz_raw = (a * a * ww + 2.0 * a * b * wx + b * b * xx) / (d * d)
    # projection of z back into the ball, expressed on the scalar tables
    norm = np.sqrt(np.maximum(zz_raw, 0.0))
    clamped = norm > rmax * _PROJ_SLACK
    k = np.where(clamped, rmax / np.maximum(norm, DENOM_FLOOR), 1.0)
    zr = zr_raw * k
    zz = np.where(clamped, rmax * rmax, zz_raw)
    return dict(xx=xx, ww=ww, wx=wx, xr=xr, wr=wr, rn=rn, a=a, b=b, d=d,
                zr_raw=zr_raw, zz_raw=zz_raw, clamped=clamped, k=k, zr=zr, zz=zz)


def batched_logits(x: np.ndarray, offsets: np.ndarray, orientations: np.ndarray,
                   c: float, tables: dict | None = None) -> np.ndarray:
    """Hyperplane logits for every (point, node) pair.

    x: [P, N] ball points; offsets, orientations: [V, N]. Returns [P, V],
    equal to hyperplane_logit(x[p], offsets[v], orientations[v], c) up to
    floating-point reassociation.
    """
    x = np.asarray(x, dtype=np.float64)
    o = np.asarray(offsets, dtype=np.float64)
    r = np.asarray(orientations, dtype=np.float64)
    sc = np.sqrt(c)
    t = tables if tables is not None else _gyroplane_tables(x, o, r, c)
    rn, zr, zz = t["rn"], t["zr"], t["zz"]
    if np.any(rn <= DENOM_FLOOR):
        raise NonFiniteError("batched_logits: degenerate orientation")
    s = 1.0 - c * zz
    if np.any(s < DENOM_FLOOR):
        raise NonFiniteError("batched_logits: point at the ball boundary")
    u = 2.0 * sc * zr / (s * rn)
    return (2.0 / sc) * rn * np.arcsinh(u)


def batched_logits_vjp(g: np.ndarray, x: np.ndarray, offsets: np.ndarray,
                       orientations: np.ndarray, c: float,
                       tables: dict | None = None):
    """Backward of batched_logits; returns (g_x [P,N], g_offsets [V,N],
    g_orientations [V,N])."""
    x = np.asarray(x, dtype=np.float64)
    o = np.asarray(offsets, dtype=np.float64)
    r = np.asarray(orientations, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    sc = np.sqrt(c)
    t = tables if tables is not None else _gyroplane_tables(x, o, r, c)
    xx, ww, wx, xr, wr, rn = t["xx"], t["ww"], t["wx"], t["xr"], t["wr"], t["rn"]
    a, b, d = t["a"], t["b"], t["d"]
    zr_raw, zz_raw, clamped, k = t["zr_raw"], t["zz_raw"], t["clamped"], t["k"]
    zr, zz = t["zr"], t["zz"]
    s = 1.0 - c * zz
    u = 2.0 * sc * zr / (s * rn)
    inv_sqrt = 1.0 / np.sqrt(1.0 + u * u)
    # lambda = (2/sc) rn asinh(u)
    g_zr = g * inv_sqrt * (4.0 / s)
    g_zz = g * inv_sqrt * (4.0 * c * zr / (s * s))
    g_rn = g * (2.0 / sc) * (np.arcsinh(u) - inv_sqrt * u)
    # undo the scalar projection fix-up: zr = k zr_raw, zz = const if clamped
    g_zz_raw = np.where(
        clamped, -g_zr * zr_raw * k / (2.0 * np.maximum(zz_raw, DENOM_FLOOR)), g_zz
    )
    g_zr_raw = g_zr * k
    # zr_raw = (a wr + b xr)/d ; zz_raw = (a^2 ww + 2ab wx + b^2 xx)/d^2
    g_a = g_zr_raw * wr / d + g_zz_raw * (2.0 * a * ww + 2.0 * b * wx) / (d * d)
    g_b = g_zr_raw * xr / d + g_zz_raw * (2.0 * a * wx + 2.0 * b * xx) / (d * d)
    g_d = -(g_zr_raw * zr_raw + 2.0 * g_zz_raw * zz_raw) / d
    g_xr = g_zr_raw * b / d
    g_wr = g_zr_raw * a / d
    # a = 1 + 2c wx + c xx ; b = 1 - c ww ; d = 1 + 2c wx + c^2 ww xx
    g_wx = 2.0 * c * (g_a + g_d) + g_zz_raw * 2.0 * a * b / (d * d)
    g_xx = c * g_a + c * c * ww * g_d + g_zz_raw * b * b / (d * d)
    g_ww = -c * g_b + c * c * xx * g_d + g_zz_raw * a * a / (d * d)
    # reduce to vector gradients; wx = -x o^T, xr = x r^T, wr = -sum(o r)
    g_wr_v = g_wr.sum(axis=0)
    g_rn_v = g_rn.sum(axis=0)
    gx = (-g_wx) @ o + g_xr @ r + 2.0 * g_xx.sum(axis=1, keepdims=True) * x
    go = (-g_wx).T @ x - g_wr_v[:, None] * r + 2.0 * g_ww.sum(axis=0)[:, None] * o
    gr = g_xr.T @ x - g_wr_v[:, None] * o + (g_rn_v / rn[0])[:, None] * r
    return gx, go, gr
