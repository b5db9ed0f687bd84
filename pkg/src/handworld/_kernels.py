"""Hot inner loops, each in a numba and a pure-numpy flavour.

The numba versions are used when numba imports cleanly and the environment
variable ``HANDWORLD_DISABLE_NUMBA`` is unset (or ``0``). Both flavours are
always importable as ``NUMPY_KERNELS`` / ``NUMBA_KERNELS`` so tests and the
benchmark can compare them directly.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

_DISABLED = os.environ.get("HANDWORLD_DISABLE_NUMBA", "0").lower() not in ("", "0", "false", "no")
USE_NUMBA = HAVE_NUMBA and not _DISABLED
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# capsule rasterization (hand masks)
# ---------------------------------------------------------------------------

def _raster_capsules_np(height, width, points, segments, radius):
    mask = np.zeros((height, width), dtype=np.uint8)
    r2 = radius * radius
    for k in range(segments.shape[0]):
        a = points[segments[k, 0]]
        b = points[segments[k, 1]]
        u0 = max(int(np.floor(min(a[0], b[0]) - radius)), 0)
        u1 = min(int(np.ceil(max(a[0], b[0]) + radius)), width - 1)
        v0 = max(int(np.floor(min(a[1], b[1]) - radius)), 0)
        v1 = min(int(np.ceil(max(a[1], b[1]) + radius)), height - 1)
        if u0 > u1 or v0 > v1:
            continue
        uu, vv = np.meshgrid(np.arange(u0, u1 + 1, dtype=np.float64),
                             np.arange(v0, v1 + 1, dtype=np.float64))
        ab = b - a
        L2 = ab @ ab
        if L2 > 0.0:
            s = ((uu - a[0]) * ab[0] + (vv - a[1]) * ab[1]) / L2
            s = np.clip(s, 0.0, 1.0)
        else:
            s = np.zeros_like(uu)
        du = uu - (a[0] + s * ab[0])
        dv = vv - (a[1] + s * ab[1])
        hit = du * du + dv * dv <= r2
        mask[v0:v1 + 1, u0:u1 + 1] |= hit.astype(np.uint8)
    return mask


def _raster_capsules_py(height, width, points, segments, radius):
    mask = np.zeros((height, width), dtype=np.uint8)
    r2 = radius * radius
    for k in range(segments.shape[0]):
        ax = points[segments[k, 0], 0]
        ay = points[segments[k, 0], 1]
        bx = points[segments[k, 1], 0]
        by = points[segments[k, 1], 1]
        u0 = max(int(np.floor(min(ax, bx) - radius)), 0)
        u1 = min(int(np.ceil(max(ax, bx) + radius)), width - 1)
        v0 = max(int(np.floor(min(ay, by) - radius)), 0)
        v1 = min(int(np.ceil(max(ay, by) + radius)), height - 1)
        abx = bx - ax
        aby = by - ay
        L2 = abx * abx + aby * aby
        for v in range(v0, v1 + 1):
            for u in range(u0, u1 + 1):
                s = 0.0
                if L2 > 0.0:
                    s = ((u - ax) * abx + (v - ay) * aby) / L2
                    if s < 0.0:
                        s = 0.0
                    elif s > 1.0:
                        s = 1.0
                du = u - (ax + s * abx)
                dv = v - (ay + s * aby)
                if du * du + dv * dv <= r2:
                    mask[v, u] = 1
    return mask


# ---------------------------------------------------------------------------
# Geman-McClure IRLS sums
# ---------------------------------------------------------------------------

def _gm_irls_sums_np(d, D, alpha, c):
    r = D - alpha * d
    r2 = r * r
    c2 = c * c
    denom = r2 + c2
    w = c2 / (denom * denom)
    return float(np.sum(w * d * D)), float(np.sum(w * d * d)), float(np.sum(r2 / denom))


def _gm_irls_sums_py(d, D, alpha, c):
    c2 = c * c
    num = 0.0
    den = 0.0
    obj = 0.0
    for i in range(d.shape[0]):
        r = D[i] - alpha * d[i]
        r2 = r * r
        s = r2 + c2
        w = c2 / (s * s)
        num += w * d[i] * D[i]
        den += w * d[i] * d[i]
        obj += r2 / s
    return num, den, obj


# ---------------------------------------------------------------------------
# bundle adjustment: linearization and normal-equation assembly
# ---------------------------------------------------------------------------
#
# Observation k of landmark l seen in frame f, anchored in frame a with unit
# image-plane bearing b (z = 1) and inverse depth rho:
#
#   Y = Rf^T Ra b + rho Rf^T (ta - tf)       (homogeneous point in frame f)
#   r = pi(Y) - z
#
# Poses are camera-to-world (R, t), perturbed as R exp([dw]x), t + dt.
# Parameter layout: pose p (p >= 1) owns columns 6(p-1) .. 6(p-1)+5 as
# (dw, dt); pose 0 is fixed. Landmark inverse depths form a separate block.


def _ba_residuals_np(Rs, ts, rho, obs_frame, obs_anchor, obs_lm, bearing, obs_uv, fx, fy, cx, cy):
    Rf = Rs[obs_frame]
    Ra = Rs[obs_anchor]
    tf = ts[obs_frame]
    ta = ts[obs_anchor]
    b = bearing[obs_lm]
    p = rho[obs_lm]
    RfT = np.swapaxes(Rf, 1, 2)
    Q = np.einsum("kij,kj->ki", RfT, np.einsum("kij,kj->ki", Ra, b))
    S = np.einsum("kij,kj->ki", RfT, ta - tf)
    Y = Q + p[:, None] * S
    z = Y[:, 2]
    res = np.empty((Y.shape[0], 2))
    res[:, 0] = fx * Y[:, 0] / z + cx - obs_uv[:, 0]
    res[:, 1] = fy * Y[:, 1] / z + cy - obs_uv[:, 1]
    return res, z


def _ba_normal_eq_np(Rs, ts, rho, obs_frame, obs_anchor, obs_lm, bearing, obs_uv, w,
                     fx, fy, cx, cy, n_lm):
    n_pose = Rs.shape[0]
    npar = 6 * (n_pose - 1)
    K = obs_frame.shape[0]
    Rf = Rs[obs_frame]
    Ra = Rs[obs_anchor]
    tf = ts[obs_frame]
    ta = ts[obs_anchor]
    b = bearing[obs_lm]
    p = rho[obs_lm]
    RfT = np.swapaxes(Rf, 1, 2)
    Rab = np.einsum("kij,kj->ki", Ra, b)
    Q = np.einsum("kij,kj->ki", RfT, Rab)
    S = np.einsum("kij,kj->ki", RfT, ta - tf)
    Y = Q + p[:, None] * S
    z = Y[:, 2]
    res = np.empty((K, 2))
    res[:, 0] = fx * Y[:, 0] / z + cx - obs_uv[:, 0]
    res[:, 1] = fy * Y[:, 1] / z + cy - obs_uv[:, 1]

    Jpi = np.zeros((K, 2, 3))
    Jpi[:, 0, 0] = fx / z
    Jpi[:, 0, 2] = -fx * Y[:, 0] / (z * z)
    Jpi[:, 1, 1] = fy / z
    Jpi[:, 1, 2] = -fy * Y[:, 1] / (z * z)

    # target frame f: dY/dw = [Y]x, dY/dt = -rho Rf^T
    Yx = np.zeros((K, 3, 3))
    Yx[:, 0, 1] = -Y[:, 2]
    Yx[:, 0, 2] = Y[:, 1]
    Yx[:, 1, 0] = Y[:, 2]
    Yx[:, 1, 2] = -Y[:, 0]
    Yx[:, 2, 0] = -Y[:, 1]
    Yx[:, 2, 1] = Y[:, 0]
    Jf = np.concatenate([Jpi @ Yx, -p[:, None, None] * (Jpi @ RfT)], axis=2)
    # anchor frame a: dY/dw = -Rf^T Ra [b]x, dY/dt = rho Rf^T
    bx = np.zeros((K, 3, 3))
    bx[:, 0, 1] = -b[:, 2]
    bx[:, 0, 2] = b[:, 1]
    bx[:, 1, 0] = b[:, 2]
    bx[:, 1, 2] = -b[:, 0]
    bx[:, 2, 0] = -b[:, 1]
    bx[:, 2, 1] = b[:, 0]
    Ja = np.concatenate([-(Jpi @ RfT @ Ra @ bx), p[:, None, None] * (Jpi @ RfT)], axis=2)
    Jl = np.einsum("kij,kj->ki", Jpi, S)

    Hpp = np.zeros((npar, npar))
    Hpl = np.zeros((npar, n_lm))
    Hll = np.zeros(n_lm)
    bp = np.zeros(npar)
    bl = np.zeros(n_lm)

    wr = w[:, None] * res
    np.add.at(Hll, obs_lm, w * np.sum(Jl * Jl, axis=1))
    np.add.at(bl, obs_lm, np.sum(Jl * wr, axis=1))

    blocks = ((obs_frame, Jf), (obs_anchor, Ja))
    for fi, Ji in blocks:
        sel_i = fi > 0
        if not np.any(sel_i):
            continue
        ci = 6 * (fi[sel_i] - 1)
        cols_i = ci[:, None] + np.arange(6)
        JiT_wr = np.einsum("kij,ki->kj", Ji[sel_i], wr[sel_i])
        np.add.at(bp, cols_i, JiT_wr)
        JiT_l = w[sel_i, None] * np.einsum("kij,ki->kj", Ji[sel_i], Jl[sel_i])
        np.add.at(Hpl, (cols_i, np.broadcast_to(obs_lm[sel_i, None], cols_i.shape)), JiT_l)
        for fj, Jj in blocks:
            sel = sel_i & (fj > 0)
            if not np.any(sel):
                continue
            ri = 6 * (fi[sel] - 1)
            rj = 6 * (fj[sel] - 1)
            blk = w[sel, None, None] * np.einsum("kai,kaj->kij", Ji[sel], Jj[sel])
            rows = np.broadcast_to((ri[:, None] + np.arange(6))[:, :, None], blk.shape)
            cols = np.broadcast_to((rj[:, None] + np.arange(6))[:, None, :], blk.shape)
            np.add.at(Hpp, (rows, cols), blk)
    cost = float(np.sum(w * np.sum(res * res, axis=1)))
    return Hpp, Hpl, Hll, bp, bl, cost, float(np.min(z)) if K else np.inf


def _ba_residuals_py(Rs, ts, rho, obs_frame, obs_anchor, obs_lm, bearing, obs_uv, fx, fy, cx, cy):
    K = obs_frame.shape[0]
    res = np.empty((K, 2))
    zs = np.empty(K)
    for k in range(K):
        f = obs_frame[k]
        a = obs_anchor[k]
        l = obs_lm[k]
        Y = np.zeros(3)
        for i in range(3):
            acc = 0.0
            for j in range(3):
                # (Rf^T Ra b)_i + rho (Rf^T (ta - tf))_i
                rab = Rs[a, j, 0] * bearing[l, 0] + Rs[a, j, 1] * bearing[l, 1] + Rs[a, j, 2] * bearing[l, 2]
                acc += Rs[f, j, i] * (rab + rho[l] * (ts[a, j] - ts[f, j]))
            Y[i] = acc
        z = Y[2]
        zs[k] = z
        res[k, 0] = fx * Y[0] / z + cx - obs_uv[k, 0]
        res[k, 1] = fy * Y[1] / z + cy - obs_uv[k, 1]
    return res, zs


def _ba_normal_eq_py(Rs, ts, rho, obs_frame, obs_anchor, obs_lm, bearing, obs_uv, w,
                     fx, fy, cx, cy, n_lm):
    n_pose = Rs.shape[0]
    npar = 6 * (n_pose - 1)
    Hpp = np.zeros((npar, npar))
    Hpl = np.zeros((npar, n_lm))
    Hll = np.zeros(n_lm)
    bp = np.zeros(npar)
    bl = np.zeros(n_lm)
    cost = 0.0
    zmin = np.inf
    K = obs_frame.shape[0]
    Y = np.zeros(3)
    S = np.zeros(3)
    Rab = np.zeros(3)
    Jpi = np.zeros((2, 3))
    Jf = np.zeros((2, 6))
    Ja = np.zeros((2, 6))
    Jl = np.zeros(2)
    Mab = np.zeros((3, 3))
    r = np.zeros(2)
    for k in range(K):
        f = obs_frame[k]
        a = obs_anchor[k]
        l = obs_lm[k]
        wk = w[k]
        p = rho[l]
        for j in range(3):
            Rab[j] = Rs[a, j, 0] * bearing[l, 0] + Rs[a, j, 1] * bearing[l, 1] + Rs[a, j, 2] * bearing[l, 2]
        for i in range(3):
            q = 0.0
            s = 0.0
            for j in range(3):
                q += Rs[f, j, i] * Rab[j]
                s += Rs[f, j, i] * (ts[a, j] - ts[f, j])
            S[i] = s
            Y[i] = q + p * s
        z = Y[2]
        if z < zmin:
            zmin = z
        r[0] = fx * Y[0] / z + cx - obs_uv[k, 0]
        r[1] = fy * Y[1] / z + cy - obs_uv[k, 1]
        cost += wk * (r[0] * r[0] + r[1] * r[1])
        if wk == 0.0:
            continue
        Jpi[0, 0] = fx / z
        Jpi[0, 1] = 0.0
        Jpi[0, 2] = -fx * Y[0] / (z * z)
        Jpi[1, 0] = 0.0
        Jpi[1, 1] = fy / z
        Jpi[1, 2] = -fy * Y[1] / (z * z)
        # Jpi @ [Y]x
        for e in range(2):
            Jf[e, 0] = Jpi[e, 1] * Y[2] - Jpi[e, 2] * Y[1]
            Jf[e, 1] = -Jpi[e, 0] * Y[2] + Jpi[e, 2] * Y[0]
            Jf[e, 2] = Jpi[e, 0] * Y[1] - Jpi[e, 1] * Y[0]
        # M = Rf^T Ra, then -Jpi M [b]x and +-rho Jpi Rf^T
        for i in range(3):
            for j in range(3):
                m = 0.0
                for c in range(3):
                    m += Rs[f, c, i] * Rs[a, c, j]
                Mab[i, j] = m
        bx0 = bearing[l, 0]
        bx1 = bearing[l, 1]
        bx2 = bearing[l, 2]
        for e in range(2):
            g0 = Jpi[e, 0] * Mab[0, 0] + Jpi[e, 1] * Mab[1, 0] + Jpi[e, 2] * Mab[2, 0]
            g1 = Jpi[e, 0] * Mab[0, 1] + Jpi[e, 1] * Mab[1, 1] + Jpi[e, 2] * Mab[2, 1]
            g2 = Jpi[e, 0] * Mab[0, 2] + Jpi[e, 1] * Mab[1, 2] + Jpi[e, 2] * Mab[2, 2]
            # -(g @ [b]x) = b x g ... written out: (g @ [b]x)_j
            Ja[e, 0] = -(g1 * bx2 - g2 * bx1)
            Ja[e, 1] = -(-g0 * bx2 + g2 * bx0)
            Ja[e, 2] = -(g0 * bx1 - g1 * bx0)
            for j in range(3):
                h = Jpi[e, 0] * Rs[f, j, 0] + Jpi[e, 1] * Rs[f, j, 1] + Jpi[e, 2] * Rs[f, j, 2]
                Jf[e, 3 + j] = -p * h
                Ja[e, 3 + j] = p * h
            Jl[e] = Jpi[e, 0] * S[0] + Jpi[e, 1] * S[1] + Jpi[e, 2] * S[2]

        Hll[l] += wk * (Jl[0] * Jl[0] + Jl[1] * Jl[1])
        bl[l] += wk * (Jl[0] * r[0] + Jl[1] * r[1])
        for side in range(2):
            fi = f if side == 0 else a
            if fi == 0:
                continue
            oi = 6 * (fi - 1)
            for ii in range(6):
                if side == 0:
                    ji0 = Jf[0, ii]
                    ji1 = Jf[1, ii]
                else:
                    ji0 = Ja[0, ii]
                    ji1 = Ja[1, ii]
                bp[oi + ii] += wk * (ji0 * r[0] + ji1 * r[1])
                Hpl[oi + ii, l] += wk * (ji0 * Jl[0] + ji1 * Jl[1])
                for side2 in range(2):
                    fj = f if side2 == 0 else a
                    if fj == 0:
                        continue
                    oj = 6 * (fj - 1)
                    for jj in range(6):
                        if side2 == 0:
                            jj0 = Jf[0, jj]
                            jj1 = Jf[1, jj]
                        else:
                            jj0 = Ja[0, jj]
                            jj1 = Ja[1, jj]
                        Hpp[oi + ii, oj + jj] += wk * (ji0 * jj0 + ji1 * jj1)
    return Hpp, Hpl, Hll, bp, bl, cost, zmin


NUMPY_KERNELS = {
    "raster_capsules": _raster_capsules_np,
    "gm_irls_sums": _gm_irls_sums_np,
    "ba_residuals": _ba_residuals_np,
    "ba_normal_eq": _ba_normal_eq_np,
}

if HAVE_NUMBA:
    NUMBA_KERNELS = {
        "raster_capsules": njit(cache=True)(_raster_capsules_py),
        "gm_irls_sums": njit(cache=True)(_gm_irls_sums_py),
        "ba_residuals": njit(cache=True)(_ba_residuals_py),
        "ba_normal_eq": njit(cache=True)(_ba_normal_eq_py),
    }
else:  # pragma: no cover
    NUMBA_KERNELS = dict(NUMPY_KERNELS)

ACTIVE = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def get(name, backend=None):
    """Return a kernel by name, from the active backend unless one is given."""
    if backend is None:
        return ACTIVE[name]
    return {"numpy": NUMPY_KERNELS, "numba": NUMBA_KERNELS}[backend][name]
