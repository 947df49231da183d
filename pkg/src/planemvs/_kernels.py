"""Numba kernels for initialization, window matching and PatchMatch passes.

View data for one reference image is passed as flat arrays:

* ``kin``: ``(fx, fy, cx, cy)`` of the reference camera;
* ``srcs``: ``(N, Hmax, Wmax)`` source images (zero padded);
* ``sizes``: ``(N, 2)`` true ``(width, height)`` of each source;
* ``kj``: ``(N, 4)`` source intrinsics;
* ``rr``, ``tt``: ``(N, 3, 3)`` / ``(N, 3)`` relative pose reference -> source.
"""

import math

import numpy as np
from numba import njit

OK = 0
BORDER = 1
ZERO_VAR = 2
BAD_PLANE = 3

ZERO_VAR_EPS = 1e-10
MIN_COST = 1e-6

# fast-math without the no-NaN/no-Inf assumptions; NaN labels are meaningful
_FAST = {"contract", "arcp", "nsz", "reassoc", "afn"}


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def bilinear(img, w, h, u, v):
    u0 = int(math.floor(u))
    v0 = int(math.floor(v))
    if u0 > w - 2:
        u0 = w - 2
    if v0 > h - 2:
        v0 = h - 2
    if u0 < 0:
        u0 = 0
    if v0 < 0:
        v0 = 0
    au = u - u0
    av = v - v0
    u1 = min(u0 + 1, w - 1)
    v1 = min(v0 + 1, h - 1)
    top = (1.0 - au) * img[v0, u0] + au * img[v0, u1]
    bottom = (1.0 - au) * img[v1, u0] + au * img[v1, u1]
    return (1.0 - av) * top + av * bottom


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def ref_window(ref, px, py, r, s, out):
    """Fill ``out`` with the mean-centred reference window.

    Returns the sum of squares, ``-1`` when the window leaves the image and
    ``0`` for a constant window.
    """
    h, w = ref.shape
    ext = s * r
    if px - ext < 0.0 or px + ext > w - 1 or py - ext < 0.0 or py + ext > h - 1:
        return -1.0
    k = 0
    total = 0.0
    for b in range(-r, r + 1):
        v = py + s * b
        for a in range(-r, r + 1):
            u = px + s * a
            val = bilinear(ref, w, h, u, v)
            out[k] = val
            total += val
            k += 1
    mean = total / k
    ss = 0.0
    for i in range(k):
        out[i] -= mean
        ss += out[i] * out[i]
    if ss < ZERO_VAR_EPS:
        return 0.0
    return ss


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def plane_homography(kin, kjv, R, t, px, py, d, n0, n1, n2, H):
    """Write the plane-induced homography into ``H`` (row-major 9-vector).

    Returns ``False`` when the plane passes through the reference center.
    """
    fx, fy, cx, cy = kin[0], kin[1], kin[2], kin[3]
    rx = (px - cx) / fx
    ry = (py - cy) / fy
    p = -d * (n0 * rx + n1 * ry + n2)
    if not p > 1e-12:
        return False
    # M = R - t n^T / p
    m00 = R[0, 0] - t[0] * n0 / p
    m01 = R[0, 1] - t[0] * n1 / p
    m02 = R[0, 2] - t[0] * n2 / p
    m10 = R[1, 0] - t[1] * n0 / p
    m11 = R[1, 1] - t[1] * n1 / p
    m12 = R[1, 2] - t[1] * n2 / p
    m20 = R[2, 0] - t[2] * n0 / p
    m21 = R[2, 1] - t[2] * n1 / p
    m22 = R[2, 2] - t[2] * n2 / p
    # M K_i^-1
    a00 = m00 / fx
    a01 = m01 / fy
    a02 = m02 - m00 * cx / fx - m01 * cy / fy
    a10 = m10 / fx
    a11 = m11 / fy
    a12 = m12 - m10 * cx / fx - m11 * cy / fy
    a20 = m20 / fx
    a21 = m21 / fy
    a22 = m22 - m20 * cx / fx - m21 * cy / fy
    # K_j (M K_i^-1)
    fxj, fyj, cxj, cyj = kjv[0], kjv[1], kjv[2], kjv[3]
    H[0] = fxj * a00 + cxj * a20
    H[1] = fxj * a01 + cxj * a21
    H[2] = fxj * a02 + cxj * a22
    H[3] = fyj * a10 + cyj * a20
    H[4] = fyj * a11 + cyj * a21
    H[5] = fyj * a12 + cyj * a22
    H[6] = a20
    H[7] = a21
    H[8] = a22
    return True


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _sample_in(src, sw, sh, u, v):
    """Bilinear sample at a point already known to lie inside the image."""
    u0 = int(u)
    v0 = int(v)
    if u0 > sw - 2:
        u0 = sw - 2
    if v0 > sh - 2:
        v0 = sh - 2
    au = u - u0
    av = v - v0
    a = src[v0, u0]
    b = src[v0, u0 + 1]
    c = src[v0 + 1, u0]
    d = src[v0 + 1, u0 + 1]
    top = a + au * (b - a)
    bottom = c + au * (d - c)
    return top + av * (bottom - top)


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _zncc_sums(refss, sb, sbb, srb, k):
    ss = sbb - sb * sb / k
    if ss < ZERO_VAR_EPS:
        return ZERO_VAR, 0.0
    z = srb / math.sqrt(refss * ss)
    if z > 1.0:
        z = 1.0
    elif z < -1.0:
        z = -1.0
    return OK, z


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def view_zncc_h(src, sw, sh, H, px, py, r, s, refc, refss, buf):
    """ZNCC between the reference window and its homography image in ``src``.

    ``refc`` holds the mean-centred reference samples, so the cross term needs
    no source mean.
    """
    k = 0
    sb = 0.0
    sbb = 0.0
    srb = 0.0
    wmax = sw - 1.0
    hmax = sh - 1.0
    for b in range(-r, r + 1):
        v = py + s * b
        for a in range(-r, r + 1):
            u = px + s * a
            hz = H[6] * u + H[7] * v + H[8]
            if not hz > 0.0:
                return BORDER, 0.0
            inv = 1.0 / hz
            uj = (H[0] * u + H[1] * v + H[2]) * inv
            vj = (H[3] * u + H[4] * v + H[5]) * inv
            if not (uj >= 0.0 and uj <= wmax and vj >= 0.0 and vj <= hmax):
                return BORDER, 0.0
            val = _sample_in(src, sw, sh, uj, vj)
            sb += val
            sbb += val * val
            srb += refc[k] * val
            k += 1
    return _zncc_sums(refss, sb, sbb, srb, k)


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def view_zncc_reproj(src, sw, sh, kin, kjv, R, t, px, py, depth, r, s, refc, refss, buf):
    """ZNCC with window samples back-projected at constant depth and reprojected."""
    fx, fy, cx, cy = kin[0], kin[1], kin[2], kin[3]
    k = 0
    sb = 0.0
    sbb = 0.0
    srb = 0.0
    wmax = sw - 1.0
    hmax = sh - 1.0
    for b in range(-r, r + 1):
        v = py + s * b
        for a in range(-r, r + 1):
            u = px + s * a
            X0 = depth * (u - cx) / fx
            X1 = depth * (v - cy) / fy
            X2 = depth
            Y0 = R[0, 0] * X0 + R[0, 1] * X1 + R[0, 2] * X2 + t[0]
            Y1 = R[1, 0] * X0 + R[1, 1] * X1 + R[1, 2] * X2 + t[1]
            Y2 = R[2, 0] * X0 + R[2, 1] * X1 + R[2, 2] * X2 + t[2]
            if not Y2 > 0.0:
                return BORDER, 0.0
            uj = kjv[0] * Y0 / Y2 + kjv[2]
            vj = kjv[1] * Y1 / Y2 + kjv[3]
            if not (uj >= 0.0 and uj <= wmax and vj >= 0.0 and vj <= hmax):
                return BORDER, 0.0
            val = _sample_in(src, sw, sh, uj, vj)
            sb += val
            sbb += val * val
            srb += refc[k] * val
            k += 1
    return _zncc_sums(refss, sb, sbb, srb, k)


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def aggregate(costs, n, c_max, omega):
    """Inverse-cost weighted aggregate; views at ``c_max`` are excluded."""
    cnt = 0
    inv = 0.0
    for j in range(n):
        c = costs[j]
        if c >= c_max:
            continue
        cnt += 1
        inv += 1.0 / max(c, MIN_COST)
    if cnt == 0:
        return c_max
    return cnt / (omega * inv)


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def _to_cost(status, z, c_max):
    if status != OK:
        return c_max
    c = 1.0 - z
    if c > c_max:
        c = c_max
    return c


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def hyp_cost(px, py, d, n0, n1, n2, refc, refss, kin, srcs, sizes, kj, rr, tt,
             r, s, c_max, omega, buf, H, costs):
    nv = srcs.shape[0]
    for j in range(nv):
        if not plane_homography(kin, kj[j], rr[j], tt[j], px, py, d, n0, n1, n2, H):
            costs[j] = c_max
            continue
        st, z = view_zncc_h(srcs[j], sizes[j, 0], sizes[j, 1], H, px, py, r, s,
                            refc, refss, buf)
        costs[j] = _to_cost(st, z, c_max)
    return aggregate(costs, nv, c_max, omega)


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def fronto_cost(px, py, d, refc, refss, kin, srcs, sizes, kj, rr, tt,
                r, s, c_max, omega, buf, costs):
    nv = srcs.shape[0]
    for j in range(nv):
        st, z = view_zncc_reproj(srcs[j], sizes[j, 0], sizes[j, 1], kin, kj[j], rr[j],
                                 tt[j], px, py, d, r, s, refc, refss, buf)
        costs[j] = _to_cost(st, z, c_max)
    return aggregate(costs, nv, c_max, omega)


# ---------------------------------------------------------------------------
# PatchMatch state passes
# ---------------------------------------------------------------------------


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def initial_costs(ref, depth, normal, valid, cost, kin, srcs, sizes, kj, rr, tt,
                  r, s, c_max, omega):
    h, w = ref.shape
    n = (2 * r + 1) * (2 * r + 1)
    refc = np.empty(n)
    buf = np.empty(n)
    H = np.empty(9)
    costs = np.empty(srcs.shape[0])
    for py in range(h):
        for px in range(w):
            if not valid[py, px]:
                cost[py, px] = c_max
                continue
            refss = ref_window(ref, px, py, r, s, refc)
            if refss <= 0.0:
                cost[py, px] = c_max
                continue
            cost[py, px] = hyp_cost(px, py, depth[py, px], normal[py, px, 0],
                                    normal[py, px, 1], normal[py, px, 2], refc, refss,
                                    kin, srcs, sizes, kj, rr, tt, r, s, c_max, omega,
                                    buf, H, costs)


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def propagate(color, ref, depth, normal, offset, cost, valid,
              rd_normal, rd_offset, rd_valid, offsets,
              kin, srcs, sizes, kj, rr, tt, r, s, c_max, omega):
    """Update every pixel with ``(u + v) % 2 == color`` from neighbor planes.

    Candidate planes are read from the ``rd_*`` arrays; production passes the
    live arrays (all offsets reach the opposite color only).
    Returns the number of evaluated candidates.
    """
    h, w = ref.shape
    n = (2 * r + 1) * (2 * r + 1)
    refc = np.empty(n)
    buf = np.empty(n)
    H = np.empty(9)
    costs = np.empty(srcs.shape[0])
    fx, fy, cx, cy = kin[0], kin[1], kin[2], kin[3]
    evaluated = 0
    for py in range(h):
        start = (py + color) % 2
        for px in range(start, w, 2):
            if not valid[py, px]:
                continue
            refss = ref_window(ref, px, py, r, s, refc)
            if refss <= 0.0:
                continue
            rx = (px - cx) / fx
            ry = (py - cy) / fy
            best = cost[py, px]
            best_k = -1
            best_d = 0.0
            for k in range(offsets.shape[0]):
                qx = px + offsets[k, 0]
                qy = py + offsets[k, 1]
                if qx < 0 or qx >= w or qy < 0 or qy >= h or not rd_valid[qy, qx]:
                    continue
                m0 = rd_normal[qy, qx, 0]
                m1 = rd_normal[qy, qx, 1]
                m2 = rd_normal[qy, qx, 2]
                p = rd_offset[qy, qx]
                if (m0 == normal[py, px, 0] and m1 == normal[py, px, 1]
                        and m2 == normal[py, px, 2] and p == offset[py, px]):
                    continue
                den = -(m0 * rx + m1 * ry + m2)
                if not den > 1e-12:
                    continue
                d = p / den
                if not (d > 0.0 and d < np.inf):
                    continue
                evaluated += 1
                c = hyp_cost(px, py, d, m0, m1, m2, refc, refss, kin, srcs, sizes,
                             kj, rr, tt, r, s, c_max, omega, buf, H, costs)
                if c < best:
                    best = c
                    best_k = k
                    best_d = d
            if best_k >= 0:
                qx = px + offsets[best_k, 0]
                qy = py + offsets[best_k, 1]
                normal[py, px, 0] = rd_normal[qy, qx, 0]
                normal[py, px, 1] = rd_normal[qy, qx, 1]
                normal[py, px, 2] = rd_normal[qy, qx, 2]
                offset[py, px] = rd_offset[qy, qx]
                depth[py, px] = best_d
                cost[py, px] = best
    return evaluated


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def perturb_normal(n0, n1, n2, dtheta, dphi, rx, ry, out):
    """Shift the spherical angles of a normal and flip it toward the camera.

    Returns ``False`` when the result is perpendicular to the viewing ray.
    """
    if dtheta == 0.0 and dphi == 0.0:
        out[0] = n0
        out[1] = n1
        out[2] = n2
        return True
    phi = math.acos(min(1.0, max(-1.0, n2))) + dphi
    theta = math.atan2(n1, n0) + dtheta
    m0 = math.cos(theta) * math.sin(phi)
    m1 = math.sin(theta) * math.sin(phi)
    m2 = math.cos(phi)
    norm = math.sqrt(m0 * m0 + m1 * m1 + m2 * m2)
    m0 /= norm
    m1 /= norm
    m2 /= norm
    dot = m0 * rx + m1 * ry + m2
    if dot > 0.0:
        m0, m1, m2 = -m0, -m1, -m2
        dot = -dot
    if not dot < -1e-12:
        return False
    out[0] = m0
    out[1] = m1
    out[2] = m2
    return True


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def refine(ref, depth, normal, offset, cost, valid, draws, depth_step,
           kin, srcs, sizes, kj, rr, tt, r, s, c_max, omega):
    """One random-refinement sweep over all valid pixels.

    ``draws`` holds uniforms of shape ``(3, H, W)`` for the depth, azimuth and
    elevation perturbations; ``depth_step`` is the half-width of the depth
    perturbation interval.
    """
    h, w = ref.shape
    n = (2 * r + 1) * (2 * r + 1)
    refc = np.empty(n)
    buf = np.empty(n)
    H = np.empty(9)
    costs = np.empty(srcs.shape[0])
    nn = np.empty(3)
    fx, fy, cx, cy = kin[0], kin[1], kin[2], kin[3]
    half_pi = 0.5 * math.pi
    for py in range(h):
        for px in range(w):
            if not valid[py, px]:
                continue
            refss = ref_window(ref, px, py, r, s, refc)
            if refss <= 0.0:
                continue
            rx = (px - cx) / fx
            ry = (py - cy) / fy
            d_old = depth[py, px]
            n0 = normal[py, px, 0]
            n1 = normal[py, px, 1]
            n2 = normal[py, px, 2]
            d_new = d_old + (2.0 * draws[0, py, px] - 1.0) * depth_step
            dtheta = (2.0 * draws[1, py, px] - 1.0) * half_pi
            dphi = (2.0 * draws[2, py, px] - 1.0) * (math.pi / 12.0)
            have_n = perturb_normal(n0, n1, n2, dtheta, dphi, rx, ry, nn)
            best = cost[py, px]
            bd = d_old
            b0, b1, b2 = n0, n1, n2
            changed = False
            for cand in range(3):
                if cand == 0:
                    if not d_new > 0.0:
                        continue
                    cd, c0, c1, c2 = d_new, n0, n1, n2
                elif cand == 1:
                    if not have_n:
                        continue
                    cd, c0, c1, c2 = d_old, nn[0], nn[1], nn[2]
                else:
                    if not (have_n and d_new > 0.0):
                        continue
                    cd, c0, c1, c2 = d_new, nn[0], nn[1], nn[2]
                c = hyp_cost(px, py, cd, c0, c1, c2, refc, refss, kin, srcs, sizes,
                             kj, rr, tt, r, s, c_max, omega, buf, H, costs)
                if c < best:
                    best = c
                    bd, b0, b1, b2 = cd, c0, c1, c2
                    changed = True
            if changed:
                depth[py, px] = bd
                normal[py, px, 0] = b0
                normal[py, px, 1] = b1
                normal[py, px, 2] = b2
                offset[py, px] = -bd * (b0 * rx + b1 * ry + b2)
                cost[py, px] = best


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def fronto_costs(ref, pix, depths, kin, srcs, sizes, kj, rr, tt, r, s, c_max, omega,
                 out):
    """Aggregated cost of fronto-parallel depth hypotheses.

    ``pix`` is ``(M, 2)`` integer pixels, ``depths`` ``(M, L)`` with NaN for
    missing labels; ``out`` receives ``(M, L)`` costs.
    """
    n = (2 * r + 1) * (2 * r + 1)
    refc = np.empty(n)
    buf = np.empty(n)
    costs = np.empty(srcs.shape[0])
    for m in range(pix.shape[0]):
        px = pix[m, 0]
        py = pix[m, 1]
        refss = ref_window(ref, px, py, r, s, refc)
        for l in range(depths.shape[1]):
            d = depths[m, l]
            if not d > 0.0:
                out[m, l] = np.nan
            elif refss <= 0.0:
                out[m, l] = c_max
            else:
                out[m, l] = fronto_cost(px, py, d, refc, refss, kin, srcs, sizes, kj,
                                        rr, tt, r, s, c_max, omega, buf, costs)


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


@njit(cache=True, error_model="numpy", fastmath=_FAST)
def init_map(fpix, fdepth, starts, order, meta, cell, radius, dmin, dmax, kin,
             uniforms, depth, normal):
    h, w = depth.shape
    ncx, ncy, ox, oy = meta[0], meta[1], meta[2], meta[3]
    r2 = radius * radius
    fx, fy, cx, cy = kin[0], kin[1], kin[2], kin[3]
    best_d2 = np.empty(4)
    best_i = np.empty(4, dtype=np.int64)
    nfeat = fdepth.shape[0]
    for py in range(h):
        for px in range(w):
            lo = dmin
            hi = dmax
            if nfeat > 0:
                for q in range(4):
                    best_d2[q] = np.inf
                    best_i[q] = -1
                gx = int(math.floor(px / cell)) - ox
                gy = int(math.floor(py / cell)) - oy
                for cy_ in range(max(gy - 1, 0), min(gy + 2, ncy)):
                    for cx_ in range(max(gx - 1, 0), min(gx + 2, ncx)):
                        key = cy_ * ncx + cx_
                        for kk in range(starts[key], starts[key + 1]):
                            i = order[kk]
                            dx = fpix[i, 0] - px
                            dy = fpix[i, 1] - py
                            d2 = dx * dx + dy * dy
                            if not d2 < r2:
                                continue
                            q = (0 if dy < 0 else 2) + (0 if dx < 0 else 1)
                            if d2 < best_d2[q] or (d2 == best_d2[q] and i < best_i[q]):
                                best_d2[q] = d2
                                best_i[q] = i
                occupied = 0
                flo = np.inf
                fhi = -np.inf
                for q in range(4):
                    if best_i[q] >= 0:
                        occupied += 1
                        fd = fdepth[best_i[q]]
                        flo = min(flo, fd)
                        fhi = max(fhi, fd)
                if occupied >= 2:
                    lo = flo
                    hi = fhi
            depth[py, px] = lo + uniforms[0, py, px] * (hi - lo)
            theta = 2.0 * math.pi * uniforms[1, py, px]
            phi = math.pi * (uniforms[2, py, px] - 0.5)
            n0 = math.cos(theta) * math.sin(phi)
            n1 = math.sin(theta) * math.sin(phi)
            n2 = math.cos(phi)
            norm = math.sqrt(n0 * n0 + n1 * n1 + n2 * n2)
            n0 /= norm
            n1 /= norm
            n2 /= norm
            if n0 * (px - cx) / fx + n1 * (py - cy) / fy + n2 > 0.0:
                n0, n1, n2 = -n0, -n1, -n2
            normal[py, px, 0] = n0
            normal[py, px, 1] = n1
            normal[py, px, 2] = n2
