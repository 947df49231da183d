"""Numba kernels for directional hole filling and TRW-S on a 4-connected grid.

Grid nodes are numbered in raster order ``i = v * W + u``. Messages are kept
per receiving node and side: ``msg[i, side, :]`` with sides
``0 = from left``, ``1 = from right``, ``2 = from above``, ``3 = from below``.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def fill_line(ts, ds, t0, support):
    """Least-squares line through the ``support`` nearest samples, evaluated at ``t0``.

    ``ts`` are strictly increasing integer positions with depths ``ds``. The
    nearest samples are taken from both sides of ``t0``; on equal distance the
    lower position wins. Returns NaN with fewer than two samples.
    """
    n = ts.shape[0]
    if n < 2:
        return np.nan
    # first sample at or beyond t0
    lo = 0
    hi = n
    while lo < hi:
        mid = (lo + hi) // 2
        if ts[mid] < t0:
            lo = mid + 1
        else:
            hi = mid
    left = lo - 1
    right = lo
    m = min(support, n)
    sel = np.empty(m, dtype=np.int64)
    for k in range(m):
        if left < 0:
            sel[k] = right
            right += 1
        elif right >= n:
            sel[k] = left
            left -= 1
        elif t0 - ts[left] <= ts[right] - t0:
            sel[k] = left
            left -= 1
        else:
            sel[k] = right
            right += 1
    tm = 0.0
    dm = 0.0
    for k in range(m):
        tm += ts[sel[k]]
        dm += ds[sel[k]]
    tm /= m
    dm /= m
    sxy = 0.0
    sxx = 0.0
    for k in range(m):
        dt = ts[sel[k]] - tm
        sxy += dt * (ds[sel[k]] - dm)
        sxx += dt * dt
    if sxx == 0.0:
        return np.nan
    return dm + (sxy / sxx) * (t0 - tm)


@njit(cache=True)
def fill_direction(depth, valid, du, dv, support, out):
    """Fill every invalid pixel from the 1D line through it along ``(du, dv)``.

    ``out`` (same shape as ``depth``) receives the fitted depth or NaN.
    """
    h, w = depth.shape
    ts = np.empty(max(h, w), dtype=np.float64)
    ds = np.empty(max(h, w), dtype=np.float64)
    holes = np.empty(max(h, w), dtype=np.int64)
    for v0 in range(h):
        for u0 in range(w):
            # start of a line: predecessor is outside the image
            pu = u0 - du
            pv = v0 - dv
            if 0 <= pu < w and 0 <= pv < h:
                continue
            n = 0
            nh = 0
            u = u0
            v = v0
            t = 0
            while 0 <= u < w and 0 <= v < h:
                if valid[v, u]:
                    ts[n] = t
                    ds[n] = depth[v, u]
                    n += 1
                else:
                    holes[nh] = t
                    nh += 1
                u += du
                v += dv
                t += 1
            for k in range(nh):
                t0 = holes[k]
                val = fill_line(ts[:n], ds[:n], float(t0), support)
                out[v0 + t0 * dv, u0 + t0 * du] = val if val > 0.0 else np.nan


@njit(cache=True)
def edge_energy(h1, h2, kappa3):
    lo = min(h1, h2)
    ratio = abs(h1 - h2) / lo
    if ratio > 1.0:
        ratio = 1.0
    phi = kappa3 - ratio
    return -math.log(phi * phi)


@njit(cache=True)
def _send(theta, gamma, back, dsrc, ksrc, ddst, kdst, kappa3, out):
    # out[b] = min_a gamma*theta[a] - back[a] + E(dsrc[a], ddst[b]), normalised
    best = np.inf
    for b in range(kdst):
        m = np.inf
        for a in range(ksrc):
            val = gamma * theta[a] - back[a] + edge_energy(dsrc[a], ddst[b], kappa3)
            if val < m:
                m = val
        out[b] = m
        if m < best:
            best = m
    for b in range(kdst):
        out[b] -= best
    for b in range(kdst, out.shape[0]):
        out[b] = 0.0


@njit(cache=True)
def _neighbors(i, w, n_nodes, active):
    # (left, right, up, down) indices, -1 when absent or inactive
    u = i % w
    left = i - 1 if u > 0 and active[i - 1] else -1
    right = i + 1 if u < w - 1 and active[i + 1] else -1
    up = i - w if i - w >= 0 and active[i - w] else -1
    down = i + w if i + w < n_nodes and active[i + w] else -1
    return left, right, up, down


@njit(cache=True)
def trw_messages(unary, depths, counts, w, kappa3, iterations):
    """Sequential TRW-S message passing (Kolmogorov's monotonic-chain schedule).

    Args:
        unary: ``(N, K)`` node energies; entries past ``counts`` are ignored.
        depths: ``(N, K)`` label depths.
        counts: ``(N,)`` label counts; zero marks a node outside the graph.
        w: grid width.
        kappa3: edge truncation constant.
        iterations: forward+backward sweeps.

    Returns:
        ``(N, 4, K)`` messages indexed by receiving node and side.
    """
    n_nodes, kmax = unary.shape
    active = counts > 0
    msg = np.zeros((n_nodes, 4, kmax))
    theta = np.empty(kmax)
    buf = np.empty(kmax)
    gamma = np.ones(n_nodes)
    for i in range(n_nodes):
        if not active[i]:
            continue
        left, right, up, down = _neighbors(i, w, n_nodes, active)
        n_prev = (left >= 0) + (up >= 0)
        n_next = (right >= 0) + (down >= 0)
        ns = max(n_prev, n_next)
        if ns > 0:
            gamma[i] = 1.0 / ns
    for _ in range(iterations):
        for sweep in range(2):
            for k in range(n_nodes):
                i = k if sweep == 0 else n_nodes - 1 - k
                if not active[i]:
                    continue
                ki = counts[i]
                for a in range(ki):
                    theta[a] = unary[i, a] + msg[i, 0, a] + msg[i, 1, a] \
                        + msg[i, 2, a] + msg[i, 3, a]
                left, right, up, down = _neighbors(i, w, n_nodes, active)
                if sweep == 0:
                    if right >= 0:
                        _send(theta, gamma[i], msg[i, 1], depths[i], ki, depths[right],
                              counts[right], kappa3, buf)
                        msg[right, 0, :] = buf
                    if down >= 0:
                        _send(theta, gamma[i], msg[i, 3], depths[i], ki, depths[down],
                              counts[down], kappa3, buf)
                        msg[down, 2, :] = buf
                else:
                    if left >= 0:
                        _send(theta, gamma[i], msg[i, 0], depths[i], ki, depths[left],
                              counts[left], kappa3, buf)
                        msg[left, 1, :] = buf
                    if up >= 0:
                        _send(theta, gamma[i], msg[i, 2], depths[i], ki, depths[up],
                              counts[up], kappa3, buf)
                        msg[up, 3, :] = buf
    return msg


@njit(cache=True)
def belief_labels(unary, depths, counts, msg):
    """Independent argmin of the reparameterised beliefs; ties -> lowest index."""
    n_nodes = unary.shape[0]
    labels = np.full(n_nodes, -1, dtype=np.int64)
    for i in range(n_nodes):
        best = np.inf
        for a in range(counts[i]):
            val = unary[i, a] + msg[i, 0, a] + msg[i, 1, a] + msg[i, 2, a] + msg[i, 3, a]
            if val < best:
                best = val
                labels[i] = a
    return labels


@njit(cache=True)
def conditional_labels(unary, depths, counts, w, kappa3, msg, reverse):
    """Label nodes in sweep order, conditioning on already labelled neighbors.

    Neighbors not yet labelled contribute their messages instead.
    """
    n_nodes = unary.shape[0]
    active = counts > 0
    labels = np.full(n_nodes, -1, dtype=np.int64)
    for k in range(n_nodes):
        i = n_nodes - 1 - k if reverse else k
        if not active[i]:
            continue
        nb = _neighbors(i, w, n_nodes, active)
        best = np.inf
        for a in range(counts[i]):
            val = unary[i, a]
            for side in range(4):
                j = nb[side]
                if j < 0:
                    continue
                if labels[j] >= 0:
                    val += edge_energy(depths[j, labels[j]], depths[i, a], kappa3)
                else:
                    val += msg[i, side, a]
            if val < best:
                best = val
                labels[i] = a
    return labels


@njit(cache=True)
def labeling_energy(unary, depths, counts, w, kappa3, labels):
    n_nodes = unary.shape[0]
    total = 0.0
    for i in range(n_nodes):
        if counts[i] == 0:
            continue
        total += unary[i, labels[i]]
        if (i % w) < w - 1 and counts[i + 1] > 0:
            total += edge_energy(depths[i, labels[i]], depths[i + 1, labels[i + 1]], kappa3)
        if i + w < n_nodes and counts[i + w] > 0:
            total += edge_energy(depths[i, labels[i]], depths[i + w, labels[i + w]], kappa3)
    return total
