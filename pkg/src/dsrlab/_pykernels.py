"""Pure-Python/numpy versions of the compiled kernels in ``_ckernels.pyx``.

Selected automatically when the extension is not built, or when
``DSRLAB_PURE_PYTHON=1`` is set. Results agree with the compiled path to
floating-point summation order.
"""

import numpy as np


def lfsr_bits(order, taps, n):
    mask = 0
    for t in taps:
        mask |= 1 << (int(t) - 1)
    full = (1 << order) - 1
    state = full
    out = np.empty(n, dtype=np.uint8)
    out[: min(order, n)] = 1
    for k in range(order, n):
        bit = bin(state & mask).count("1") & 1
        out[k] = bit
        state = ((state << 1) | bit) & full
    return out


def lfsr_period(order, taps):
    mask = 0
    for t in taps:
        mask |= 1 << (int(t) - 1)
    full = (1 << order) - 1
    state = full
    steps = 0
    while True:
        bit = bin(state & mask).count("1") & 1
        state = ((state << 1) | bit) & full
        steps += 1
        if state == full or steps > full + 1:
            return steps


def direct_convolve(x, h):
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    out = np.zeros(len(x) + len(h) - 1)
    for m, hm in enumerate(h):
        out[m : m + len(x)] += hm * x
    return out


def direct_xcorr(s, y, max_lag):
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ns, ny = len(s), len(y)
    out = np.zeros(2 * max_lag + 1)
    for lag in range(-max_lag, max_lag + 1):
        lo = max(0, -lag)
        hi = min(ns, ny - lag)
        if hi > lo:
            out[lag + max_lag] = np.dot(s[lo:hi], y[lo + lag : hi + lag])
    return out


def _wrap(a):
    return (a + np.pi) % (2.0 * np.pi) - np.pi


def image_taps(room, src, mic, refl, c, fs, max_order, src_az, src_el, p, q,
               eps, mic_kind, mic_az, mic_el, n_samples):
    N = int(max_order)
    room = np.asarray(room, dtype=np.float64)
    src = np.asarray(src, dtype=np.float64)
    mic = np.asarray(mic, dtype=np.float64)
    refl = np.asarray(refl, dtype=np.float64)
    h = np.zeros(n_samples)

    # per-axis lattice: (n, u) pairs with wall hit counts at 0 and at L
    n = np.repeat(np.arange(-N, N + 1), 2)
    u = np.tile([0, 1], 2 * N + 1)
    hit0 = np.abs(n - u)
    hit1 = np.abs(n)
    keep = hit0 + hit1 <= N
    n, u, hit0, hit1 = n[keep], u[keep], hit0[keep], hit1[keep]
    sign = 1 - 2 * u

    axes = []
    for a in range(3):
        m_img = sign * mic[a] - sign * 2.0 * n * room[a]
        s_img = sign * src[a] + 2.0 * n * room[a]
        g = refl[2 * a] ** hit0 * refl[2 * a + 1] ** hit1
        axes.append((m_img - src[a], s_img - mic[a], g, hit0 + hit1))

    dxs, axs, gx, ox = axes[0]
    orient = np.array([np.cos(mic_el) * np.cos(mic_az),
                       np.cos(mic_el) * np.sin(mic_az),
                       np.sin(mic_el)])
    dy_all, ay_all, gy_all, oy_all = axes[1]
    dz_all, az_all, gz_all, oz_all = axes[2]
    for i in range(len(dxs)):
        ord_xy = ox[i] + oy_all[:, None] + oz_all[None, :]
        valid = ord_xy <= N
        dx = dxs[i]
        dy = np.broadcast_to(dy_all[:, None], valid.shape)[valid]
        dz = np.broadcast_to(dz_all[None, :], valid.shape)[valid]
        dist = np.sqrt(dx * dx + dy * dy + dz * dz)
        idx = np.floor(dist / c * fs + 0.5).astype(np.int64)
        gain = (gx[i] * np.broadcast_to(gy_all[:, None], valid.shape)[valid]
                * np.broadcast_to(gz_all[None, :], valid.shape)[valid]) / (4.0 * np.pi * dist)
        if p != 0.0 or q != 0.0:
            theta = _wrap(np.arctan2(dy, dx) - src_az)
            phi = _wrap(np.arctan2(dz, np.hypot(dx, dy)) - src_el)
            gain = gain * (((1.0 + np.cos(theta)) / 2.0) ** p
                           * ((1.0 + np.cos(phi)) / 2.0) ** q + eps) / (1.0 + eps)
        if mic_kind == 1:
            ax = axs[i]
            ay = np.broadcast_to(ay_all[:, None], valid.shape)[valid]
            az = np.broadcast_to(az_all[None, :], valid.shape)[valid]
            cospsi = (ax * orient[0] + ay * orient[1] + az * orient[2]) / dist
            gain = gain * 0.5 * (1.0 + cospsi)
        inside = (idx < n_samples) & (gain != 0.0)
        np.add.at(h, idx[inside], gain[inside])
    return h
