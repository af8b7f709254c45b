# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops. Signatures mirror :mod:`dsrlab._pykernels` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, floor, pow, cos, sin, atan2, hypot, M_PI

cnp.import_array()

cdef extern from *:
    int __builtin_parityll(unsigned long long)


def lfsr_bits(int order, cnp.int64_t[::1] taps, Py_ssize_t n):
    """Binary sequence with a[k] = XOR_t a[k - t], seeded with ``order`` ones."""
    cdef unsigned long long mask = 0, state, full, bit
    cdef Py_ssize_t k, i
    cdef cnp.uint8_t[::1] out
    for i in range(taps.shape[0]):
        mask |= 1ULL << (taps[i] - 1)
    full = (1ULL << order) - 1
    state = full
    arr = np.empty(n, dtype=np.uint8)
    out = arr
    for k in range(n):
        if k < order:
            out[k] = 1
            continue
        bit = __builtin_parityll(state & mask)
        out[k] = <cnp.uint8_t>bit
        state = ((state << 1) | bit) & full
    return arr


def lfsr_period(int order, cnp.int64_t[::1] taps):
    """Steps until the register state first repeats its all-ones seed."""
    cdef unsigned long long mask = 0, state, full, bit, limit
    cdef unsigned long long steps = 0
    cdef Py_ssize_t i
    for i in range(taps.shape[0]):
        mask |= 1ULL << (taps[i] - 1)
    full = (1ULL << order) - 1
    limit = full + 1
    state = full
    while True:
        bit = __builtin_parityll(state & mask)
        state = ((state << 1) | bit) & full
        steps += 1
        if state == full or steps > limit:
            break
    return int(steps)


def direct_convolve(const double[::1] x, const double[::1] h):
    cdef Py_ssize_t nx = x.shape[0], nh = h.shape[0], n, m, lo, hi
    cdef double acc
    arr = np.zeros(nx + nh - 1, dtype=np.float64)
    cdef double[::1] out = arr
    for n in range(nx + nh - 1):
        lo = n - nx + 1 if n - nx + 1 > 0 else 0
        hi = n if n < nh - 1 else nh - 1
        acc = 0.0
        for m in range(lo, hi + 1):
            acc += x[n - m] * h[m]
        out[n] = acc
    return arr


def direct_xcorr(const double[::1] s, const double[::1] y, Py_ssize_t max_lag):
    """R[n] = sum_l s[l] y[l+n] for n in [-max_lag, max_lag]; index 0 is lag -max_lag."""
    cdef Py_ssize_t ns = s.shape[0], ny = y.shape[0], lag, l, lo, hi
    cdef double acc
    arr = np.zeros(2 * max_lag + 1, dtype=np.float64)
    cdef double[::1] out = arr
    for lag in range(-max_lag, max_lag + 1):
        lo = -lag if -lag > 0 else 0
        hi = ns if ns < ny - lag else ny - lag
        acc = 0.0
        for l in range(lo, hi):
            acc += s[l] * y[l + lag]
        out[lag + max_lag] = acc
    return arr


cdef inline double _wrap(double a):
    while a > M_PI:
        a -= 2.0 * M_PI
    while a < -M_PI:
        a += 2.0 * M_PI
    return a


def image_taps(
    const double[::1] room,
    const double[::1] src,
    const double[::1] mic,
    const double[::1] refl,
    double c,
    double fs,
    int max_order,
    double src_az,
    double src_el,
    double p,
    double q,
    double eps,
    int mic_kind,
    double mic_az,
    double mic_el,
    Py_ssize_t n_samples,
):
    """Directional image method, accumulating rounded-delay taps into a buffer."""
    cdef int nx, ny, nz, ux, uy, uz, order
    cdef int hx0, hx1, hy0, hy1, hz0, hz1
    cdef double mx, my, mz, dx, dy, dz, dist, gain, theta, phi
    cdef double ax, ay, az, cospsi, ox, oy, oz
    cdef double ix, iy, iz
    cdef Py_ssize_t idx
    cdef int N = max_order
    arr = np.zeros(n_samples, dtype=np.float64)
    cdef double[::1] h = arr

    ox = cos(mic_el) * cos(mic_az)
    oy = cos(mic_el) * sin(mic_az)
    oz = sin(mic_el)

    for nx in range(-N, N + 1):
        for ux in range(2):
            hx0 = abs(nx - ux)
            hx1 = abs(nx)
            if hx0 + hx1 > N:
                continue
            for ny in range(-N, N + 1):
                for uy in range(2):
                    hy0 = abs(ny - uy)
                    hy1 = abs(ny)
                    if hx0 + hx1 + hy0 + hy1 > N:
                        continue
                    for nz in range(-N, N + 1):
                        for uz in range(2):
                            hz0 = abs(nz - uz)
                            hz1 = abs(nz)
                            order = hx0 + hx1 + hy0 + hy1 + hz0 + hz1
                            if order > N:
                                continue
                            # mirrored microphone; departure direction from the source
                            mx = (1 - 2 * ux) * mic[0] - (1 - 2 * ux) * 2.0 * nx * room[0]
                            my = (1 - 2 * uy) * mic[1] - (1 - 2 * uy) * 2.0 * ny * room[1]
                            mz = (1 - 2 * uz) * mic[2] - (1 - 2 * uz) * 2.0 * nz * room[2]
                            dx = mx - src[0]
                            dy = my - src[1]
                            dz = mz - src[2]
                            dist = sqrt(dx * dx + dy * dy + dz * dz)
                            idx = <Py_ssize_t>floor(dist / c * fs + 0.5)
                            if idx >= n_samples:
                                continue
                            gain = (
                                pow(refl[0], hx0) * pow(refl[1], hx1)
                                * pow(refl[2], hy0) * pow(refl[3], hy1)
                                * pow(refl[4], hz0) * pow(refl[5], hz1)
                            ) / (4.0 * M_PI * dist)
                            if gain == 0.0:
                                continue
                            if p != 0.0 or q != 0.0:
                                theta = _wrap(atan2(dy, dx) - src_az)
                                phi = _wrap(atan2(dz, hypot(dx, dy)) - src_el)
                                gain *= (
                                    pow((1.0 + cos(theta)) / 2.0, p)
                                    * pow((1.0 + cos(phi)) / 2.0, q)
                                    + eps
                                ) / (1.0 + eps)
                            if mic_kind == 1:
                                # arrival direction: image source seen from the real mic
                                ix = (1 - 2 * ux) * src[0] + 2.0 * nx * room[0]
                                iy = (1 - 2 * uy) * src[1] + 2.0 * ny * room[1]
                                iz = (1 - 2 * uz) * src[2] + 2.0 * nz * room[2]
                                ax = ix - mic[0]
                                ay = iy - mic[1]
                                az = iz - mic[2]
                                cospsi = (ax * ox + ay * oy + az * oz) / dist
                                gain *= 0.5 * (1.0 + cospsi)
                            h[idx] += gain
    return arr
