"""Compiled kernels for the per-step guidance hot path.

These mirror the numpy implementations in :mod:`kinematics` and :mod:`sdf`
for the common unbatched float64 case; the numpy versions remain the
reference (and handle batches and complex-step inputs).
"""

import numba
import numpy as np

_SMALL_TH2 = 1e-6


@numba.njit(cache=True)
def _coeffs(w0, w1, w2):
    th2 = w0 * w0 + w1 * w1 + w2 * w2
    if th2 < _SMALL_TH2:
        a = 1 - th2 / 6 + th2 ** 2 / 120 - th2 ** 3 / 5040
        b = 0.5 - th2 / 24 + th2 ** 2 / 720 - th2 ** 3 / 40320
        c = 1 / 6 - th2 / 120 + th2 ** 2 / 5040 - th2 ** 3 / 362880
    else:
        th = np.sqrt(th2)
        s = np.sin(th)
        a = s / th
        b = (1 - np.cos(th)) / th2
        c = (th - s) / (th2 * th)
    return a, b, c


@numba.njit(cache=True)
def _skew_poly(w0, w1, w2, p, q, out):
    """out = I + p K + q K^2 for K = skew(w)."""
    # K^2 = w w^T - |w|^2 I
    n2 = w0 * w0 + w1 * w1 + w2 * w2
    out[0, 0] = 1.0 + q * (w0 * w0 - n2)
    out[1, 1] = 1.0 + q * (w1 * w1 - n2)
    out[2, 2] = 1.0 + q * (w2 * w2 - n2)
    out[0, 1] = -p * w2 + q * w0 * w1
    out[1, 0] = p * w2 + q * w0 * w1
    out[0, 2] = p * w1 + q * w0 * w2
    out[2, 0] = -p * w1 + q * w0 * w2
    out[1, 2] = -p * w0 + q * w1 * w2
    out[2, 1] = p * w0 + q * w1 * w2


@numba.njit(cache=True)
def _matmul3(A, B, out):
    for i in range(3):
        for j in range(3):
            out[i, j] = A[i, 0] * B[0, j] + A[i, 1] * B[1, j] + A[i, 2] * B[2, j]


@numba.njit(cache=True)
def gripper_rollout(p0, R0, chunk, gx, gr, probes):
    H = chunk.shape[0]
    P = probes.shape[0]
    pos = np.empty((H, P, 3))
    rots = np.empty((H, 3, 3))
    E = np.empty((3, 3))
    x0, x1, x2 = p0[0], p0[1], p0[2]
    R = R0
    for i in range(H):
        x0 += chunk[i, 0] * gx[0]
        x1 += chunk[i, 1] * gx[1]
        x2 += chunk[i, 2] * gx[2]
        w0, w1, w2 = chunk[i, 3] * gr[0], chunk[i, 4] * gr[1], chunk[i, 5] * gr[2]
        a, b, _ = _coeffs(w0, w1, w2)
        _skew_poly(w0, w1, w2, a, b, E)
        _matmul3(E, R, rots[i])
        R = rots[i]
        for p in range(P):
            q0, q1, q2 = probes[p, 0], probes[p, 1], probes[p, 2]
            pos[i, p, 0] = x0 + R[0, 0] * q0 + R[0, 1] * q1 + R[0, 2] * q2
            pos[i, p, 1] = x1 + R[1, 0] * q0 + R[1, 1] * q1 + R[1, 2] * q2
            pos[i, p, 2] = x2 + R[2, 0] * q0 + R[2, 1] * q1 + R[2, 2] * q2
    return pos, rots


@numba.njit(cache=True)
def gripper_vjp(R0, chunk, gx, gr, probes, G, GR):
    """G: (B, H, P, 3) position cotangents, GR: (B, H, 3, 3) rotation cotangents."""
    B = G.shape[0]
    H, D = chunk.shape
    P = probes.shape[0]
    Es = np.empty((H, 3, 3))
    Js = np.empty((H, 3, 3))
    Rs = np.empty((H + 1, 3, 3))
    # RE[i] = R_{i-1}^T E_i^T, the factor mapping the rotation adjoint to the increment
    RE = np.empty((H, 3, 3))
    Rs[0] = R0
    for i in range(H):
        w0, w1, w2 = chunk[i, 3] * gr[0], chunk[i, 4] * gr[1], chunk[i, 5] * gr[2]
        a, b, c = _coeffs(w0, w1, w2)
        _skew_poly(w0, w1, w2, a, b, Es[i])
        _skew_poly(w0, w1, w2, b, c, Js[i])
        _matmul3(Es[i], Rs[i], Rs[i + 1])
        _matmul3(Rs[i].T, Es[i].T, RE[i])
    out = np.zeros((B, H, D))
    gbar = np.empty((3, 3))
    tmp = np.empty((3, 3))
    M = np.empty((3, 3))
    acc = np.empty(3)
    for bi in range(B):
        acc[:] = 0.0
        for i in range(H - 1, -1, -1):
            if i == H - 1:
                gbar[:, :] = GR[bi, i]
            else:
                _matmul3(Es[i + 1].T, gbar, tmp)
                for k in range(3):
                    for m in range(3):
                        gbar[k, m] = GR[bi, i, k, m] + tmp[k, m]
            for p in range(P):
                for k in range(3):
                    gk = G[bi, i, p, k]
                    acc[k] += gk
                    for m in range(3):
                        gbar[k, m] += gk * probes[p, m]
            for k in range(3):
                out[bi, i, k] = acc[k] * gx[k]
            _matmul3(gbar, RE[i], M)
            w0 = M[2, 1] - M[1, 2]
            w1 = M[0, 2] - M[2, 0]
            w2 = M[1, 0] - M[0, 1]
            J = Js[i]
            for k in range(3):
                out[bi, i, 3 + k] = (J[0, k] * w0 + J[1, k] * w1 + J[2, k] * w2) * gr[k]
    return out


@numba.njit(cache=True)
def _interp(arr, i0, j0, k0, i1, j1, k1, fx, fy, fz):
    c00 = arr[i0, j0, k0] * (1 - fx) + arr[i1, j0, k0] * fx
    c01 = arr[i0, j0, k1] * (1 - fx) + arr[i1, j0, k1] * fx
    c10 = arr[i0, j1, k0] * (1 - fx) + arr[i1, j1, k0] * fx
    c11 = arr[i0, j1, k1] * (1 - fx) + arr[i1, j1, k1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


@numba.njit(cache=True)
def _axis_setup(xa, origin_a, voxel, n):
    u = (xa - origin_a) / voxel - 0.5
    hi = n - 1
    uc = min(max(u, 0.0), hi)
    off = (u - uc) * voxel
    lo = int(np.floor(uc))
    cap = hi - 1 if hi - 1 > 0 else 0
    if lo > cap:
        lo = cap
    up = lo + 1 if lo + 1 < hi else hi
    return lo, up, uc - lo, off


@numba.njit(cache=True)
def trilinear_value_grad(dist, node_grad, origin, voxel, x):
    """Distance and gradient at points ``x`` (M, 3); mirrors the numpy query."""
    M = x.shape[0]
    nx, ny, nz = dist.shape
    gxa, gya, gza = node_grad[0], node_grad[1], node_grad[2]
    d_out = np.empty(M)
    g_out = np.empty((M, 3))
    for m in range(M):
        i0, i1, fx, ox = _axis_setup(x[m, 0], origin[0], voxel, nx)
        j0, j1, fy, oy = _axis_setup(x[m, 1], origin[1], voxel, ny)
        k0, k1, fz, oz = _axis_setup(x[m, 2], origin[2], voxel, nz)
        onorm = np.sqrt(ox * ox + oy * oy + oz * oz)
        d_out[m] = _interp(dist, i0, j0, k0, i1, j1, k1, fx, fy, fz) + onorm
        g_out[m, 0] = ox / onorm if ox != 0.0 else _interp(gxa, i0, j0, k0, i1, j1, k1, fx, fy, fz)
        g_out[m, 1] = oy / onorm if oy != 0.0 else _interp(gya, i0, j0, k0, i1, j1, k1, fx, fy, fz)
        g_out[m, 2] = oz / onorm if oz != 0.0 else _interp(gza, i0, j0, k0, i1, j1, k1, fx, fy, fz)
    return d_out, g_out


@numba.njit(cache=True)
def log_barrier(dist, grad, barrier_d, floor_eps):
    """Summed ``-log(max(d, eps))`` over ``d <= barrier_d`` and its spatial gradient."""
    M = dist.shape[0]
    energy = 0.0
    g_out = np.zeros((M, 3))
    for m in range(M):
        d = dist[m]
        if d <= barrier_d:
            f = d if d > floor_eps else floor_eps
            energy -= np.log(f)
            for a in range(3):
                g_out[m, a] = -grad[m, a] / f
    return energy, g_out
