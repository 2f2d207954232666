"""Hot loops: matmul, the selective scan (sequential and prefix-tree) and its
reverse pass.

Every kernel has two implementations with identical signatures:
``*_nb`` (numba, explicit loops) and ``*_np`` (numpy, vectorised over the
non-recurrent axes). The public names at the bottom bind to one of them
according to :mod:`lithium_ssm._accel`. Both are always importable so the
tests and the benchmark can compare them directly.

Array layout for the scan (all float64, C-contiguous):

    abar, bbar : (B, L, D, N)
    c          : (B, L, N)
    x, y, dy   : (B, L, D)
"""

import numpy as np

from ._accel import USE_NUMBA, njit


# ---------------------------------------------------------------------------
# matmul: fixed left-to-right accumulation over the inner index

@njit
def matmul_nb(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for p in range(k):
            aip = a[i, p]
            for j in range(n):
                out[i, j] += aip * b[p, j]
    return out


def matmul_np(a, b):
    m, k = a.shape
    out = np.zeros((m, b.shape[1]))
    # one rank-1 update per inner index keeps the k-order of matmul_nb
    for p in range(k):
        out += a[:, p:p + 1] * b[p]
    return out


# ---------------------------------------------------------------------------
# sequential scan

@njit
def scan_nb(abar, bbar, c, x):
    nb, nl, nd, nn = abar.shape
    y = np.zeros((nb, nl, nd))
    h = np.zeros(nn)
    for b in range(nb):
        for d in range(nd):
            h[:] = 0.0
            for t in range(nl):
                xt = x[b, t, d]
                acc = 0.0
                for n in range(nn):
                    h[n] = abar[b, t, d, n] * h[n] + bbar[b, t, d, n] * xt
                    acc += c[b, t, n] * h[n]
                y[b, t, d] = acc
    return y


def scan_np(abar, bbar, c, x):
    nb, nl, nd, nn = abar.shape
    y = np.empty((nb, nl, nd))
    h = np.zeros((nb, nd, nn))
    for t in range(nl):
        h = abar[:, t] * h + bbar[:, t] * x[:, t, :, None]
        y[:, t] = np.einsum("bdn,bn->bd", h, c[:, t])
    return y


# ---------------------------------------------------------------------------
# prefix-tree scan over (a, u) pairs with u = bbar * x.
#   (a1, u1) o (a2, u2) = (a2 * a1, a2 * u1 + u2)
# The b-component of the inclusive prefix is the hidden state (h_0 = 0).

@njit
def prefix_scan_nb(abar, bbar, c, x):
    # Blelloch up-sweep / down-sweep on a power-of-two padded buffer.
    nb, nl, nd, nn = abar.shape
    size = 1
    while size < nl:
        size *= 2
    y = np.zeros((nb, nl, nd))
    a = np.empty(size)
    u = np.empty(size)
    for b in range(nb):
        for d in range(nd):
            for n in range(nn):
                for t in range(nl):
                    a[t] = abar[b, t, d, n]
                    u[t] = bbar[b, t, d, n] * x[b, t, d]
                for t in range(nl, size):
                    a[t] = 1.0
                    u[t] = 0.0
                # keep the original elements for the inclusive fix-up
                a0 = a[:nl].copy()
                u0 = u[:nl].copy()
                stride = 1
                while stride < size:
                    for i in range(2 * stride - 1, size, 2 * stride):
                        j = i - stride
                        u[i] = a[i] * u[j] + u[i]
                        a[i] = a[i] * a[j]
                    stride *= 2
                a[size - 1] = 1.0
                u[size - 1] = 0.0
                stride = size // 2
                while stride >= 1:
                    for i in range(2 * stride - 1, size, 2 * stride):
                        j = i - stride
                        la, lu = a[j], u[j]
                        a[j] = a[i]
                        u[j] = u[i]
                        # right child: exclusive(parent) then left subtree
                        u[i] = la * u[i] + lu
                        a[i] = la * a[i]
                    stride //= 2
                for t in range(nl):
                    h = a0[t] * u[t] + u0[t]
                    y[b, t, d] += c[b, t, n] * h
    return y


def prefix_scan_np(abar, bbar, c, x):
    # Hillis-Steele doubling, vectorised over (B, D, N).
    nl = abar.shape[1]
    a = abar.copy()
    u = bbar * x[..., None]
    offset = 1
    while offset < nl:
        a_prev = a[:, :-offset]
        u_prev = u[:, :-offset]
        a_cur = a[:, offset:]
        u_new = a_cur * u_prev + u[:, offset:]
        a_new = a_cur * a_prev
        u = np.concatenate([u[:, :offset], u_new], axis=1)
        a = np.concatenate([a[:, :offset], a_new], axis=1)
        offset *= 2
    return np.einsum("bldn,bln->bld", u, c)


# ---------------------------------------------------------------------------
# reverse pass. Hidden states are recomputed, not taken from the forward.

@njit
def scan_backward_nb(abar, bbar, c, x, dy):
    nb, nl, nd, nn = abar.shape
    dabar = np.zeros_like(abar)
    dbbar = np.zeros_like(bbar)
    dc = np.zeros_like(c)
    dx = np.zeros_like(x)
    hs = np.zeros((nl + 1, nn))
    lam = np.zeros(nn)
    for b in range(nb):
        for d in range(nd):
            for n in range(nn):
                hs[0, n] = 0.0
            for t in range(nl):
                xt = x[b, t, d]
                for n in range(nn):
                    hs[t + 1, n] = abar[b, t, d, n] * hs[t, n] + bbar[b, t, d, n] * xt
            lam[:] = 0.0
            for t in range(nl - 1, -1, -1):
                g = dy[b, t, d]
                xt = x[b, t, d]
                acc = 0.0
                for n in range(nn):
                    if t + 1 < nl:
                        lam[n] = abar[b, t + 1, d, n] * lam[n] + c[b, t, n] * g
                    else:
                        lam[n] = c[b, t, n] * g
                    dabar[b, t, d, n] = lam[n] * hs[t, n]
                    dbbar[b, t, d, n] = lam[n] * xt
                    dc[b, t, n] += g * hs[t + 1, n]
                    acc += bbar[b, t, d, n] * lam[n]
                dx[b, t, d] = acc
    return dabar, dbbar, dc, dx


def scan_backward_np(abar, bbar, c, x, dy):
    nb, nl, nd, nn = abar.shape
    hs = np.zeros((nb, nl + 1, nd, nn))
    for t in range(nl):
        hs[:, t + 1] = abar[:, t] * hs[:, t] + bbar[:, t] * x[:, t, :, None]
    dabar = np.empty_like(abar)
    dbbar = np.empty_like(bbar)
    dx = np.empty_like(x)
    lam = np.zeros((nb, nd, nn))
    for t in range(nl - 1, -1, -1):
        inject = dy[:, t, :, None] * c[:, t, None, :]
        if t + 1 < nl:
            lam = abar[:, t + 1] * lam + inject
        else:
            lam = inject
        dabar[:, t] = lam * hs[:, t]
        dbbar[:, t] = lam * x[:, t, :, None]
        dx[:, t] = np.einsum("bdn,bdn->bd", bbar[:, t], lam)
    dc = np.einsum("bld,bldn->bln", dy, hs[:, 1:])
    return dabar, dbbar, dc, dx


if USE_NUMBA:
    matmul_kernel = matmul_nb
    scan_kernel = scan_nb
    prefix_scan_kernel = prefix_scan_nb
    scan_backward_kernel = scan_backward_nb
else:
    matmul_kernel = matmul_np
    scan_kernel = scan_np
    prefix_scan_kernel = prefix_scan_np
    scan_backward_kernel = scan_backward_np
