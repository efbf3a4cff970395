"""Hot numeric kernels.

Every kernel has a numba ``@njit`` loop implementation and a vectorised numpy
fallback with identical semantics.  The numba path is used when numba imports
and ``RSG_NUMBA`` is not set to ``0``/``false``/``off``; tests run both.
"""
from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _flag() -> bool:
    return os.environ.get("RSG_NUMBA", "1").strip().lower() not in ("0", "false", "off", "no")


HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and _flag()


def njit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# -- edge-conditioned aggregation -------------------------------------------
#   out[dst[e]] += inv_deg[dst[e]] * W[e] @ X[src[e]]

@njit
def _edge_matvec_fwd_nb(W, X, src, dst, inv_deg, n):
    ne, do, di = W.shape
    out = np.zeros((n, do))
    for e in range(ne):
        s = src[e]
        d = dst[e]
        c = inv_deg[d]
        for o in range(do):
            acc = 0.0
            for i in range(di):
                acc += W[e, o, i] * X[s, i]
            out[d, o] += c * acc
    return out


@njit
def _edge_matvec_bwd_nb(G, W, X, src, dst, inv_deg):
    ne, do, di = W.shape
    gW = np.empty_like(W)
    gX = np.zeros_like(X)
    for e in range(ne):
        s = src[e]
        d = dst[e]
        c = inv_deg[d]
        for o in range(do):
            go = c * G[d, o]
            for i in range(di):
                gW[e, o, i] = go * X[s, i]
                gX[s, i] += go * W[e, o, i]
    return gW, gX


def _edge_matvec_fwd_np(W, X, src, dst, inv_deg, n):
    msg = np.einsum("eoi,ei->eo", W, X[src]) * inv_deg[dst][:, None]
    out = np.zeros((n, W.shape[1]))
    np.add.at(out, dst, msg)
    return out


def _edge_matvec_bwd_np(G, W, X, src, dst, inv_deg):
    ge = G[dst] * inv_deg[dst][:, None]
    gW = ge[:, :, None] * X[src][:, None, :]
    gX = np.zeros_like(X)
    np.add.at(gX, src, np.einsum("eoi,eo->ei", W, ge))
    return gW, gX


# -- 2-D convolution, batch x channel x H x W, square kernel ------------------

def conv_out_size(h: int, k: int, stride: int, pad: int) -> int:
    return (h + 2 * pad - k) // stride + 1


@njit
def _pad_nb(x, pad):
    B, C, H, W_ = x.shape
    xp = np.zeros((B, C, H + 2 * pad, W_ + 2 * pad))
    xp[:, :, pad:pad + H, pad:pad + W_] = x
    return xp


# Loops run (b, o, c, u, v, r, q) so the inner loop walks contiguous columns
# with one weight held in a register.
@njit
def _conv2d_fwd_nb(x, w, stride, pad):
    B, C, H, W_ = x.shape
    O, _, K, _ = w.shape
    Ho = (H + 2 * pad - K) // stride + 1
    Wo = (W_ + 2 * pad - K) // stride + 1
    xp = _pad_nb(x, pad)
    out = np.zeros((B, O, Ho, Wo))
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for u in range(K):
                    for v in range(K):
                        wv = w[o, c, u, v]
                        for r in range(Ho):
                            row = r * stride + u
                            for q in range(Wo):
                                out[b, o, r, q] += wv * xp[b, c, row, q * stride + v]
    return out


@njit
def _conv2d_bwd_nb(g, x, w, stride, pad):
    B, C, H, W_ = x.shape
    O, _, K, _ = w.shape
    Ho, Wo = g.shape[2], g.shape[3]
    xp = _pad_nb(x, pad)
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for b in range(B):
        for o in range(O):
            for c in range(C):
                for u in range(K):
                    for v in range(K):
                        wv = w[o, c, u, v]
                        acc = 0.0
                        for r in range(Ho):
                            row = r * stride + u
                            for q in range(Wo):
                                go = g[b, o, r, q]
                                col = q * stride + v
                                acc += go * xp[b, c, row, col]
                                gxp[b, c, row, col] += go * wv
                        gw[o, c, u, v] += acc
    return gxp[:, :, pad:pad + H, pad:pad + W_].copy(), gw


def _im2col(x, K, stride, pad):
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (K, K), axis=(2, 3))
    return win[:, :, ::stride, ::stride]  # B, C, Ho, Wo, K, K


def _conv2d_fwd_np(x, w, stride, pad):
    cols = _im2col(x, w.shape[2], stride, pad)
    return np.einsum("bcrquv,ocuv->borq", cols, w, optimize=True)


def _conv2d_bwd_np(g, x, w, stride, pad):
    K = w.shape[2]
    cols = _im2col(x, K, stride, pad)
    gw = np.einsum("borq,bcrquv->ocuv", g, cols, optimize=True)
    B, C, H, W_ = x.shape
    Ho, Wo = g.shape[2], g.shape[3]
    gxp = np.zeros((B, C, H + 2 * pad, W_ + 2 * pad))
    gcols = np.einsum("borq,ocuv->bcrquv", g, w, optimize=True)
    for u in range(K):
        for v in range(K):
            gxp[:, :, u:u + stride * Ho:stride, v:v + stride * Wo:stride] += gcols[:, :, :, :, u, v]
    return gxp[:, :, pad:pad + H, pad:pad + W_], gw


# -- Adam ----------------------------------------------------------------------

@njit
def _adam_nb(p, g, m, v, lr_t, b1, b2, eps_t):
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(pf.size):
        gi = gf[i]
        mi = b1 * mf[i] + (1.0 - b1) * gi
        vi = b2 * vf[i] + (1.0 - b2) * gi * gi
        mf[i] = mi
        vf[i] = vi
        pf[i] -= lr_t * mi / (np.sqrt(vi) + eps_t)


def _adam_np(p, g, m, v, lr_t, b1, b2, eps_t):
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * g * g
    p -= lr_t * m / (np.sqrt(v) + eps_t)


# -- polygon containment --------------------------------------------------------

@njit
def _points_in_polygon_nb(px, py, poly):
    n = px.size
    m = poly.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    for k in range(n):
        x = px[k]
        y = py[k]
        inside = False
        j = m - 1
        for i in range(m):
            xi, yi = poly[i, 0], poly[i, 1]
            xj, yj = poly[j, 0], poly[j, 1]
            if (yi > y) != (yj > y):
                xc = (xj - xi) * (y - yi) / (yj - yi) + xi
                if x < xc:
                    inside = not inside
            j = i
        out[k] = inside
    return out


def _points_in_polygon_np(px, py, poly):
    xi, yi = poly[:, 0], poly[:, 1]
    xj, yj = np.roll(xi, 1), np.roll(yi, 1)
    y = py[:, None]
    x = px[:, None]
    straddle = (yi > y) != (yj > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = (xj - xi) * (y - yi) / (yj - yi) + xi
    crossings = straddle & (x < xc)
    return (crossings.sum(axis=1) % 2).astype(bool)


# -- canonical labelling: lexicographically smallest permuted code ----------------

@njit
def _min_perm_code_nb(M, perms):
    P, n = perms.shape
    best = np.empty(n * n, dtype=np.int64)
    cur = np.empty(n * n, dtype=np.int64)
    for k in range(n * n):
        best[k] = M[perms[0, k // n], perms[0, k % n]]
    for p in range(1, P):
        smaller = False
        decided = False
        for k in range(n * n):
            c = M[perms[p, k // n], perms[p, k % n]]
            cur[k] = c
            if not decided:
                if c < best[k]:
                    smaller = True
                    decided = True
                elif c > best[k]:
                    decided = True
                    break
        if smaller:
            for k in range(n * n):
                best[k] = cur[k]
    return best


def _min_perm_code_np(M, perms):
    codes = M[perms[:, :, None], perms[:, None, :]].reshape(perms.shape[0], -1)
    order = np.lexsort(codes.T[::-1])
    return codes[order[0]].astype(np.int64)


def _select(nb, py):
    return nb if USE_NUMBA else py


def set_backend(use_numba: bool) -> None:
    """Switch every kernel between the numba and numpy implementations."""
    global USE_NUMBA, edge_matvec_fwd, edge_matvec_bwd, conv2d_fwd, conv2d_bwd
    global adam_update, points_in_polygon, min_perm_code
    USE_NUMBA = bool(use_numba) and HAVE_NUMBA
    edge_matvec_fwd = _select(_edge_matvec_fwd_nb, _edge_matvec_fwd_np)
    edge_matvec_bwd = _select(_edge_matvec_bwd_nb, _edge_matvec_bwd_np)
    conv2d_fwd = _select(_conv2d_fwd_nb, _conv2d_fwd_np)
    conv2d_bwd = _select(_conv2d_bwd_nb, _conv2d_bwd_np)
    adam_update = _select(_adam_nb, _adam_np)
    points_in_polygon = _select(_points_in_polygon_nb, _points_in_polygon_np)
    min_perm_code = _select(_min_perm_code_nb, _min_perm_code_np)


set_backend(USE_NUMBA)

KERNELS = {
    "edge_matvec_fwd": (_edge_matvec_fwd_nb, _edge_matvec_fwd_np),
    "edge_matvec_bwd": (_edge_matvec_bwd_nb, _edge_matvec_bwd_np),
    "conv2d_fwd": (_conv2d_fwd_nb, _conv2d_fwd_np),
    "conv2d_bwd": (_conv2d_bwd_nb, _conv2d_bwd_np),
    "adam_update": (_adam_nb, _adam_np),
    "points_in_polygon": (_points_in_polygon_nb, _points_in_polygon_np),
    "min_perm_code": (_min_perm_code_nb, _min_perm_code_np),
}
