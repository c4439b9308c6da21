"""Periodic B-spline evaluation of multi-component fields (odd orders 1, 3, 5).

Coefficients come from ``scipy.ndimage.spline_filter(..., mode="grid-wrap")``;
evaluation matches ``map_coordinates(..., mode="grid-wrap", prefilter=False)``
but computes the tap weights once per point for all components.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _weights(order, t, w):
    if order == 1:
        w[0] = 1.0 - t
        w[1] = t
    elif order == 3:
        s = 1.0 - t
        w[0] = s * s * s / 6.0
        w[1] = (4.0 - 6.0 * t * t + 3.0 * t * t * t) / 6.0
        w[2] = (4.0 - 6.0 * s * s + 3.0 * s * s * s) / 6.0
        w[3] = t * t * t / 6.0
    else:
        t2 = t * t
        t3 = t2 * t
        t4 = t3 * t
        t5 = t4 * t
        s = 1.0 - t
        w[0] = s * s * s * s * s / 120.0
        w[1] = (26.0 - 50.0 * t + 20.0 * t2 + 20.0 * t3 - 20.0 * t4 + 5.0 * t5) / 120.0
        w[2] = (66.0 - 60.0 * t2 + 30.0 * t4 - 10.0 * t5) / 120.0
        w[3] = (26.0 + 50.0 * t + 20.0 * t2 - 20.0 * t3 - 20.0 * t4 + 10.0 * t5) / 120.0
        w[4] = (1.0 + 5.0 * t + 10.0 * t2 + 10.0 * t3 + 5.0 * t4 - 5.0 * t5) / 120.0
        w[5] = t5 / 120.0


@njit(cache=True)
def eval2(coef, px, py, order, out):
    C = coef.shape[0]
    n1 = coef.shape[1] - order - 1
    n2 = coef.shape[2] - order - 1
    m = order + 1
    off = (order - 1) // 2
    wx = np.empty(m)
    wy = np.empty(m)
    for p in range(px.size):
        fx = np.floor(px[p])
        fy = np.floor(py[p])
        _weights(order, px[p] - fx, wx)
        _weights(order, py[p] - fy, wy)
        bx = int(fx) - off
        by = int(fy) - off
        bx = bx % n1
        by = by % n2
        for c in range(C):
            acc = 0.0
            for a in range(m):
                row = 0.0
                for b in range(m):
                    row += wy[b] * coef[c, bx + a, by + b]
                acc += wx[a] * row
            out[c, p] = acc


@njit(cache=True)
def eval3(coef, px, py, pz, order, out):
    C = coef.shape[0]
    n1 = coef.shape[1] - order - 1
    n2 = coef.shape[2] - order - 1
    n3 = coef.shape[3] - order - 1
    m = order + 1
    off = (order - 1) // 2
    wx = np.empty(m)
    wy = np.empty(m)
    wz = np.empty(m)
    for p in range(px.size):
        fx = np.floor(px[p])
        fy = np.floor(py[p])
        fz = np.floor(pz[p])
        _weights(order, px[p] - fx, wx)
        _weights(order, py[p] - fy, wy)
        _weights(order, pz[p] - fz, wz)
        bx = int(fx) - off
        by = int(fy) - off
        bz = int(fz) - off
        bx = bx % n1
        by = by % n2
        bz = bz % n3
        for c in range(C):
            acc = 0.0
            for a in range(m):
                plane = 0.0
                for b in range(m):
                    row = 0.0
                    for e in range(m):
                        row += wz[e] * coef[c, bx + a, by + b, bz + e]
                    plane += wy[b] * row
                acc += wx[a] * plane
            out[c, p] = acc


def pad(coef: np.ndarray, order: int) -> np.ndarray:
    """Append a periodic halo of ``order + 1`` cells so the kernels never wrap indices."""
    d = coef.ndim - 1
    return np.pad(coef, [(0, 0)] + [(0, order + 1)] * d, mode="wrap")


def evaluate(coef: np.ndarray, idx: np.ndarray, order: int) -> np.ndarray:
    """coef: padded (C, n+order+1, ...), idx (d, P) in grid-index units -> (C, P)."""
    out = np.empty((coef.shape[0], idx.shape[1]))
    idx = np.ascontiguousarray(idx)
    if idx.shape[0] == 2:
        eval2(coef, idx[0], idx[1], order, out)
    else:
        eval3(coef, idx[0], idx[1], idx[2], order, out)
    return out
