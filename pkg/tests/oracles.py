"""Independent reference implementations used only by the tests.

Everything here is written as plain loops so it shares no code path with
the vectorized library implementations it checks.
"""

import math

import numpy as np


def conv2d_direct(x, k, b=None, stride=1, padding=0, dilation=1):
    n, c, h, w = x.shape
    o, _, kh, kw = k.shape
    ho = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    wo = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for ni in range(n):
        for oi in range(o):
            for yi in range(ho):
                for xi in range(wo):
                    acc = 0.0 if b is None else float(b[oi])
                    for ci in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                r = yi * stride + i * dilation - padding
                                s = xi * stride + j * dilation - padding
                                if 0 <= r < h and 0 <= s < w:
                                    acc += x[ni, ci, r, s] * k[oi, ci, i, j]
                    out[ni, oi, yi, xi] = acc
    return out


def matmul_loops(a, b):
    n, f = a.shape
    g = b.shape[1]
    out = np.zeros((n, g))
    for i in range(n):
        for j in range(g):
            for t in range(f):
                out[i, j] += a[i, t] * b[t, j]
    return out


def bilinear_loops(img, out_h, out_w):
    """Half-pixel-centre bilinear resize of a 2-D array, edge-clamped."""
    in_h, in_w = img.shape
    out = np.zeros((out_h, out_w))
    for i in range(out_h):
        sy = (i + 0.5) * in_h / out_h - 0.5
        sy = min(max(sy, 0.0), in_h - 1)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, in_h - 1)
        fy = sy - y0
        for j in range(out_w):
            sx = (j + 0.5) * in_w / out_w - 0.5
            sx = min(max(sx, 0.0), in_w - 1)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, in_w - 1)
            fx = sx - x0
            top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
            bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
            out[i, j] = top * (1 - fy) + bot * fy
    return out


def adam_scalar(w, grad_fn, steps, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = grad_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1 ** t)
        vhat = v / (1 - b2 ** t)
        w = w - lr * mhat / (math.sqrt(vhat) + eps)
    return w


def tally(pred, label, positive=1):
    tp = fp = tn = fn = 0
    for p, y in zip(pred, label):
        if p == positive and y == positive:
            tp += 1
        elif p == positive:
            fp += 1
        elif y == positive:
            fn += 1
        else:
            tn += 1
    return tp, fp, tn, fn
