"""Brute-force reference implementations used by the tests.

These deliberately avoid vectorization and the package's own helpers.
"""

import math

import numpy as np


def blur_oracle(x, k):
    h, w, c = x.shape
    n = k.shape[0]
    r = n // 2
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                acc = 0.0
                for a in range(n):
                    for b in range(n):
                        ii = min(max(i - (a - r), 0), h - 1)
                        jj = min(max(j - (b - r), 0), w - 1)
                        acc += k[a, b] * x[ii, jj, ch]
                out[i, j, ch] = acc
    return out


def keys_cubic(d, a=-0.5):
    d = abs(d)
    if d <= 1:
        return (a + 2) * d**3 - (a + 3) * d**2 + 1
    if d < 2:
        return a * d**3 - 5 * a * d**2 + 8 * a * d - 4 * a
    return 0.0


def _taps(i, s, n):
    u = (i + 0.5) * s - 0.5
    pos = range(math.floor(u - 2 * s), math.ceil(u + 2 * s) + 1)
    ws = [keys_cubic((u - p) / s) for p in pos]
    tot = sum(ws)
    return [(min(max(p, 0), n - 1), wgt / tot) for p, wgt in zip(pos, ws)]


def downsample_oracle(x, s):
    h, w, c = x.shape
    out = np.zeros((h // s, w // s, c))
    for i in range(h // s):
        for j in range(w // s):
            for ch in range(c):
                acc = 0.0
                for pi, wi in _taps(i, s, h):
                    for pj, wj in _taps(j, s, w):
                        acc += wi * wj * x[pi, pj, ch]
                out[i, j, ch] = acc
    return out


def haze_oracle(x, t, a):
    h, w, c = x.shape
    out = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            for ch in range(c):
                out[i, j, ch] = x[i, j, ch] * t[i, j] + a[ch] * (1 - t[i, j])
    return out


def rain_oracle(x, r):
    out = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        out[idx] = min(1.0, max(0.0, x[idx] + r[idx]))
    return out


def l1_oracle(a, b):
    tot = 0.0
    flat_a, flat_b = a.ravel().tolist(), b.ravel().tolist()
    for u, v in zip(flat_a, flat_b):
        tot += abs(u - v)
    return tot / len(flat_a)


def gaussian_1d(size=11, sigma=1.5):
    c = (size - 1) / 2
    g = [math.exp(-((i - c) ** 2) / (2 * sigma * sigma)) for i in range(size)]
    s = sum(g)
    return [v / s for v in g]


def psnr_oracle(a, b):
    qa = np.floor(a * 255 + 0.5)
    qb = np.floor(b * 255 + 0.5)
    tot = 0.0
    for u, v in zip(qa.ravel().tolist(), qb.ravel().tolist()):
        tot += (u - v) ** 2
    mse = tot / qa.size
    return math.inf if mse == 0 else 10 * math.log10(255.0**2 / mse)


def ssim_oracle(a, b):
    """Per-window SSIM with an explicit 11x11 Gaussian, averaged over windows and channels."""
    qa = np.floor(a * 255 + 0.5)
    qb = np.floor(b * 255 + 0.5)
    g1 = gaussian_1d()
    g = [[g1[i] * g1[j] for j in range(11)] for i in range(11)]
    c1, c2 = (0.01 * 255) ** 2, (0.03 * 255) ** 2
    h, w, c = qa.shape
    per_channel = []
    for ch in range(c):
        vals = []
        for i in range(h - 10):
            for j in range(w - 10):
                mx = my = sxx = syy = sxy = 0.0
                for di in range(11):
                    for dj in range(11):
                        wt = g[di][dj]
                        x = qa[i + di, j + dj, ch]
                        y = qb[i + di, j + dj, ch]
                        mx += wt * x
                        my += wt * y
                        sxx += wt * x * x
                        syy += wt * y * y
                        sxy += wt * x * y
                vx, vy, cxy = sxx - mx * mx, syy - my * my, sxy - mx * my
                vals.append(((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2)))
        per_channel.append(sum(vals) / len(vals))
    return sum(per_channel) / c
