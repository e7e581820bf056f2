"""Slow, obviously-correct reference computations used by the tests."""

import math

import numpy as np


def two_pass(values):
    """(n, min, max, sum, mean, population std) by the textbook two-pass method."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        return 0, math.nan, math.nan, 0.0, math.nan, math.nan
    mean = math.fsum(vals) / n
    var = math.fsum((v - mean) ** 2 for v in vals) / n
    return n, min(vals), max(vals), math.fsum(vals), mean, math.sqrt(var)


def window_stats(points, spec, window):
    """Gather every point of each cell's window, then compute its statistics.

    Returns a (13, h, w) array in A..M layer order with NaN on empty windows
    (and 0 for the returns sum).
    """
    h, w = spec.height, spec.width
    col = np.floor((points.x - spec.x0) / spec.resolution).astype(int)
    row = np.floor((spec.y0 - points.y) / spec.resolution).astype(int)
    inside = (col >= 0) & (col < w) & (row >= 0) & (row < h)
    buckets = {}
    for i in np.flatnonzero(inside):
        buckets.setdefault((int(row[i]), int(col[i])), []).append(int(i))
    attrs = (points.intensity, points.number_of_returns.astype(float), points.z)
    half = window // 2
    out = np.full((13, h, w), np.nan)
    out[8] = 0.0
    for r in range(h):
        for c in range(w):
            idx = []
            for rr in range(r - half, r + half + 1):
                for cc in range(c - half, c + half + 1):
                    idx.extend(buckets.get((rr, cc), ()))
            if not idx:
                continue
            idx = np.array(idx)
            for base, a in zip((0, 4, 9), attrs):
                vals = a[idx]
                mean = vals.sum() / vals.size
                std = math.sqrt(((vals - mean) ** 2).sum() / vals.size)
                out[base:base + 4, r, c] = (vals.min(), vals.max(), mean, std)
            out[8, r, c] = attrs[1][idx].sum()
    return out


def flood_fill_count(bits):
    """Number of 4-connected components, by explicit stack flood fill."""
    bits = np.asarray(bits, bool)
    seen = np.zeros_like(bits)
    h, w = bits.shape
    n = 0
    for r in range(h):
        for c in range(w):
            if bits[r, c] and not seen[r, c]:
                n += 1
                stack = [(r, c)]
                seen[r, c] = True
                while stack:
                    y, x = stack.pop()
                    for ny, nx in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)):
                        if 0 <= ny < h and 0 <= nx < w and bits[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            stack.append((ny, nx))
    return n


def steepest_ascent(surface):
    """Label each valid cell by the local maximum its 8-neighbour uphill walk ends on."""
    h, w = surface.shape
    valid = ~np.isnan(surface)
    peak_of = {}
    out = np.zeros((h, w), dtype=int)
    peaks = {}
    for r in range(h):
        for c in range(w):
            if not valid[r, c]:
                continue
            y, x = r, c
            path = []
            while (y, x) not in peak_of:
                path.append((y, x))
                best = (surface[y, x], y, x)
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = y + dy, x + dx
                        if 0 <= ny < h and 0 <= nx < w and valid[ny, nx] and surface[ny, nx] > best[0]:
                            best = (surface[ny, nx], ny, nx)
                if (best[1], best[2]) == (y, x):
                    peak_of[(y, x)] = peaks.setdefault((y, x), len(peaks) + 1)
                    break
                y, x = best[1], best[2]
            for p in path:
                peak_of[p] = peak_of[(y, x)]
            out[r, c] = peak_of[(r, c)]
    return out, peaks


def covariance_eccentricity(rows, cols):
    """sqrt(1 - l2/l1) from a hand-rolled 2x2 covariance and closed-form eigenvalues."""
    n = len(rows)
    mr = sum(rows) / n
    mc = sum(cols) / n
    a = sum((c - mc) ** 2 for c in cols) / n
    b = sum((c - mc) * (r - mr) for r, c in zip(rows, cols)) / n
    d = sum((r - mr) ** 2 for r in rows) / n
    tr, det = a + d, a * d - b * b
    disc = math.sqrt(max(tr * tr / 4 - det, 0.0))
    l1, l2 = tr / 2 + disc, tr / 2 - disc
    return 0.0 if l1 <= 0 else math.sqrt(max(0.0, 1 - l2 / l1))
