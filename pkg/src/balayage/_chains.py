"""Compiled per-walker Markov chains (numba).

Each walker owns a Mersenne-Twister stream seeded from its own 32-bit seed, so
a walker consumes the same random sequence whatever the stop geometry; this
gives common random numbers walker by walker and makes results independent of
chunking and worker count.

Ball lookups use a uniform cell grid over the ball centers (CSR layout).
"""

from __future__ import annotations

import math

import numba as nb
import numpy as np

ABSORBED, STOPPED_OUTER, LOST, OVERRUN = 0, 1, 2, 3
BRUTE_LIMIT = 32
RING_LIMIT = 2


class BallIndex:
    """Cell grid over ball centers; cell size at least twice the largest radius."""

    def __init__(self, centers: np.ndarray, radii: np.ndarray):
        centers = np.ascontiguousarray(centers, dtype=np.float64)
        radii = np.ascontiguousarray(radii, dtype=np.float64)
        m, d = centers.shape if centers.size else (0, centers.shape[1] if centers.ndim == 2 else 1)
        self.centers, self.radii = centers, radii
        self.rmax = float(radii.max()) if m else 0.0
        if m <= BRUTE_LIMIT:
            self.lo = np.zeros(d)
            self.cell = 1.0
            self.shape = np.ones(d, dtype=np.int64)
            self.start = np.zeros(2, dtype=np.int64)
            self.items = np.zeros(0, dtype=np.int64)
            return
        lo = centers.min(axis=0)
        hi = centers.max(axis=0)
        span = np.maximum(hi - lo, 1e-12)
        vol = float(np.prod(span))
        cell = max(2.0 * self.rmax, (vol / m) ** (1.0 / d) if vol > 0 else 0.0, 1e-12)
        shape = np.maximum(np.floor(span / cell).astype(np.int64) + 1, 1)
        # keep the table size proportional to the number of balls
        while np.prod(shape.astype(float)) > 8.0 * m + 64:
            cell *= 1.25
            shape = np.maximum(np.floor(span / cell).astype(np.int64) + 1, 1)
        idx = np.minimum(np.floor((centers - lo) / cell).astype(np.int64), shape - 1)
        strides = np.cumprod(np.concatenate([[1], shape[:-1]]))
        flat = idx @ strides
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=int(np.prod(shape)))
        self.lo, self.cell, self.shape = lo, float(cell), shape
        self.start = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.items = order.astype(np.int64)

    def arrays(self):
        return (self.centers, self.radii, self.rmax, self.lo, self.cell, self.shape, self.start, self.items)


@nb.njit(cache=True)
def _dist(x, c):
    s = 0.0
    for j in range(x.shape[0]):
        t = x[j] - c[j]
        s += t * t
    return math.sqrt(s)


@nb.njit(cache=True)
def _nearest(x, centers, radii, rmax, lo, cell, shape, start, items):
    """(gap to the nearest ball, its index, lower bound for the distance to the union)."""
    m = radii.shape[0]
    best = np.inf
    bi = -1
    if m == 0:
        return best, bi, best
    if m <= BRUTE_LIMIT:
        for i in range(m):
            g = _dist(x, centers[i]) - radii[i]
            if g < best:
                best = g
                bi = i
        return best, bi, best
    d = x.shape[0]
    ci = np.empty(d, np.int64)
    box = 0.0
    for j in range(d):
        t = (x[j] - lo[j]) / cell
        ci[j] = int(math.floor(t))
        hi = lo[j] + shape[j] * cell
        if x[j] < lo[j]:
            box += (lo[j] - x[j]) ** 2
        elif x[j] > hi:
            box += (x[j] - hi) ** 2
    box = math.sqrt(box)
    if box - rmax > (RING_LIMIT + 1) * cell:
        return best, bi, box - rmax
    off = np.empty(d, np.int64)
    bound = 0.0
    for ring in range(RING_LIMIT + 1):
        n_side = 2 * ring + 1
        total = 1
        for j in range(d):
            total *= n_side
        for code in range(total):
            c = code
            cheb = 0
            inside = True
            flat = 0
            stride = 1
            for j in range(d):
                o = c % n_side - ring
                c //= n_side
                off[j] = o
                if abs(o) > cheb:
                    cheb = abs(o)
                k = ci[j] + o
                if k < 0 or k >= shape[j]:
                    inside = False
                flat += k * stride
                stride *= shape[j]
            if cheb != ring or not inside:
                continue
            for p in range(start[flat], start[flat + 1]):
                i = items[p]
                g = _dist(x, centers[i]) - radii[i]
                if g < best:
                    best = g
                    bi = i
        bound = ring * cell - rmax
        if box - rmax > bound:
            bound = box - rmax
        if best <= bound:
            return best, bi, best
    return best, bi, min(best, bound)


@nb.njit(cache=True)
def _locate(x, centers, radii, rmax, lo, cell, shape, start, items):
    m = radii.shape[0]
    if m == 0:
        return -1
    if m <= BRUTE_LIMIT:
        for i in range(m):
            if _dist(x, centers[i]) <= radii[i]:
                return i
        return -1
    d = x.shape[0]
    ci = np.empty(d, np.int64)
    for j in range(d):
        ci[j] = int(math.floor((x[j] - lo[j]) / cell))
        if ci[j] < -1 or ci[j] > shape[j]:
            return -1
    total = 1
    for j in range(d):
        total *= 3
    for code in range(total):
        c = code
        inside = True
        flat = 0
        stride = 1
        for j in range(d):
            k = ci[j] + c % 3 - 1
            c //= 3
            if k < 0 or k >= shape[j]:
                inside = False
            flat += k * stride
            stride *= shape[j]
        if not inside:
            continue
        for p in range(start[flat], start[flat + 1]):
            i = items[p]
            if _dist(x, centers[i]) <= radii[i]:
                return i
    return -1


@nb.njit(cache=True)
def _region_margin(x, oc, orad, hc, hrad, whole):
    out = np.inf
    if not whole:
        out = -np.inf
        for i in range(orad.shape[0]):
            v = orad[i] - _dist(x, oc[i])
            if v > out:
                out = v
    for i in range(hrad.shape[0]):
        v = _dist(x, hc[i]) - hrad[i]
        if v < out:
            out = v
    return out


@nb.njit(cache=True)
def _region_contains(x, oc, orad, hc, hrad, whole):
    inside = whole
    if not whole:
        for i in range(orad.shape[0]):
            if _dist(x, oc[i]) < orad[i]:
                inside = True
                break
    if not inside:
        return False
    for i in range(hrad.shape[0]):
        if _dist(x, hc[i]) <= hrad[i]:
            return False
    return True


@nb.njit(cache=True)
def _radial(x, c, r, out):
    n = _dist(x, c)
    for j in range(x.shape[0]):
        if n > 0:
            out[j] = c[j] + r * (x[j] - c[j]) / n
        else:
            out[j] = c[j] + (r if j == 0 else 0.0)


@nb.njit(cache=True)
def _region_project(x, oc, orad, hc, hrad, whole, out):
    best = np.inf
    kind = -1
    idx = -1
    if not whole:
        best = -np.inf
        for i in range(orad.shape[0]):
            v = orad[i] - _dist(x, oc[i])
            if v > best:
                best = v
                idx = i
        kind = 0
    for i in range(hrad.shape[0]):
        v = _dist(x, hc[i]) - hrad[i]
        if v < best:
            best = v
            idx = i
            kind = 1
    if kind == 0:
        _radial(x, oc[idx], orad[idx], out)
    elif kind == 1:
        _radial(x, hc[idx], hrad[idx], out)
    else:
        for j in range(x.shape[0]):
            out[j] = x[j]


@nb.njit(cache=True)
def _direction(d, out):
    if d == 1:
        out[0] = 1.0 if np.random.random() < 0.5 else -1.0
        return
    s = 0.0
    for j in range(d):
        out[j] = np.random.standard_normal()
        s += out[j] * out[j]
    s = math.sqrt(s)
    for j in range(d):
        out[j] /= s


@nb.njit(cache=True)
def _kelvin_return(x, o, r_hit, d, u, out):
    """Landing point on the sphere ``S(o, r_hit)`` for a Brownian path from ``x`` outside it,
    given that it returns (Poisson kernel at the Kelvin image)."""
    dx = _dist(x, o)
    scale = (r_hit / dx) ** 2
    img = np.empty(d)
    for j in range(d):
        img[j] = o[j] + (x[j] - o[j]) * scale
    eta = _dist(img, o) / r_hit
    env = (1.0 + eta) / (1.0 - eta) ** (d - 1)
    dy2 = (eta * r_hit) ** 2
    while True:
        _direction(d, u)
        for j in range(d):
            out[j] = o[j] + r_hit * u[j]
        dens = r_hit ** (d - 2) * (r_hit * r_hit - dy2) * _dist(img, out) ** (-d)
        if np.random.random() * env < dens:
            return


@nb.njit(cache=True)
def walk_classical(starts, seeds, centers, radii, rmax, lo, cell, shape, start, items,
                   oc, orad, hc, hrad, has_outer, dom_c, dom_r, has_dom,
                   eps_shell, shell_ratio, max_steps, origin, r_hit, trigger, escape_mode,
                   euler_sigma, near):
    """Walk-on-spheres with an absorption shell.

    Beyond ``trigger`` (well outside ``S(origin, r_hit)``, so the rejection
    sampler for the landing point stays efficient) the walk either escapes for
    good or returns to ``S(origin, r_hit)``, both exactly.  ``euler_sigma > 0`` switches to
    Gaussian increments of that size whenever the walker is within ``near`` of the balls."""
    n, d = starts.shape
    pos = starts.copy()
    status = np.full(n, -1, np.int64)
    labels = np.full(n, -2, np.int64)
    steps = np.zeros(n, np.int64)
    returns = 0
    u = np.empty(d)
    tmp = np.empty(d)
    for w in range(n):
        np.random.seed(seeds[w])
        x = pos[w]
        k = 0
        while True:
            if k >= max_steps:
                status[w] = OVERRUN
                break
            gap, bi, bnd = _nearest(x, centers, radii, rmax, lo, cell, shape, start, items)
            dw = _region_margin(x, oc, orad, hc, hrad, False) if has_outer else np.inf
            dx = dom_r - _dist(x, dom_c) if has_dom else np.inf
            if bi >= 0 and gap < min(eps_shell, shell_ratio * radii[bi]):
                _radial(x, centers[bi], radii[bi], tmp)
                x[:] = tmp
                status[w] = ABSORBED
                labels[w] = bi
                break
            if dw < eps_shell:
                _region_project(x, oc, orad, hc, hrad, False, tmp)
                x[:] = tmp
                status[w] = STOPPED_OUTER
                labels[w] = -1
                break
            if dx < eps_shell:
                status[w] = LOST
                break
            if escape_mode:
                do = _dist(x, origin)
                if do > trigger:
                    k += 1
                    if np.random.random() >= (r_hit / do) ** (d - 2):
                        status[w] = LOST
                        break
                    _kelvin_return(x, origin, r_hit, d, u, tmp)
                    x[:] = tmp
                    returns += 1
                    continue
            rho = min(bnd, dw, dx)
            k += 1
            if euler_sigma > 0 and bnd < near:
                for j in range(d):
                    x[j] += euler_sigma * np.random.standard_normal()
                j_in = _locate(x, centers, radii, rmax, lo, cell, shape, start, items)
                if j_in >= 0:
                    _radial(x, centers[j_in], radii[j_in], tmp)
                    x[:] = tmp
                    status[w] = ABSORBED
                    labels[w] = j_in
                    break
                if has_outer and not _region_contains(x, oc, orad, hc, hrad, False):
                    _region_project(x, oc, orad, hc, hrad, False, tmp)
                    x[:] = tmp
                    status[w] = STOPPED_OUTER
                    labels[w] = -1
                    break
                if has_dom and _dist(x, dom_c) >= dom_r:
                    status[w] = LOST
                    break
                continue
            _direction(d, u)
            for j in range(d):
                x[j] += rho * u[j]
        steps[w] = k
    return pos, status, labels, steps, returns


@nb.njit(cache=True)
def walk_stable(starts, seeds, alpha, centers, radii, rmax, lo, cell, shape, start, items,
                oc, orad, hc, hrad, has_outer, dom_c, dom_r, has_dom,
                max_steps, origin, escape, escape_mode, radius_factor):
    """Exact ball-exit skeleton of the isotropic alpha-stable process.

    From ``x`` the chain jumps out of ``B(x, radius_factor * rho)``, ``rho`` the
    distance to the stop set; ``r^2/|Z - x|^2`` is Beta(alpha/2, 1 - alpha/2).
    Returns the distance from ``origin`` at escape for the truncation bound.
    """
    n, d = starts.shape
    pos = starts.copy()
    status = np.full(n, -1, np.int64)
    labels = np.full(n, -2, np.int64)
    steps = np.zeros(n, np.int64)
    esc_dist = np.zeros(n)
    u = np.empty(d)
    y = np.empty(d)
    a2 = alpha / 2.0
    b2 = 1.0 - alpha / 2.0
    for w in range(n):
        np.random.seed(seeds[w])
        x = pos[w]
        k = 0
        while True:
            if k >= max_steps:
                status[w] = OVERRUN
                break
            gap, bi, bnd = _nearest(x, centers, radii, rmax, lo, cell, shape, start, items)
            dw = _region_margin(x, oc, orad, hc, hrad, False) if has_outer else np.inf
            dx = dom_r - _dist(x, dom_c) if has_dom else np.inf
            rho = radius_factor * min(bnd, dw, dx)
            t = np.random.beta(a2, b2)
            rad = rho / math.sqrt(max(t, 1e-300))
            _direction(d, u)
            for j in range(d):
                y[j] = x[j] + rad * u[j]
            k += 1
            x[:] = y
            if has_dom and _dist(y, dom_c) >= dom_r:
                status[w] = LOST
                break
            j_in = _locate(y, centers, radii, rmax, lo, cell, shape, start, items)
            if j_in >= 0:
                status[w] = ABSORBED
                labels[w] = j_in
                break
            if has_outer and not _region_contains(y, oc, orad, hc, hrad, False):
                status[w] = STOPPED_OUTER
                labels[w] = -1
                break
            if escape_mode:
                do = _dist(y, origin)
                if do > escape:
                    status[w] = LOST
                    esc_dist[w] = do
                    break
        steps[w] = k
    return pos, status, labels, steps, esc_dist
