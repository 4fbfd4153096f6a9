"""Compiled inner loops: counter hash, field evaluation, Euler-Maruyama, ladder scan.

Fields are passed to the kernels as ``(kind, fp, seed)``: an integer tag, a
float64 parameter vector and a uint64 seed.  Everything here is pure and
allocation-free in the hot loops; callers own the scratch buffers.
"""

import math

import numpy as np
from numba import njit

RANDOM = 0
CONSTANT = 1
LAMINATE = 2

# per-axis cell budget for the mollified lattice field
MAXC = 16

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
# shifts cell indices into the non-negative range before hashing
_BIAS = np.int64(1) << np.int64(40)
_INV53 = 1.0 / 9007199254740992.0


@njit(cache=True, inline="always", error_model="numpy")
def splitmix64(x):
    z = x + _GOLDEN
    z = (z ^ (z >> _S30)) * _M1
    z = (z ^ (z >> _S27)) * _M2
    return z ^ (z >> _S31)


@njit(cache=True, inline="always", error_model="numpy")
def hash_uniform(h):
    """Map a 64-bit hash to [0, 1) using its top 53 bits."""
    return np.float64(h >> _S11) * _INV53


@njit(cache=True, inline="always", error_model="numpy")
def cell_hash(seed, d, z0, z1, z2):
    h = splitmix64(seed ^ np.uint64(z0 + _BIAS))
    h = splitmix64(h ^ np.uint64(z1 + _BIAS))
    if d == 3:
        h = splitmix64(h ^ np.uint64(z2 + _BIAS))
    return h


# splitmix64(channel + 1) for channel = 0..5
_CHANNEL_KEYS = np.array(
    [0x910A2DEC89025CC1, 0x975835DE1C9756CE, 0x1D0B14E4DB018FED,
     0x6E73E372E2338ACA, 0x63033B0CA389C35A, 0xBD64A5D9ADEFE000],
    dtype=np.uint64,
)


@njit(cache=True, inline="always", error_model="numpy")
def channel_uniform(cell_h, channel):
    return hash_uniform(splitmix64(cell_h ^ _CHANNEL_KEYS[channel]))


@njit(cache=True, inline="always", error_model="numpy")
def bump_cdf(s):
    if s <= -1.0:
        return 0.0
    if s >= 1.0:
        return 1.0
    s2 = s * s
    return 0.5 + (35.0 / 32.0) * s * (1.0 - s2 + 0.6 * s2 * s2 - s2 * s2 * s2 / 7.0)


@njit(cache=True, inline="always", error_model="numpy")
def bump_pdf(s):
    if s <= -1.0 or s >= 1.0:
        return 0.0
    t = 1.0 - s * s
    return (35.0 / 32.0) * t * t * t


@njit(cache=True, inline="always", error_model="numpy")
def _smoothed_channels(fp, seed, d, x, nch, wts, zeta):
    """Mollified cell values and gradients.

    wts: (2*d, MAXC) per-axis cell weights (rows 0..d-1) and their derivatives
    (rows d..2d-1).  zeta: (6, 4) with column 0 the smoothed value of each
    channel and columns 1..d its gradient.
    """
    c = fp[0]
    r = fp[1]
    lo0 = np.int64(0)
    lo1 = np.int64(0)
    lo2 = np.int64(0)
    n0 = 1
    n1 = 1
    n2 = 1
    for i in range(d):
        o = fp[5 + i]
        first = np.int64(math.floor((x[i] - r) / c - o))
        last = np.int64(math.floor((x[i] + r) / c - o))
        n = last - first + 1
        if i == 0:
            lo0 = first
            n0 = n
        elif i == 1:
            lo1 = first
            n1 = n
        else:
            lo2 = first
            n2 = n
        for j in range(n):
            left = c * (first + j + o)
            right = left + c
            wts[i, j] = bump_cdf((x[i] - left) / r) - bump_cdf((x[i] - right) / r)
            wts[d + i, j] = (bump_pdf((x[i] - left) / r) - bump_pdf((x[i] - right) / r)) / r
    for ch in range(nch):
        for k in range(4):
            zeta[ch, k] = 0.0
    if d == 2:
        n2 = 1
    for j2 in range(n2):
        w2 = wts[2, j2] if d == 3 else 1.0
        dw2 = wts[5, j2] if d == 3 else 0.0
        for j1 in range(n1):
            w1 = wts[1, j1]
            dw1 = wts[d + 1, j1]
            for j0 in range(n0):
                w0 = wts[0, j0]
                dw0 = wts[d, j0]
                psi = w0 * w1 * w2
                g0 = dw0 * w1 * w2
                g1 = w0 * dw1 * w2
                g2 = w0 * w1 * dw2
                if psi == 0.0 and g0 == 0.0 and g1 == 0.0 and g2 == 0.0:
                    continue
                h = cell_hash(seed, d, lo0 + j0, lo1 + j1, lo2 + j2)
                for ch in range(nch):
                    u = 2.0 * channel_uniform(h, ch) - 1.0
                    zeta[ch, 0] += u * psi
                    zeta[ch, 1] += u * g0
                    zeta[ch, 2] += u * g1
                    zeta[ch, 3] += u * g2


@njit(cache=True, inline="always", error_model="numpy")
def eval_point(kind, fp, seed, d, x, a, diva, gradv, wts, zeta):
    """Fill a, div a, grad V at x and return V.

    wts and zeta are scratch buffers of shapes (6, MAXC) and (6, 4).
    """
    for i in range(d):
        diva[i] = 0.0
        gradv[i] = 0.0
        for j in range(d):
            a[i, j] = 0.0
    if kind == CONSTANT:
        for i in range(d):
            a[i, i] = fp[0]
        return fp[1]
    if kind == LAMINATE:
        a0 = fp[0]
        a1 = fp[1]
        b0 = fp[2]
        b1 = fp[3]
        k = 2.0 * math.pi / fp[4]
        s = math.sin(k * x[0])
        co = math.cos(k * x[0])
        alpha = a0 * math.exp(a1 * s)
        a[0, 0] = alpha
        for i in range(1, d):
            a[i, i] = b0 + b1 * co
        diva[0] = alpha * a1 * k * co
        return 0.0
    # mollified lattice field
    nch = 2 + (d * (d - 1)) // 2
    _smoothed_channels(fp, seed, d, x, nch, wts, zeta)
    amp_a = fp[2]
    amp_v = fp[3]
    s_off = fp[4]
    mu = math.exp(amp_a * zeta[0, 0])
    ch = 1
    for i in range(d):
        a[i, i] = mu
        for j in range(i + 1, d):
            a[i, j] = mu * s_off * zeta[ch, 0]
            a[j, i] = a[i, j]
            ch += 1
    # (div a)_j = sum_i d_i a_ij
    for j in range(d):
        acc = 0.0
        for i in range(d):
            dmu = mu * amp_a * zeta[0, 1 + i]
            if i == j:
                acc += dmu
            else:
                idx = 1 + _pair_index(min(i, j), max(i, j), d)
                acc += s_off * (dmu * zeta[idx, 0] + mu * zeta[idx, 1 + i])
        diva[j] = acc
    vch = nch - 1
    for i in range(d):
        gradv[i] = amp_v * zeta[vch, 1 + i]
    return amp_v * zeta[vch, 0]


@njit(cache=True, inline="always", error_model="numpy")
def _pair_index(p, q, d):
    # order (0,1), (0,2), (1,2)
    if d == 2:
        return 0
    if p == 0:
        return q - 1
    return 2


@njit(cache=True, inline="always", error_model="numpy")
def sqrt_spd(m, d, out):
    if d == 2:
        det = m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
        s = math.sqrt(det)
        t = math.sqrt(m[0, 0] + m[1, 1] + 2.0 * s)
        out[0, 0] = (m[0, 0] + s) / t
        out[1, 1] = (m[1, 1] + s) / t
        out[0, 1] = m[0, 1] / t
        out[1, 0] = m[1, 0] / t
        return
    w, v = np.linalg.eigh(m[:d, :d])
    for i in range(d):
        for j in range(d):
            acc = 0.0
            for k in range(d):
                acc += v[i, k] * math.sqrt(w[k]) * v[j, k]
            out[i, j] = acc


@njit(cache=True, inline="always", error_model="numpy")
def tilted_coefficients(kind, fp, seed, d, lam, x, at, b, sig, work):
    """Time-changed field at x: fills e^{-2V}a, the Ito drift and the root; returns e^{-2V}."""
    a, diva, gradv, wts, zeta = work
    v = eval_point(kind, fp, seed, d, x, a, diva, gradv, wts, zeta)
    w = math.exp(-2.0 * v)
    for i in range(d):
        for j in range(d):
            at[i, j] = w * a[i, j]
    for j in range(d):
        agv = 0.0
        for i in range(d):
            agv += a[j, i] * gradv[i]
        b[j] = 0.5 * w * (diva[j] - 2.0 * agv) + lam * at[j, 0]
    sqrt_spd(at, d, sig)
    return w


def make_work(d):
    """Scratch tuple consumed by :func:`tilted_coefficients`."""
    return (
        np.zeros((3, 3)),
        np.zeros(3),
        np.zeros(3),
        np.zeros((6, MAXC)),
        np.zeros((6, 4)),
    )


@njit(cache=True, error_model="numpy")
def eval_batch(kind, fp, seed, d, pts, a_out, diva_out, v_out, gradv_out):
    a = np.zeros((3, 3))
    diva = np.zeros(3)
    gradv = np.zeros(3)
    wts = np.zeros((6, MAXC))
    zeta = np.zeros((6, 4))
    for n in range(pts.shape[0]):
        v_out[n] = eval_point(kind, fp, seed, d, pts[n], a, diva, gradv, wts, zeta)
        for i in range(d):
            diva_out[n, i] = diva[i]
            gradv_out[n, i] = gradv[i]
            for j in range(d):
                a_out[n, i, j] = a[i, j]


@njit(cache=True, error_model="numpy")
def em_path(kind, fp, seed, d, lam, dt, normals, pos, clock, start, work):
    """Euler-Maruyama from pos[start] with trapezoid clock.

    Fills pos[start + 1 : start + len(normals) + 1] and the matching clock
    entries.  Returns -1, or the absolute index of the first non-finite state.
    """
    at = np.zeros((3, 3))
    b = np.zeros(3)
    sig = np.zeros((3, 3))
    x = np.zeros(3)
    for i in range(d):
        x[i] = pos[start, i]
    sq = math.sqrt(dt)
    w = tilted_coefficients(kind, fp, seed, d, lam, x, at, b, sig, work)
    for n in range(normals.shape[0]):
        k = start + n
        for i in range(d):
            inc = b[i] * dt
            for j in range(d):
                inc += sig[i, j] * sq * normals[n, j]
            x[i] += inc
        for i in range(d):
            if not math.isfinite(x[i]):
                return k + 1
            pos[k + 1, i] = x[i]
        w_new = tilted_coefficients(kind, fp, seed, d, lam, x, at, b, sig, work)
        clock[k + 1] = clock[k] + 0.5 * dt * (w + w_new)
        w = w_new
    return -1


@njit(cache=True, error_model="numpy")
def em_to_clock(kind, fp, seed, d, lam, dt, target, normals, state, work):
    """Advance until the clock reaches target, interpolating the crossing step.

    state layout: [s, y(d), clock, done].  Returns steps taken or -1 on a
    non-finite state.
    """
    at = np.zeros((3, 3))
    b = np.zeros(3)
    sig = np.zeros((3, 3))
    x = np.zeros(3)
    xn = np.zeros(3)
    s = state[0]
    for i in range(d):
        x[i] = state[1 + i]
    clock = state[1 + d]
    sq = math.sqrt(dt)
    w = tilted_coefficients(kind, fp, seed, d, lam, x, at, b, sig, work)
    for n in range(normals.shape[0]):
        for i in range(d):
            inc = b[i] * dt
            for j in range(d):
                inc += sig[i, j] * sq * normals[n, j]
            xn[i] = x[i] + inc
            if not math.isfinite(xn[i]):
                return -1
        w_new = tilted_coefficients(kind, fp, seed, d, lam, xn, at, b, sig, work)
        c_new = clock + 0.5 * dt * (w + w_new)
        if c_new >= target:
            th = (target - clock) / (c_new - clock)
            for i in range(d):
                state[1 + i] = x[i] + th * (xn[i] - x[i])
            state[0] = s + th * dt
            state[1 + d] = target
            state[2 + d] = 1.0
            return n + 1
        for i in range(d):
            x[i] = xn[i]
        clock = c_new
        w = w_new
        s += dt
    state[0] = s
    for i in range(d):
        state[1 + i] = x[i]
    state[1 + d] = clock
    return normals.shape[0]


@njit(cache=True, error_model="numpy")
def em_exit_chunk(kind, fp, seed, d, lam, dt, half, rate, normals, uniforms, bridge, state, work):
    """Advance one path by up to len(normals) steps inside the cube (-half, half)^d.

    state layout: [t, x(d), clock, integral(d), exited, tau, x_tau(d), steps]
    where integral accumulates int_0^t e^{-rate s} X(s) ds by the trapezoid
    rule.  An exit seen at a grid point is placed at the linearly
    interpolated wall crossing.  With ``bridge`` a step whose endpoints are
    both inside is also ended with the Brownian-bridge crossing probability
    of each wall (local variance from the diagonal of the coefficient),
    decided by ``uniforms[n]``; the exit is then put at mid-step on the most
    likely wall.  Returns steps taken, or -1 on a non-finite state.
    """
    at = np.zeros((3, 3))
    b = np.zeros(3)
    sig = np.zeros((3, 3))
    x = np.zeros(3)
    xn = np.zeros(3)
    t = state[0]
    for i in range(d):
        x[i] = state[1 + i]
    clock = state[1 + d]
    sq = math.sqrt(dt)
    decay = math.exp(-rate * dt)
    e0 = math.exp(-rate * t)
    w = tilted_coefficients(kind, fp, seed, d, lam, x, at, b, sig, work)
    for n in range(normals.shape[0]):
        for i in range(d):
            inc = b[i] * dt
            for j in range(d):
                inc += sig[i, j] * sq * normals[n, j]
            xn[i] = x[i] + inc
            if not math.isfinite(xn[i]):
                return -1
        # first fraction of the step at which some coordinate reaches the wall
        theta = 2.0
        for i in range(d):
            if abs(xn[i]) >= half:
                wall = half if xn[i] > 0 else -half
                den = xn[i] - x[i]
                th = (wall - x[i]) / den if den != 0.0 else 0.0
                if th < 0.0:
                    th = 0.0
                if th < theta:
                    theta = th
        wall_axis = -1
        wall_side = 0.0
        if theta > 1.0 and bridge:
            surv = 1.0
            pmax = 0.0
            for i in range(d):
                var = at[i, i] * dt
                for side in (-1.0, 1.0):
                    g0 = half - side * x[i]
                    g1 = half - side * xn[i]
                    p = math.exp(-2.0 * g0 * g1 / var)
                    surv *= 1.0 - p
                    if p > pmax:
                        pmax = p
                        wall_axis = i
                        wall_side = side
            if uniforms[n] < 1.0 - surv:
                theta = 0.5
            else:
                wall_axis = -1
        if theta <= 1.0:
            h = theta * dt
            e1 = math.exp(-rate * (t + h))
            for i in range(d):
                xe = x[i] + theta * (xn[i] - x[i])
                if i == wall_axis:
                    xe = wall_side * half
                state[2 + d + i] += 0.5 * h * (e0 * x[i] + e1 * xe)
                state[4 + 2 * d + i] = xe
                state[1 + i] = xe
            w_new = tilted_coefficients(kind, fp, seed, d, lam, xn, at, b, sig, work)
            clock += 0.5 * h * (w + (w + theta * (w_new - w)))
            t += h
            state[0] = t
            state[1 + d] = clock
            state[2 + 2 * d] = 1.0
            state[3 + 2 * d] = t
            state[4 + 3 * d] += n + 1
            return n + 1
        e1 = e0 * decay
        for i in range(d):
            state[2 + d + i] += 0.5 * dt * (e0 * x[i] + e1 * xn[i])
            x[i] = xn[i]
        e0 = e1
        w_new = tilted_coefficients(kind, fp, seed, d, lam, x, at, b, sig, work)
        clock += 0.5 * dt * (w + w_new)
        w = w_new
        t += dt
    state[0] = t
    for i in range(d):
        state[1 + i] = x[i]
    state[1 + d] = clock
    state[4 + 3 * d] += normals.shape[0]
    return normals.shape[0]


@njit(cache=True, error_model="numpy")
def _first_up(x1, base, level, start, stop):
    """First fractional step index in (start, stop] where x1 - base exceeds level."""
    for j in range(start + 1, stop + 1):
        if x1[j] - base > level:
            prev = x1[j - 1] - base
            cur = x1[j] - base
            frac = (level - prev) / (cur - prev) if cur != prev else 1.0
            if frac < 0.0:
                frac = 0.0
            return j - 1 + frac, j
    return -1.0, -1


@njit(cache=True, error_model="numpy")
def _first_down(x1, base, level, start, stop):
    for j in range(start + 1, stop + 1):
        if x1[j] - base <= level:
            prev = x1[j - 1] - base
            cur = x1[j] - base
            frac = (level - prev) / (cur - prev) if cur != prev else 1.0
            if frac < 0.0:
                frac = 0.0
            return j - 1 + frac
    return -1.0


@njit(cache=True, error_model="numpy")
def _confined(pos, start, stop, radius):
    """Whether pos[start..stop] stays in the ball of radius 6R about pos[start] + 5R e1."""
    d = pos.shape[1]
    r2 = 36.0 * radius * radius
    for j in range(start, stop + 1):
        acc = 0.0
        for i in range(d):
            c = pos[start, i] + (5.0 * radius if i == 0 else 0.0)
            acc += (pos[j, i] - c) ** 2
        if acc > r2:
            return False
    return True


@njit(cache=True, error_model="numpy")
def ladder_scan(pos, spl, radius, horizon_units, marks, reject_unconfined, regen, cand):
    """Regeneration recursion on a discretized trajectory.

    pos: positions per step (e1 is column 0); spl: steps per lattice unit;
    radius: R; horizon_units: K; marks: Bernoulli mark per lattice index.
    regen[k] = (step index, 1 if declared by the full horizon else 0, ladder step).
    cand[c] = (candidate step, outcome, confined) with outcome 1 accepted,
    0 backtrack, 2 accepted at path end, 3 rejected for leaving the bridge ball.
    Both outputs must be sized for the worst case (one row per lattice unit).
    Returns (n_regen, n_cand).
    """
    x1 = pos[:, 0]
    n = x1.shape[0] - 1
    n_regen = 0
    n_cand = 0
    origin = 0
    search = 0
    running_max = 0.0
    scanned = 0  # running_max covers [origin, scanned]
    horizon = horizon_units * spl
    while True:
        base = x1[origin]
        while scanned < search:
            scanned += 1
            v = x1[scanned] - base
            if v > running_max:
                running_max = v
        tcross, jcross = _first_up(x1, base, running_max + radius, search, n)
        if jcross < 0:
            break
        ladder = np.int64(math.ceil(tcross / spl)) * spl
        if ladder > n:
            break
        if marks[ladder // spl] == 0:
            search = ladder
            continue
        s = ladder + spl
        if s > n:
            break
        stop = s + horizon
        full = True
        if stop > n:
            stop = n
            full = False
            if stop - s < spl:
                break
        ok = _confined(pos, ladder, s, radius)
        cand[n_cand, 0] = s
        cand[n_cand, 2] = 1 if ok else 0
        if reject_unconfined and not ok:
            cand[n_cand, 1] = 3
            n_cand += 1
            search = s
            continue
        tb = _first_down(x1, x1[s], -radius, s, stop)
        if tb < 0.0:
            cand[n_cand, 1] = 1 if full else 2
            n_cand += 1
            regen[n_regen, 0] = s
            regen[n_regen, 1] = 1 if full else 0
            regen[n_regen, 2] = ladder
            n_regen += 1
            if not full:
                break
            origin = s
            search = s
            scanned = s
            running_max = 0.0
            continue
        cand[n_cand, 1] = 0
        n_cand += 1
        back_units = np.int64(math.ceil((tb - s) / spl - 1e-12))
        if back_units < 1:
            back_units = 1
        search = s + back_units * spl
        if search > n:
            break
    return n_regen, n_cand
