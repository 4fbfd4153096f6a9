"""Time-changed tilted diffusion: drift, square root, Euler-Maruyama, clock.

The simulated process solves

    dY = (1/2 div(a~) + lam a~ e1) ds + sqrt(a~) dB,      a~ = e^{-2V} a,

and carries the additive clock A(s) = int_0^s e^{-2V(Y)}; the original
process is X(t) = Y(A^{-1}(t)).  Every path owns a Philox stream keyed by
(sim_seed, path_id), so results do not depend on scheduling.
"""

from __future__ import annotations

import csv
import functools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels as K
from . import config
from ._parallel import pmap
from .config import param
from .errors import ConfigError, DataError, SimulationError

CHUNK = 1 << 16
_NO_UNIFORMS = np.zeros(0)


@dataclass(frozen=True)
class SimParams:
    lam: float = param(0.1, "tilt lambda in [0, 1]")
    dt: float = param(0.01, "Euler-Maruyama time step", "time")
    horizon: float = param(100.0, "simulation horizon T", "time")
    n_paths: int = param(100, "number of independent paths")
    sim_seed: int = param(1, "seed of the Brownian streams")
    cube_level: Optional[int] = param(None, "absorbing cube level M (side 3^M), or none")

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lam must lie in [0, 1], got {self.lam}")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.lam > 0 and self.dt > min(1.0, self.lam ** -2) / 100 * (1 + 1e-12):
            raise ConfigError(f"dt <= min(1, lam^-2)/100 violated (dt = {self.dt})")
        if not self.horizon >= self.dt:
            raise ConfigError("horizon must be at least dt")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.horizon / self.dt - 1e-9))


def path_rng(seed: int, path_id: int) -> np.random.Generator:
    """Counter-based stream for one path."""
    return np.random.Generator(np.random.Philox(key=(int(path_id) << 64) | (int(seed) & (2**64 - 1))))


@dataclass
class PathSample:
    dt: float
    positions: np.ndarray
    clock: np.ndarray
    seed: int
    path_id: int = 0
    lam: float = 0.0
    exit_index: Optional[int] = None
    # explicit time nodes; None means the arithmetic grid k * dt
    t: Optional[np.ndarray] = None

    @property
    def times(self) -> np.ndarray:
        if self.t is not None:
            return self.t
        return self.dt * np.arange(len(self.clock))

    def at(self, tq) -> np.ndarray:
        """Positions at arbitrary times by linear interpolation between nodes."""
        tq = np.asarray(tq, dtype=float)
        tn = self.times
        if np.any(tq < tn[0]) or np.any(tq > tn[-1]):
            raise DataError("query time outside the path's time range")
        return np.stack([np.interp(tq, tn, self.positions[:, i]) for i in range(self.d)], -1)

    @property
    def d(self) -> int:
        return self.positions.shape[1]


def spd_sqrt(m: np.ndarray) -> np.ndarray:
    """Symmetric positive square root of one SPD matrix or a stack of them."""
    m = np.asarray(m, dtype=float)
    stack = m.reshape(-1, *m.shape[-2:])
    d = stack.shape[-1]
    if d == 2:
        det = stack[:, 0, 0] * stack[:, 1, 1] - stack[:, 0, 1] * stack[:, 1, 0]
        tr = stack[:, 0, 0] + stack[:, 1, 1]
        if np.any(det <= 0) or np.any(tr <= 0):
            raise SimulationError("matrix is not positive definite")
        s = np.sqrt(det)
        t = np.sqrt(tr + 2 * s)
        out = (stack + s[:, None, None] * np.eye(2)) / t[:, None, None]
    else:
        w, v = np.linalg.eigh(stack)
        if np.any(w <= 0):
            raise SimulationError("matrix is not positive definite")
        out = np.einsum("nik,nk,njk->nij", v, np.sqrt(w), v)
    return out.reshape(m.shape)


def ito_drift(env, lam: float, x) -> np.ndarray:
    """b(x) = 1/2 div(e^{-2V} a) + lam e^{-2V} a e1."""
    pts = np.asarray(x, dtype=float)
    s = env.sample(np.atleast_2d(pts))
    b = 0.5 * s.div_a_tilde + lam * s.a_tilde[:, :, 0]
    return b[0] if pts.ndim == 1 else b


def diffusion_root(env, x) -> np.ndarray:
    pts = np.asarray(x, dtype=float)
    root = spd_sqrt(env.sample(np.atleast_2d(pts)).a_tilde)
    return root[0] if pts.ndim == 1 else root


def _simulate_python(env, lam, dt, normals, pos, clock):
    """Slow reference stepper for fields without compiled kernels."""
    sq = math.sqrt(dt)

    def coeffs(x):
        s = env.sample(x[None])
        return (0.5 * s.div_a_tilde + lam * s.a_tilde[:, :, 0])[0], spd_sqrt(s.a_tilde[0]), s.clock_weight[0]

    b, sig, w = coeffs(pos[0])
    for n in range(normals.shape[0]):
        pos[n + 1] = pos[n] + b * dt + sq * sig @ normals[n]
        if not np.all(np.isfinite(pos[n + 1])):
            return n + 1
        b, sig, w_new = coeffs(pos[n + 1])
        clock[n + 1] = clock[n] + 0.5 * dt * (w + w_new)
        w = w_new
    return -1


def simulate_path(env, params: SimParams, x0=None, path_id: int = 0) -> PathSample:
    """Euler-Maruyama path of the time-changed diffusion started at x0.

    With an absorbing cube the path stops at the first grid index whose
    position lies outside the open cube; that index is ``exit_index``.
    """
    d = env.d
    n = params.n_steps
    pos = np.zeros((n + 1, d))
    if x0 is not None:
        pos[0] = np.asarray(x0, dtype=float)
    clock = np.zeros(n + 1)
    rng = path_rng(params.sim_seed, path_id)
    spec = env.kernel_spec()
    work = K.make_work(d)
    half = None if params.cube_level is None else 0.5 * 3.0 ** params.cube_level
    exit_index = None
    done = 0
    while done < n:
        m = min(CHUNK, n - done)
        normals = rng.standard_normal((m, d))
        if spec is not None:
            kind, fp, seed = spec
            bad = K.em_path(kind, fp, seed, d, params.lam, params.dt, normals, pos, clock, done, work)
        else:
            bad = _simulate_python(env, params.lam, params.dt, normals, pos[done:], clock[done:])
            bad = bad + done if bad >= 0 else -1
        if bad >= 0:
            raise SimulationError(f"non-finite state at step {bad} (path {path_id})")
        if half is not None:
            outside = np.nonzero(np.abs(pos[done + 1 : done + m + 1]).max(axis=1) >= half)[0]
            if outside.size:
                exit_index = done + 1 + int(outside[0])
                pos = pos[: exit_index + 1]
                clock = clock[: exit_index + 1]
                break
        done += m
    return PathSample(params.dt, pos, clock, params.sim_seed, path_id, params.lam, exit_index)


def invert_time_change(path: PathSample, resample: bool = False) -> PathSample:
    """Reparametrize by the clock: X(t) = Y(A^{-1}(t)) for t in [0, A(T)].

    By default the nodes are kept and the time axis becomes A(s_k), so
    ``X.at(t)`` interpolates A^{-1} linearly.  The returned path carries
    s_k = A^{-1}(t_k) as its clock; applying the map twice gives back the
    input.  With ``resample`` the positions are interpolated onto the
    arithmetic grid t = k dt instead.
    """
    c = path.clock
    if c.size < 2:
        raise DataError("path too short to invert")
    if c[0] != 0.0 or not np.all(np.diff(c) > 0):
        raise DataError("clock must start at 0 and be strictly increasing")
    s = path.times
    if not resample:
        return PathSample(path.dt, path.positions, s.copy(), path.seed, path.path_id, path.lam,
                          path.exit_index, c.copy())
    n_out = int(math.floor(c[-1] / path.dt + 1e-9)) + 1
    t = np.minimum(path.dt * np.arange(n_out), c[-1])
    s_of_t = np.interp(t, c, s)
    pos = np.stack([np.interp(s_of_t, s, path.positions[:, i]) for i in range(path.d)], -1)
    return PathSample(path.dt, pos, s_of_t, path.seed, path.path_id, path.lam, None)


def _endpoint(env, params: SimParams, path_id: int):
    """Position and clock at the horizon, without storing the path."""
    d = env.d
    kind, fp, seed = env.kernel_spec()
    state = np.zeros(5 + 3 * d)
    work = K.make_work(d)
    rng = path_rng(params.sim_seed, path_id)
    n = params.n_steps
    done = 0
    while done < n:
        m = min(CHUNK, n - done)
        if K.em_exit_chunk(kind, fp, seed, d, params.lam, params.dt, np.inf, 0.0,
                           rng.standard_normal((m, d)), _NO_UNIFORMS, False, state, work) < 0:
            raise SimulationError(f"non-finite state in path {path_id}")
        done += m
    return state[1 : 1 + d].copy(), state[1 + d]


def _endpoint_batch(env, params, ids):
    out = []
    for p in ids:
        if env.kernel_spec() is None:
            path = simulate_path(env, params, path_id=p)
            out.append((path.positions[-1].copy(), path.clock[-1]))
        else:
            out.append(_endpoint(env, params, p))
    return out


def simulate_endpoints(env, params: SimParams, jobs: int = 1):
    """Positions Y(T) (n_paths, d) and clocks A(T) (n_paths,) for paths from 0."""
    ids = np.arange(params.n_paths)
    batches = np.array_split(ids, max(1, min(jobs, len(ids))))
    res = pmap(functools.partial(_endpoint_batch, env, params), batches, jobs)
    flat = [r for b in res for r in b]
    return np.array([r[0] for r in flat]), np.array([r[1] for r in flat])


def estimate_velocity_direct(env, params: SimParams, jobs: int = 1):
    """Mean of Y(T)/T over independent paths from the origin, with standard errors."""
    if params.lam <= 0:
        raise ConfigError("direct velocity estimate needs lam > 0")
    if params.horizon < 10.0 * params.lam ** -2 * (1 - 1e-12):
        raise ConfigError(
            f"horizon {params.horizon} shorter than 10 lam^-2 = {10.0 * params.lam ** -2:g}"
        )
    y, _ = simulate_endpoints(env, params, jobs)
    v = y / params.horizon
    se = v.std(axis=0, ddof=1) / math.sqrt(len(v)) if len(v) > 1 else np.full(env.d, np.inf)
    return v.mean(axis=0), se


def _x_endpoint_batch(env, params, ids):
    d = env.d
    kind, fp, seed = env.kernel_spec()
    work = K.make_work(d)
    out = []
    for p in ids:
        state = np.zeros(3 + d)
        rng = path_rng(params.sim_seed, p)
        while state[2 + d] == 0.0:
            if K.em_to_clock(kind, fp, seed, d, params.lam, params.dt, params.horizon,
                             rng.standard_normal((CHUNK, d)), state, work) < 0:
                raise SimulationError(f"non-finite state in path {p}")
        out.append(state[1 : 1 + d].copy())
    return out


def estimate_diffusivity_mc(env, params: SimParams, jobs: int = 1):
    """Covariance of X(T)/sqrt(T) over paths, X the clock-reparametrized process.

    Each path runs until its clock reaches T; X(T) is read off by linear
    interpolation of the crossing step.  Returns (matrix, entrywise standard
    error).
    """
    if params.lam != 0:
        raise ConfigError("diffusivity estimate needs lam = 0")
    ids = np.arange(params.n_paths)
    batches = np.array_split(ids, max(1, min(jobs, len(ids))))
    res = pmap(functools.partial(_x_endpoint_batch, env, params), batches, jobs)
    z = np.array([r for b in res for r in b]) / math.sqrt(params.horizon)
    z = z - z.mean(axis=0)
    prod = z[:, :, None] * z[:, None, :]
    n = len(z)
    cov = prod.sum(axis=0) / (n - 1)
    cov = 0.5 * (cov + cov.T)
    se = prod.std(axis=0, ddof=1) / math.sqrt(n)
    return cov, se


def write_paths_csv(path, samples) -> None:
    """Columns: path_id, step, t, x_1..x_d, clock."""
    samples = list(samples)
    d = samples[0].d if samples else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path_id", "step", "t"] + [f"x_{i + 1}" for i in range(d)] + ["clock"])
        for s in samples:
            for k in range(len(s.clock)):
                w.writerow([s.path_id, k, repr(s.dt * k)] + [repr(float(v)) for v in s.positions[k]]
                           + [repr(float(s.clock[k]))])


def sim_params_from_mapping(mapping: dict, **overrides) -> SimParams:
    return config.build(SimParams, mapping, **overrides)
