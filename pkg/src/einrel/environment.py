"""Random coefficient fields with finite range of dependence.

The default law is a mollified i.i.d. lattice field.  Cells
``c_cell * (z + o)`` carry uniform variates on [-1, 1) obtained from a
splitmix64 counter hash of (seed, cell index, channel); ``o`` is a random
offset drawn from the seed, which makes the law stationary.  Cell indicator
functions are convolved with the product kernel ``k(s) = 35/32 (1 - s^2)^3``
scaled to radius ``r_moll``.  The kernel is C^2 with polynomial CDF, so the
convolution and its gradient are exact finite sums.

Channels: 0 drives ``mu = exp(amp_a * zeta_0)``, the next ``d(d-1)/2`` drive
the off-diagonal entries ``mu * s_off * zeta_ij`` and the last drives
``V = amp_v * zeta_V``.  With ``s_off = min(amp_a, 1/2) / (d - 1)`` the
eigenvalues of ``a`` lie in ``[exp(-amp_a)(1 - t), exp(amp_a)(1 + t)]`` with
``t = min(amp_a, 1/2)``, which is checked against the ellipticity constant
before any evaluation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from . import config
from .config import param
from .errors import ConfigError

FIELD_KINDS = {"random": K.RANDOM, "constant": K.CONSTANT, "laminate": K.LAMINATE}

# total variation of the kernel profile on [-1, 1]
_KERNEL_TV = 2.0 * 35.0 / 32.0
_OFFSET_KEY = np.uint64(0xA0761D6478BD642F)


@dataclass(frozen=True)
class EnvParams:
    """Law of the environment.

    ``field_kind`` selects the mollified lattice law (``random``) or one of the
    deterministic fixtures: ``constant`` (a = const_c I, V = const_v) and
    ``laminate`` (a = diag(alpha(x1), beta(x1), ...), V = 0) with
    alpha = lam_a0 exp(lam_a1 sin(2 pi x1 / P)), beta = lam_b0 + lam_b1 cos(2 pi x1 / P).
    """

    d: int = param(2, "space dimension (2 or 3)")
    lambda_ellipticity: float = param(4.0, "ellipticity constant Lambda >= 1")
    r0: float = param(2.5, "dependence range", "length")
    c_cell: float = param(1.0, "lattice cell size carrying independent variates", "length")
    r_moll: float = param(0.75, "mollifier radius", "length")
    amp_a: float = param(0.3, "log-amplitude of the scalar part of a")
    amp_v: float = param(0.5, "amplitude of the potential V")
    seed: int = param(0, "master environment seed (64-bit)")
    field_kind: str = param("random", "random | constant | laminate")
    const_c: float = param(1.0, "constant field: a = const_c * I")
    const_v: float = param(0.0, "constant field: V = const_v")
    lam_a0: float = param(1.0, "laminate: alpha scale")
    lam_a1: float = param(0.5, "laminate: alpha log-amplitude")
    lam_b0: float = param(1.0, "laminate: beta mean")
    lam_b1: float = param(0.5, "laminate: beta amplitude")
    lam_period: float = param(1.0, "laminate: period in x1", "length")

    def __post_init__(self):
        self.validate()

    # a priori bounds -------------------------------------------------
    def eigen_bounds(self) -> tuple[float, float]:
        if self.field_kind == "constant":
            return self.const_c, self.const_c
        if self.field_kind == "laminate":
            lo_a = self.lam_a0 * math.exp(-abs(self.lam_a1))
            hi_a = self.lam_a0 * math.exp(abs(self.lam_a1))
            lo_b = self.lam_b0 - abs(self.lam_b1)
            hi_b = self.lam_b0 + abs(self.lam_b1)
            return min(lo_a, lo_b), max(hi_a, hi_b)
        t = min(self.amp_a, 0.5)
        return math.exp(-self.amp_a) * (1.0 - t), math.exp(self.amp_a) * (1.0 + t)

    def potential_bound(self) -> float:
        if self.field_kind == "constant":
            return abs(self.const_v)
        if self.field_kind == "laminate":
            return 0.0
        return self.amp_v

    def lipschitz_bounds(self) -> tuple[float, float]:
        """Worst-case Lipschitz constants of (a, V) from the kernel's total variation."""
        if self.field_kind == "constant":
            return 0.0, 0.0
        if self.field_kind == "laminate":
            k = 2.0 * math.pi / self.lam_period
            la = self.lam_a0 * math.exp(abs(self.lam_a1)) * abs(self.lam_a1) * k
            return max(la, abs(self.lam_b1) * k), 0.0
        d = self.d
        g = math.sqrt(d) * _KERNEL_TV / self.r_moll
        t = min(self.amp_a, 0.5)
        s_off = t / (d - 1)
        mu_max = math.exp(self.amp_a)
        la = mu_max * g * (self.amp_a * (1.0 + t) + s_off * (d - 1))
        return la, self.amp_v * g

    @property
    def lambda_tilde(self) -> float:
        """Ellipticity constant of e^{-2V} a (and of the clock weight)."""
        return self.lambda_ellipticity * math.exp(2.0 * self.potential_bound())

    def validate(self) -> None:
        lam = self.lambda_ellipticity
        if self.d not in (2, 3):
            raise ConfigError(f"d must be 2 or 3, got {self.d}")
        if not lam >= 1.0:
            raise ConfigError(f"lambda_ellipticity must be >= 1, got {lam}")
        if self.field_kind not in FIELD_KINDS:
            raise ConfigError(f"field_kind must be one of {sorted(FIELD_KINDS)}, got {self.field_kind!r}")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")
        if self.field_kind == "random":
            if not self.r0 >= 1.0:
                raise ConfigError(f"r0 must be >= 1, got {self.r0}")
            if not (self.c_cell > 0 and self.r_moll > 0):
                raise ConfigError("c_cell and r_moll must be positive")
            if not self.r_moll < self.r0 / 2:
                raise ConfigError(f"r_moll < r0/2 violated ({self.r_moll} vs {self.r0})")
            # two evaluation points share a cell only if their separation is
            # below 2 r_moll + c_cell, so this is the realized dependence range
            if 2 * self.r_moll + self.c_cell > self.r0 * (1 + 1e-12):
                raise ConfigError(
                    f"2*r_moll + c_cell <= r0 violated ({2 * self.r_moll + self.c_cell} > {self.r0})"
                )
            if math.ceil(2 * self.r_moll / self.c_cell) + 2 > K.MAXC:
                raise ConfigError("r_moll / c_cell too large for the cell budget")
            if self.amp_a < 0 or self.amp_v < 0:
                raise ConfigError("amp_a and amp_v must be non-negative")
        if self.field_kind == "laminate" and not self.lam_period > 0:
            raise ConfigError("lam_period must be positive")
        lo, hi = self.eigen_bounds()
        if not (lo >= 1.0 / lam * (1 - 1e-12) and hi <= lam * (1 + 1e-12)):
            raise ConfigError(
                f"ellipticity bound violated: eigenvalues in [{lo:.4g}, {hi:.4g}] not within [1/{lam}, {lam}]"
            )
        # e^{-2V} in [1/lam, lam] keeps the clock within the same ellipticity band
        if self.potential_bound() > 0.5 * math.log(lam) * (1 + 1e-12):
            raise ConfigError(
                f"|V| <= log(lambda_ellipticity)/2 violated (amplitude {self.potential_bound()})"
            )
        la, lv = self.lipschitz_bounds()
        if la > lam * (1 + 1e-12) or lv > lam * (1 + 1e-12):
            raise ConfigError(
                f"Lipschitz bound violated: a {la:.4g}, V {lv:.4g} exceed lambda_ellipticity {lam}"
            )

    def to_mapping(self) -> dict:
        return config.to_mapping(self)

    @classmethod
    def from_mapping(cls, mapping: dict, **overrides) -> "EnvParams":
        return config.build(cls, mapping, **overrides)

    def write(self, path) -> None:
        config.write(path, self.to_mapping())

    @classmethod
    def read(cls, path) -> "EnvParams":
        raw = config.read(path)
        config.check_known(raw, [cls])
        return cls.from_mapping(raw)


@dataclass(frozen=True)
class FieldSample:
    """Coefficients at n points: a (n, d, d), div_a (n, d), V (n,), grad_V (n, d)."""

    a: np.ndarray
    div_a: np.ndarray
    V: np.ndarray
    grad_V: np.ndarray

    @property
    def clock_weight(self) -> np.ndarray:
        return np.exp(-2.0 * self.V)

    @property
    def a_tilde(self) -> np.ndarray:
        return self.clock_weight[:, None, None] * self.a

    @property
    def div_a_tilde(self) -> np.ndarray:
        """div(e^{-2V} a) = e^{-2V} (div a - 2 a grad V)."""
        agv = np.einsum("nij,nj->ni", self.a, self.grad_V)
        return self.clock_weight[:, None] * (self.div_a - 2.0 * agv)


def _as_points(x, d):
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[-1] != d:
        raise ValueError(f"points must have trailing dimension {d}, got shape {pts.shape}")
    return np.ascontiguousarray(pts.reshape(-1, d)), single


class CoefficientField:
    """Interface shared by the lattice field and the test fixtures.

    Subclasses implement :meth:`sample`.  ``kernel_spec`` returns the
    ``(kind, fp, seed)`` triple understood by the compiled kernels, or None
    for fields that can only be evaluated from Python.
    """

    d: int = 2
    r0: float = 1.0
    lambda_ellipticity: float = 1.0
    lambda_tilde: float = 1.0

    def sample(self, x) -> FieldSample:
        raise NotImplementedError

    def kernel_spec(self):
        return None

    def describe(self) -> dict:
        return {"field": type(self).__name__}

    def _get(self, x, attr):
        pts, single = _as_points(x, self.d)
        out = getattr(self.sample(pts), attr)
        return out[0] if single else out

    def a(self, x):
        return self._get(x, "a")

    def div_a(self, x):
        return self._get(x, "div_a")

    def V(self, x):
        return self._get(x, "V")

    def grad_V(self, x):
        return self._get(x, "grad_V")

    def clock_weight(self, x):
        return self._get(x, "clock_weight")

    def a_tilde(self, x):
        return self._get(x, "a_tilde")

    def div_a_tilde(self, x):
        return self._get(x, "div_a_tilde")


class EnvironmentField(CoefficientField):
    """Field realized from :class:`EnvParams`; immutable and safe to share."""

    def __init__(self, params: EnvParams):
        self.params = params
        self.d = params.d
        self.r0 = params.r0
        self.lambda_ellipticity = params.lambda_ellipticity
        self.lambda_tilde = params.lambda_tilde
        self._kind = FIELD_KINDS[params.field_kind]
        self._seed = np.uint64(params.seed)
        self.offset = self._offsets()
        if params.field_kind == "random":
            t = min(params.amp_a, 0.5)
            fp = [params.c_cell, params.r_moll, params.amp_a, params.amp_v, t / (params.d - 1)]
            fp += list(self.offset) + [0.0] * (3 - params.d)
        elif params.field_kind == "constant":
            fp = [params.const_c, params.const_v]
        else:
            fp = [params.lam_a0, params.lam_a1, params.lam_b0, params.lam_b1, params.lam_period]
        self._fp = np.array(fp, dtype=np.float64)
        self._fp.setflags(write=False)

    def _offsets(self):
        h = K.splitmix64(self._seed ^ _OFFSET_KEY)
        out = []
        for i in range(self.d):
            h = np.uint64(K.splitmix64(np.uint64(h)))
            out.append(float(K.hash_uniform(h)))
        return np.array(out)

    def kernel_spec(self):
        return self._kind, self._fp, self._seed

    def sample(self, x) -> FieldSample:
        pts, _ = _as_points(x, self.d)
        n, d = pts.shape
        a = np.zeros((n, d, d))
        diva = np.zeros((n, d))
        v = np.zeros(n)
        gv = np.zeros((n, d))
        K.eval_batch(self._kind, self._fp, self._seed, d, pts, a, diva, v, gv)
        return FieldSample(a, diva, v, gv)

    def cells_touched(self, x) -> set:
        """Lattice cells whose variates enter the evaluation at the point x."""
        if self.params.field_kind != "random":
            return set()
        c, r = self.params.c_cell, self.params.r_moll
        x = np.asarray(x, dtype=float)
        ranges = []
        for i in range(self.d):
            first = math.floor((x[i] - r) / c - self.offset[i])
            last = math.floor((x[i] + r) / c - self.offset[i])
            ranges.append(range(first, last + 1))
        grid = np.stack(np.meshgrid(*ranges, indexing="ij"), -1).reshape(-1, self.d)
        return {tuple(int(v) for v in z) for z in grid}

    def describe(self) -> dict:
        out = {"field": "mollified i.i.d. lattice" if self.params.field_kind == "random" else self.params.field_kind}
        out.update(self.params.to_mapping())
        out["kernel"] = "35/32 (1 - s^2)^3 product kernel"
        out["hash"] = "splitmix64 chain over (seed, cell index, channel)"
        return out


def build_environment(params: EnvParams) -> EnvironmentField:
    params.validate()
    return EnvironmentField(params)


def constant_environment(c: float = 1.0, v: float = 0.0, d: int = 2, lambda_ellipticity: float | None = None):
    lam = lambda_ellipticity
    if lam is None:
        lam = max(1.0, c, 1.0 / c, math.exp(2.0 * abs(v)))
    return EnvironmentField(
        EnvParams(d=d, lambda_ellipticity=lam, field_kind="constant", const_c=c, const_v=v)
    )


@dataclass
class ValidationReport:
    n_samples: int
    rayleigh_min: float
    rayleigh_max: float
    eig_min: float
    eig_max: float
    max_abs_v: float
    max_dq_a: float
    max_dq_v: float
    symmetry_defect: float
    lambda_ellipticity: float
    violations: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__}
        out["passed"] = self.passed
        return out


def validate_environment(env: CoefficientField, n_samples: int, seed: int = 0, box: float | None = None) -> ValidationReport:
    """Check ellipticity, potential and Lipschitz bounds on random points.

    Points are uniform in a box of half-side ``box`` (default 50 r0); the
    difference quotients use pairs at random separation up to r0.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    d = env.d
    lam = env.lambda_ellipticity
    rng = np.random.default_rng(seed)
    half = 50.0 * env.r0 if box is None else box
    x = rng.uniform(-half, half, (n_samples, d))
    xi = rng.standard_normal((n_samples, d))
    u = rng.standard_normal((n_samples, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    y = x + rng.uniform(1e-3, 1.0, (n_samples, 1)) * env.r0 * u

    sx = env.sample(x)
    sy = env.sample(y)
    q = np.einsum("ni,ni->n", xi, np.einsum("nij,nj->ni", sx.a, xi)) / np.einsum("ni,ni->n", xi, xi)
    sym = np.abs(sx.a - np.swapaxes(sx.a, 1, 2)).max()
    eig = np.linalg.eigvalsh(0.5 * (sx.a + np.swapaxes(sx.a, 1, 2)))
    dist = np.linalg.norm(y - x, axis=1)
    dq_a = np.linalg.norm(sy.a - sx.a, ord=2, axis=(1, 2)) / dist
    dq_v = np.abs(sy.V - sx.V) / dist

    rep = ValidationReport(
        n_samples=n_samples,
        rayleigh_min=float(q.min()),
        rayleigh_max=float(q.max()),
        eig_min=float(eig.min()),
        eig_max=float(eig.max()),
        max_abs_v=float(np.abs(sx.V).max()),
        max_dq_a=float(dq_a.max()),
        max_dq_v=float(dq_v.max()),
        symmetry_defect=float(sym),
        lambda_ellipticity=lam,
    )
    tol = 1e-12
    if rep.eig_min < 1.0 / lam - tol or rep.eig_max > lam + tol:
        rep.violations.append("ellipticity")
    if rep.max_abs_v > lam + tol:
        rep.violations.append("potential")
    if rep.max_dq_a > lam + tol or rep.max_dq_v > lam + tol:
        rep.violations.append("lipschitz")
    if rep.symmetry_defect > 1e-14 * max(1.0, float(np.abs(sx.a).max())):
        rep.violations.append("symmetry")
    return rep


def independent_points(env: CoefficientField, n: int, seed: int = 0) -> np.ndarray:
    """n points pairwise further apart than r0, each uniform modulo its site.

    Sites sit on the e1 axis with spacing 2 r0; every coordinate gets a jitter
    uniform on [0, L) with L <= r0, so distinct points differ by more than r0
    in e1.  For lattice fields L is a whole number of cells, which makes the
    position within a cell uniform: a single realization is only periodic in
    law, so a fixed phase would bias averages.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    span = env.r0
    params = getattr(env, "params", None)
    if params is not None and params.field_kind == "random":
        span = params.c_cell * max(1, math.floor(env.r0 / params.c_cell + 1e-12))
    pts = rng.uniform(0.0, span, (n, env.d))
    pts[:, 0] += 2.0 * env.r0 * np.arange(n)
    return pts


def mean_clock_weight(env: CoefficientField, n_samples: int, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo estimate of E[e^{-2V(0)}] with its standard error.

    Samples are taken at mutually independent points (see
    :func:`independent_points`), so the naive standard error is valid.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    w = env.clock_weight(independent_points(env, n_samples, seed))
    if np.all(w == w[0]):
        return float(w[0]), 0.0
    return float(w.mean()), float(w.std(ddof=1) / math.sqrt(n_samples))
