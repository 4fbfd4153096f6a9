"""Finite-difference Dirichlet problems on triadic cubes.

The discrete operator comes from the weighted energy

    B_w(f, g) = 1/2 int w a~ grad f . grad g,     w = e^{2 lam x1},

with diagonal terms on grid links (coefficients at link midpoints) and
off-diagonal terms on grid cells (coefficients at cell centres, one-sided
differences averaged over the cell's parallel edges).  With K the stiffness
matrix of B_w and the lumped weighted mass h^d w_i,

    (L f)_i = zero_order f_i + (K f)_i / (h^d w_i)

is the flux-conservative discretization of zero_order f - 1/2 e^{-2 lam x1}
div(e^{2 lam x1} a~ grad f), and K is symmetric, so L is symmetric in the
weighted inner product.  The weight at a link midpoint is the geometric mean
of its endpoints' weights.
"""

from __future__ import annotations

import csv
import itertools
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.fft import dctn

from .errors import ConfigError, GridError, SolverError

OVERFLOW_GUARD = 50.0


@dataclass(frozen=True)
class CubeGrid:
    """Nodes of the cube of side 3^M centred at the origin, N per side."""

    M: int
    N: int
    d: int = 2

    def __post_init__(self):
        if self.N < 9:
            raise GridError(f"need at least 9 nodes per side, got {self.N}")
        if self.d not in (2, 3):
            raise GridError("d must be 2 or 3")

    @property
    def side(self) -> float:
        return 3.0 ** self.M

    @property
    def h(self) -> float:
        return self.side / (self.N - 1)

    @property
    def shape(self) -> tuple:
        return (self.N,) * self.d

    @property
    def n_nodes(self) -> int:
        return self.N ** self.d

    @property
    def axis(self) -> np.ndarray:
        # symmetric about 0 so the centre node is exactly the origin
        return self.h * (np.arange(self.N) - (self.N - 1) / 2)

    def coords(self) -> np.ndarray:
        """Node coordinates, shape grid.shape + (d,)."""
        return np.stack(np.meshgrid(*([self.axis] * self.d), indexing="ij"), -1)

    def boundary_mask(self) -> np.ndarray:
        mask = np.zeros(self.shape, dtype=bool)
        for k in range(self.d):
            idx = [slice(None)] * self.d
            idx[k] = 0
            mask[tuple(idx)] = True
            idx[k] = -1
            mask[tuple(idx)] = True
        return mask

    def origin_index(self) -> tuple:
        if self.N % 2 == 0:
            raise GridError("origin is not a grid node (N must be odd)")
        return ((self.N - 1) // 2,) * self.d

    def trapezoid_weights(self) -> np.ndarray:
        t = np.ones(self.N)
        t[0] = t[-1] = 0.5
        out = t
        for _ in range(self.d - 1):
            out = np.multiply.outer(out, t)
        return out

    @staticmethod
    def for_spacing(M: int, h_max: float, d: int = 2, odd: bool = True) -> "CubeGrid":
        """Smallest grid on the cube with spacing at most h_max."""
        n = int(math.ceil(3.0 ** M / h_max - 1e-9)) + 1
        if odd and n % 2 == 0:
            n += 1
        return CubeGrid(M, max(n, 9 if not odd else 9), d)


@dataclass
class DiscreteField:
    grid: CubeGrid
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape[: self.grid.d] != self.grid.shape:
            raise GridError(f"values of shape {self.values.shape} do not match grid {self.grid.shape}")
        if not np.all(np.isfinite(self.values)):
            raise GridError("field has non-finite entries")

    @property
    def kind(self) -> str:
        extra = self.values.ndim - self.grid.d
        return {0: "scalar", 1: "vector", 2: "matrix"}[extra]

    def at_origin(self):
        return self.values[self.grid.origin_index()]

    def mean(self):
        """Volume average by the trapezoid rule."""
        tw = self.grid.trapezoid_weights()
        tw = tw.reshape(tw.shape + (1,) * (self.values.ndim - self.grid.d))
        return (tw * self.values).sum(axis=tuple(range(self.grid.d))) / tw.sum()

    # I/O ------------------------------------------------------------
    def to_csv(self, path) -> None:
        g = self.grid
        flat = self.values.reshape(g.n_nodes, -1)
        xs = g.coords().reshape(g.n_nodes, g.d)
        with open(path, "w", newline="") as fh:
            fh.write(f"# M={g.M} N={g.N} d={g.d} kind={self.kind} vshape={list(self.values.shape[g.d:])}\n")
            w = csv.writer(fh)
            w.writerow([f"x_{i + 1}" for i in range(g.d)] + [f"v_{j}" for j in range(flat.shape[1])])
            for x, v in zip(xs, flat):
                w.writerow([repr(float(c)) for c in x] + [repr(float(c)) for c in v])

    @classmethod
    def from_csv(cls, path) -> "DiscreteField":
        with open(path) as fh:
            header = fh.readline()
            meta = dict(tok.split("=", 1) for tok in header[1:].split() if "=" in tok)
            grid = CubeGrid(int(meta["M"]), int(meta["N"]), int(meta["d"]))
            vshape = tuple(json.loads(header.split("vshape=", 1)[1]))
            rows = list(csv.reader(fh))[1:]
        data = np.array([[float(v) for v in r] for r in rows])
        return cls(grid, data[:, grid.d :].reshape(grid.shape + vshape))

    def to_binary(self, path) -> None:
        g = self.grid
        np.savez(path, M=g.M, N=g.N, d=g.d, values=self.values)

    @classmethod
    def from_binary(cls, path) -> "DiscreteField":
        with np.load(path) as z:
            return cls(CubeGrid(int(z["M"]), int(z["N"]), int(z["d"])), z["values"])


@dataclass
class SolveReport:
    iterations: int
    relative_residual: float
    tolerance: float
    wall_time: float
    preconditioner: str
    converged: bool = True
    residual_history: list = field(default_factory=list, repr=False)

    def to_dict(self, timing: bool = False) -> dict:
        """Plain dict; wall time only on request so reports stay reproducible."""
        out = {
            "iterations": self.iterations,
            "relative_residual": self.relative_residual,
            "tolerance": self.tolerance,
            "preconditioner": self.preconditioner,
            "converged": self.converged,
        }
        if timing:
            out["wall_time"] = self.wall_time
        return out


def _check_resolution(env, grid: CubeGrid):
    params = getattr(env, "params", None)
    if params is not None and params.field_kind == "random" and grid.h > params.r_moll / 2 * (1 + 1e-12):
        raise GridError(f"grid spacing {grid.h:.4g} exceeds r_moll/2 = {params.r_moll / 2:.4g}")
    if env.d != grid.d:
        raise GridError("grid and environment dimensions differ")


class WeightedOperator:
    """Discrete zero_order - 1/2 e^{-2 lam x1} div(e^{2 lam x1} a~ grad) on a cube."""

    def __init__(self, grid: CubeGrid, K: sp.csr_matrix, lam: float, zero_order: float):
        self.grid = grid
        self.K = K
        self.lam = lam
        self.zero_order = zero_order
        self.vol = grid.h ** grid.d
        x1 = grid.coords()[..., 0].ravel()
        self.weight = np.exp(2.0 * lam * x1)
        self.interior = ~grid.boundary_mask().ravel()

    def apply(self, f) -> np.ndarray:
        """L f on interior nodes; boundary entries of the result are zero."""
        v = f.values if isinstance(f, DiscreteField) else np.asarray(f, dtype=float)
        flat = v.reshape(self.grid.n_nodes)
        out = self.zero_order * flat + (self.K @ flat) / (self.vol * self.weight)
        out[~self.interior] = 0.0
        return out.reshape(self.grid.shape)

    def inner(self, f, g) -> float:
        """Weighted inner product sum over interior nodes of h^d w f g."""
        f = np.asarray(f, dtype=float).ravel()
        g = np.asarray(g, dtype=float).ravel()
        m = self.interior
        return float(np.sum(self.vol * self.weight[m] * f[m] * g[m]))

    def energy(self, f, g) -> float:
        """The bilinear form f^T K g over all nodes."""
        f = np.asarray(f, dtype=float).ravel()
        g = np.asarray(g, dtype=float).ravel()
        return float(f @ (self.K @ g))


def assemble_weighted_operator(env, grid: CubeGrid, lam: float, zero_order: float) -> WeightedOperator:
    if lam * grid.side > OVERFLOW_GUARD:
        raise ConfigError(f"overflow guard: lam * 3^M = {lam * grid.side:.4g} exceeds {OVERFLOW_GUARD}")
    if zero_order < 0:
        raise ConfigError("zero_order must be non-negative")
    _check_resolution(env, grid)
    d, N, h = grid.d, grid.N, grid.h
    axis = grid.axis
    strides = [N ** (d - 1 - k) for k in range(d)]
    idx = np.arange(grid.n_nodes).reshape(grid.shape)
    tw1 = np.ones(N)
    tw1[0] = tw1[-1] = 0.5
    rows, cols, vals = [], [], []

    # links: diagonal coefficients at midpoints
    for k in range(d):
        sl = [slice(None)] * d
        sl[k] = slice(0, N - 1)
        lo = idx[tuple(sl)].ravel()
        mids = []
        tw = np.ones(())
        for j in range(d):
            if j == k:
                mids.append(axis[:-1] + h / 2)
                tw = np.multiply.outer(tw, np.ones(N - 1))
            else:
                mids.append(axis)
                tw = np.multiply.outer(tw, tw1)
        pts = np.stack(np.meshgrid(*mids, indexing="ij"), -1).reshape(-1, d)
        at = env.sample(pts).a_tilde
        c = 0.5 * h ** (d - 2) * at[:, k, k] * np.exp(2.0 * lam * pts[:, 0]) * tw.ravel()
        hi = lo + strides[k]
        rows += [lo, hi, lo, hi]
        cols += [lo, hi, hi, lo]
        vals += [c, c, -c, -c]

    # cells: off-diagonal coefficients at centres
    cell_lo = idx[(slice(0, N - 1),) * d].ravel()
    centres = np.stack(np.meshgrid(*([axis[:-1] + h / 2] * d), indexing="ij"), -1).reshape(-1, d)
    at = env.sample(centres).a_tilde
    pairs = [(k, l) for k in range(d) for l in range(k + 1, d)]
    if any(np.any(at[:, k, l] != 0) for k, l in pairs):
        corners = list(itertools.product((0, 1), repeat=d))
        signs = np.array([[1.0 if c[k] else -1.0 for k in range(d)] for c in corners])
        offs = np.array([sum(c[k] * strides[k] for k in range(d)) for c in corners])
        scale = 0.5 * h ** d / (h * h * 4 ** (d - 1)) * np.exp(2.0 * lam * centres[:, 0])
        elem = np.zeros((len(cell_lo), len(corners), len(corners)))
        for k, l in pairs:
            outer = np.outer(signs[:, k], signs[:, l])
            elem += (scale * at[:, k, l])[:, None, None] * (outer + outer.T)
        for a_, oa in enumerate(offs):
            for b_, ob in enumerate(offs):
                rows.append(cell_lo + oa)
                cols.append(cell_lo + ob)
                vals.append(elem[:, a_, b_])

    K = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(grid.n_nodes, grid.n_nodes),
    ).tocsr()
    K.sum_duplicates()
    return WeightedOperator(grid, K, lam, zero_order)


def _pcg(A, b, precond, tol, maxiter, scales):
    """Preconditioned CG.

    Stops when max over ``scales`` of |scale * r| / |scale * b| is below tol.
    """
    x = np.zeros_like(b)
    r = b.copy()
    bn = [np.linalg.norm(sc * b) for sc in scales]
    history = []
    if max(bn) == 0.0:
        return x, 0, 0.0, history

    def rel(r):
        return max(np.linalg.norm(sc * r) / n for sc, n in zip(scales, bn) if n > 0)

    z = precond(r)
    p = z.copy()
    rz = r @ z
    for it in range(1, maxiter + 1):
        Ap = A @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = rel(r)
        history.append(res)
        if res <= tol:
            # confirm with the true residual
            r = b - A @ x
            res = rel(r)
            history[-1] = res
            if res <= tol:
                return x, it, res, history
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    return x, maxiter, history[-1], history


def solve_dirichlet(op: WeightedOperator, boundary: DiscreteField, rhs: DiscreteField,
                    tol: float = 1e-9, preconditioner: str = "amg", maxiter: Optional[int] = None):
    """Solve L u = rhs inside the cube with u = boundary on its faces.

    The interior system (K_II + zero_order M_w) u_I = M_w rhs_I - K_IB g_B is
    SPD.  It is symmetrically scaled by its diagonal and solved by PCG with a
    smoothed-aggregation AMG cycle (or Jacobi).  Convergence requires the
    relative residual of L u = rhs to be below tol both in the weighted norm
    and in the unweighted Euclidean norm over interior nodes.
    """
    if not tol > 0:
        raise ConfigError("tol must be positive")
    g = op.grid
    t0 = time.perf_counter()
    I = op.interior
    B = ~I
    gb = boundary.values.reshape(g.n_nodes)[B]
    r = rhs.values.reshape(g.n_nodes)[I]
    w = op.weight[I]
    mw = op.vol * w
    Kc = op.K.tocsc()
    A = (Kc[:, I].tocsr()[I] + sp.diags(op.zero_order * mw)).tocsr()
    KIB = Kc[:, B].tocsr()[I]
    b = mw * r - KIB @ gb
    dg = A.diagonal()
    if np.any(dg <= 0):
        raise SolverError("non-positive diagonal in the interior system")
    s = 1.0 / np.sqrt(dg)
    As = sp.diags(s) @ A @ sp.diags(s)
    bs = s * b
    if preconditioner == "amg":
        import pyamg

        # pyamg draws spectral-radius start vectors from the global RNG; pin it
        # so that repeated solves are bit-identical, then restore the caller's state
        state = np.random.get_state()
        np.random.seed(0)
        try:
            ml = pyamg.smoothed_aggregation_solver(As.tocsr(), symmetry="symmetric", max_coarse=500)
        finally:
            np.random.set_state(state)
        M = ml.aspreconditioner(cycle="V")
        precond = lambda v: M @ v
    elif preconditioner == "jacobi":
        precond = lambda v: v
    else:
        raise ConfigError(f"unknown preconditioner {preconditioner!r}")
    maxiter = maxiter if maxiter is not None else 20 * g.N
    # the scaled residual is s * (b - A u) and the L-residual is (b - A u) / mw;
    # check it in the weighted norm and in the plain Euclidean norm
    scales = [1.0 / (s * np.sqrt(mw)), 1.0 / (s * mw)]
    v, it, res, hist = _pcg(As, bs, precond, tol, maxiter, scales)
    u_I = s * v
    report = SolveReport(it, float(res), tol, time.perf_counter() - t0, preconditioner, res <= tol, hist)
    if res > tol:
        raise SolverError(f"PCG did not reach tol {tol:g} (residual {res:.3g}) within {maxiter} iterations", hist)
    out = np.empty(g.n_nodes)
    out[I] = u_I
    out[B] = gb
    return DiscreteField(g, out.reshape(g.shape)), report


def _const(grid, value=0.0):
    return DiscreteField(grid, np.full(grid.shape, value, dtype=float))


def solve_corrector(env, grid: CubeGrid, p, tol: float = 1e-9, preconditioner: str = "amg",
                    op: Optional[WeightedOperator] = None):
    """Dirichlet corrector: -div(a~ grad w) = 0 in the cube, w = p.x on the faces."""
    p = np.asarray(p, dtype=float)
    op = op or assemble_weighted_operator(env, grid, 0.0, 0.0)
    affine = DiscreteField(grid, grid.coords() @ p)
    return solve_dirichlet(op, affine, _const(grid), tol, preconditioner)


@dataclass
class HomogenizedResult:
    matrix: np.ndarray
    asymmetry: float
    coarse_matrix: Optional[np.ndarray]
    level_difference: Optional[float]
    reports: list

    def to_dict(self) -> dict:
        return {
            "matrix": self.matrix.tolist(),
            "asymmetry": self.asymmetry,
            "coarse_matrix": None if self.coarse_matrix is None else self.coarse_matrix.tolist(),
            "level_difference": self.level_difference,
            "solves": [r.to_dict() for r in self.reports],
        }


def _averaged_flux(env, grid, tol, preconditioner):
    op = assemble_weighted_operator(env, grid, 0.0, 0.0)
    x = grid.coords().reshape(grid.n_nodes, grid.d)
    cols, reports = [], []
    for j in range(grid.d):
        w, rep = solve_corrector(env, grid, np.eye(grid.d)[j], tol, preconditioner, op)
        reports.append(rep)
        wf = w.values.ravel()
        # 2 * B(x_i, w_j): K carries the factor 1/2
        cols.append([2.0 * op.energy(x[:, i], wf) for i in range(grid.d)])
    return np.array(cols).T / grid.side ** grid.d, reports


def homogenized_matrix(env, grid: CubeGrid, tol: float = 1e-9, preconditioner: str = "amg",
                       compare_coarser: bool = True) -> HomogenizedResult:
    """Averaged flux of the Dirichlet correctors: a_bar[:, j] = avg(a~ grad w_j).

    Computed as the discrete energy pairing B(x_i, w_j) / |cube|, which is
    symmetric up to solver tolerance.  With ``compare_coarser`` the same
    quantity on the cube one level down (same spacing) is reported too.
    """
    a_bar, reports = _averaged_flux(env, grid, tol, preconditioner)
    asym = float(np.abs(a_bar - a_bar.T).max())
    coarse = diff = None
    if compare_coarser and grid.M >= 1:
        n_c = int(round((grid.N - 1) / 3)) + 1
        if n_c % 2 == 0 and grid.N % 2 == 1:
            n_c += 1
        if n_c >= 9:
            cg = CubeGrid(grid.M - 1, n_c, grid.d)
            try:
                coarse, rc = _averaged_flux(env, cg, tol, preconditioner)
                reports += rc
                diff = float(np.abs(a_bar - coarse).max())
            except GridError:
                coarse = None
    return HomogenizedResult(a_bar, asym, coarse, diff, reports)


def _resolvent_operator(env, grid, m, h, rho):
    if grid.M != m + h:
        raise GridError(f"grid level {grid.M} does not equal m + h = {m + h}")
    lam = rho * 3.0 ** (-m)
    if lam > 1.0:
        raise ConfigError(f"lam = rho 3^-m = {lam:.4g} exceeds 1")
    return lam, assemble_weighted_operator(env, grid, lam, rho * 3.0 ** (-2 * m))


def solve_velocity_resolvent(env, grid: CubeGrid, m: int, h: int, rho: float, a_bar,
                             tol: float = 1e-9, preconditioner: str = "amg"):
    """Componentwise rho 3^{-2m} u - L^lam u = b, u = 3^m a_bar e1 on the faces.

    b = 1/2 div(a~) + lam a~ e1 is the Ito drift at the nodes.
    Returns the vector field u and the solve reports.
    """
    lam, op = _resolvent_operator(env, grid, m, h, rho)
    pts = grid.coords().reshape(grid.n_nodes, grid.d)
    s = env.sample(pts)
    b = 0.5 * s.div_a_tilde + lam * s.a_tilde[:, :, 0]
    bc = 3.0 ** m * np.asarray(a_bar, dtype=float)[:, 0]
    comps, reports = [], []
    for j in range(grid.d):
        u, rep = solve_dirichlet(op, _const(grid, bc[j]), DiscreteField(grid, b[:, j].reshape(grid.shape)),
                                 tol, preconditioner)
        comps.append(u.values)
        reports.append(rep)
    return DiscreteField(grid, np.stack(comps, -1)), reports


def solve_clock_resolvent(env, grid: CubeGrid, m: int, h: int, rho: float, mean_weight: float,
                          tol: float = 1e-9, preconditioner: str = "amg"):
    """rho 3^{-2m} q - L^lam q = rho 3^{-2m} (e^{-2V} - mean_weight), q = 0 on the faces."""
    lam, op = _resolvent_operator(env, grid, m, h, rho)
    pts = grid.coords().reshape(grid.n_nodes, grid.d)
    src = op.zero_order * (env.clock_weight(pts) - mean_weight)
    q, rep = solve_dirichlet(op, _const(grid), DiscreteField(grid, src.reshape(grid.shape)), tol, preconditioner)
    return q, rep


def homogenization_error(u_m: DiscreteField, a_bar, m: int) -> np.ndarray:
    """U_m(0) = 3^{-m} u_m(0) - a_bar e1."""
    return 3.0 ** (-m) * np.asarray(u_m.at_origin()) - np.asarray(a_bar, dtype=float)[:, 0]


def resolvent_residual(env, u: DiscreteField, m: int, h: int, rho: float) -> float:
    """Relative residual of rho 3^{-2m} u - L^lam u = b over interior nodes.

    Recomputed from the operator application and a fresh evaluation of the
    drift, in the unweighted Euclidean norm; worst component.
    """
    lam, op = _resolvent_operator(env, u.grid, m, h, rho)
    g = u.grid
    s = env.sample(g.coords().reshape(g.n_nodes, g.d))
    b = 0.5 * s.div_a_tilde + lam * s.a_tilde[:, :, 0]
    mask = op.interior
    worst = 0.0
    for j in range(g.d):
        r = op.apply(u.values[..., j]).ravel()[mask] - b[mask, j]
        scale = np.linalg.norm(b[mask, j])
        worst = max(worst, np.linalg.norm(r) / scale if scale > 0 else np.linalg.norm(r))
    return worst


def _cosine_coefficients(values: np.ndarray) -> np.ndarray:
    """Coefficients in the volume-normalized Neumann cosine basis.

    The basis is orthonormal for the trapezoid-weighted average over nodes,
    so a constant maps to its value in the zero mode and nowhere else.
    """
    d = values.ndim
    N = values.shape[0]
    y = dctn(values, type=1)
    norm = np.full(N, math.sqrt(0.5))
    norm[0] = norm[-1] = 1.0
    for ax in range(d):
        shape = [1] * d
        shape[ax] = N
        y = y / (2.0 * (N - 1) * norm.reshape(shape))
    return y


def negative_sobolev_norm(f: DiscreteField, s: float = 1.0 / 6.0) -> float:
    """Spectral H^{-s} surrogate of the volume-normalized dual norm on the cube.

    With coefficients f_k in the Neumann cosine basis of the unit cube
    (eigenvalues pi^2 |k|^2), returns 3^{sM} (sum_k (1 + pi^2|k|^2)^{-s} f_k^2)^{1/2}.
    The prefactor is the scaling of the dual norm under pullback from the
    cube of side 3^M to the unit cube.
    """
    if not 0 < s <= 0.5:
        raise ConfigError("s must lie in (0, 1/2]")
    g = f.grid
    if f.kind != "scalar":
        raise GridError("negative norm needs a scalar field")
    c = _cosine_coefficients(f.values)
    k = np.arange(g.N, dtype=float)
    k2 = sum(np.meshgrid(*([k * k] * g.d), indexing="ij"))
    mult = (1.0 + math.pi ** 2 * k2) ** (-s)
    return float(3.0 ** (s * g.M) * math.sqrt(np.sum(mult * c * c)))
