"""Scaled Gradient Projection for ``min_{x >= 0} ||Ax - b||^2 + lam * TV_beta(x)``.

Each iteration takes a diagonally scaled gradient step, projects onto the
nonnegative orthant and backtracks along the feasible direction until a
nonmonotone Armijo condition holds. Step lengths come from scaled
Barzilai-Borwein rules, alternating between BB1 and BB2 every
``bb_alternation`` iterations. The diagonal scaling follows the
split-gradient rule ``x / V(x)`` where ``grad f = V - U`` with ``V, U >= 0``.

The solver state after any iteration is captured in :class:`SGPState`, so a
run stopped after ``K`` iterations can be resumed and finishes bit-for-bit
where an uninterrupted run would.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..geometry import GridSpec, ScanGeometry
from ..projector import get_projector
from .tv import tv_beta, tv_beta_gradient, tv_beta_split_gradient


class SolverError(RuntimeError):
    """Raised when the line search fails or the objective stops being finite."""


@dataclass(frozen=True)
class SolverConfig:
    """Hyperparameters of the SGP solver.

    ``lam`` is the regularisation weight (``"lambda"`` in JSON). The scaling
    entries are clamped to ``[max(L_min, 1/l_k), min(L_max, l_k)]`` with
    ``l_k = sqrt(1 + scaling_decay / k^2)``, which tightens towards the
    identity as iterations proceed.
    """

    lam: float = 4e-5
    beta: float = 1e-3
    max_iters: int = 3000
    stop_tol: float = 1e-6
    alpha_bounds: tuple[float, float] = (1e-10, 1e10)
    scaling_bounds: tuple[float, float] = (1e-10, 1e10)
    scaling_decay: float = 1e10
    sigma: float = 1e-4
    rho: float = 0.4
    memory: int = 10
    bb_alternation: int = 3
    alpha_init: float = 1.0
    max_backtracks: int = 60
    use_scaling: bool = True

    def __post_init__(self):
        if not self.lam >= 0:
            raise ValueError("lambda must be nonnegative")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.max_iters < 0:
            raise ValueError("max_iters must be nonnegative")
        if not self.stop_tol >= 0:
            raise ValueError("stop_tol must be nonnegative")
        a_lo, a_hi = self.alpha_bounds
        if not 0 < a_lo < a_hi:
            raise ValueError("alpha_bounds must satisfy 0 < alpha_min < alpha_max")
        l_lo, l_hi = self.scaling_bounds
        if not (0 < l_lo < l_hi and l_hi <= 1.0 / l_lo * (1 + 1e-12)):
            raise ValueError("scaling_bounds must satisfy 0 < L_min < L_max <= 1/L_min")
        if not (0 < self.sigma < 1 and 0 < self.rho < 1):
            raise ValueError("line search constants sigma and rho must lie in (0, 1)")
        if self.memory < 1 or self.bb_alternation < 1:
            raise ValueError("memory and bb_alternation must be >= 1")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["lambda"] = doc.pop("lam")
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SolverConfig":
        doc = dict(doc)
        if "lambda" in doc:
            doc["lam"] = doc.pop("lambda")
        names = {f.name for f in fields(cls)}
        unknown = set(doc) - names
        if unknown:
            raise ValueError(f"unknown solver config keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})


@dataclass
class SGPState:
    """Everything the next iteration depends on."""

    k: int
    x: np.ndarray
    residual: np.ndarray
    grad: np.ndarray
    objective: float
    alpha: float
    scaling: np.ndarray
    memory: list[float]

    def copy(self) -> "SGPState":
        return SGPState(self.k, self.x.copy(), self.residual.copy(), self.grad.copy(),
                        self.objective, self.alpha, self.scaling.copy(), list(self.memory))


@dataclass
class SolveReport:
    objective_history: list[float] = field(default_factory=list)
    steplength_history: list[float] = field(default_factory=list)
    linesearch_history: list[float] = field(default_factory=list)
    rmse_history: list[float] = field(default_factory=list)
    iterates_kept: list[tuple[int, np.ndarray]] = field(default_factory=list)
    initial_objective: float = math.nan
    stop_reason: str = "max_iters"
    K_star: int | None = None
    state: SGPState | None = None

    @property
    def n_iter(self) -> int:
        return len(self.objective_history)

    def to_csv(self, path: str | Path) -> None:
        """Write ``iteration, objective, steplength[, rmse_vs_gt]`` rows; iteration 0 is the start."""
        with_rmse = bool(self.rmse_history)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "objective", "steplength"] + (["rmse_vs_gt"] if with_rmse else []))
            for i, f in enumerate([self.initial_objective] + self.objective_history):
                row = [i, repr(f), repr(self.steplength_history[i - 1]) if i else ""]
                if with_rmse:
                    row.append(repr(self.rmse_history[i]))
                writer.writerow(row)

    def extend(self, other: "SolveReport") -> "SolveReport":
        """Concatenate a resumed run onto this one."""
        return SolveReport(
            objective_history=self.objective_history + other.objective_history,
            steplength_history=self.steplength_history + other.steplength_history,
            linesearch_history=self.linesearch_history + other.linesearch_history,
            rmse_history=self.rmse_history + other.rmse_history[1:],
            iterates_kept=self.iterates_kept + other.iterates_kept,
            initial_objective=self.initial_objective,
            stop_reason=other.stop_reason,
            K_star=other.K_star,
            state=other.state,
        )


class SGPProblem:
    """Objective, gradient and scaling for one sinogram."""

    def __init__(self, b: np.ndarray, geometry: ScanGeometry, cfg: SolverConfig, grid: GridSpec):
        self.projector = get_projector(grid, geometry)
        self.b = np.asarray(b, dtype=np.float64)
        if self.b.shape != geometry.sinogram_shape:
            raise ValueError(f"sinogram shape {self.b.shape} does not match geometry {geometry.sinogram_shape}")
        self.cfg = cfg
        self.grid = grid
        # split of the data-term gradient 2A^T(Ax - b) into V - U with V, U >= 0
        self._bt_pos = 2.0 * self.projector.adjoint(np.maximum(self.b, 0.0))

    def objective_from_residual(self, x: np.ndarray, residual: np.ndarray) -> float:
        value = float(np.dot(residual.ravel(), residual.ravel()))
        if self.cfg.lam:
            value += self.cfg.lam * tv_beta(x, self.cfg.beta)
        return value

    def objective(self, x: np.ndarray) -> float:
        return self.objective_from_residual(x, self.projector.forward(x) - self.b)

    def gradient_from_residual(self, x: np.ndarray, residual: np.ndarray) -> np.ndarray:
        return self.derivatives(x, residual, 0)[0]

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return self.gradient_from_residual(x, self.projector.forward(x) - self.b)

    def derivatives(self, x: np.ndarray, residual: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Gradient at ``x`` and the diagonal scaling for iteration ``k``."""
        cfg = self.cfg
        atr2 = 2.0 * self.projector.adjoint(residual)
        g = atr2.copy()
        if cfg.lam:
            g += cfg.lam * tv_beta_gradient(x, cfg.beta)
        if not cfg.use_scaling:
            return g, np.ones_like(x)
        bound = math.sqrt(1.0 + cfg.scaling_decay / max(k, 1) ** 2)
        lo = max(cfg.scaling_bounds[0], 1.0 / bound)
        hi = min(cfg.scaling_bounds[1], bound)
        # 2 A^T A x + 2 A^T b_-  ==  2 A^T r + 2 A^T b_+
        v = atr2 + self._bt_pos
        if cfg.lam:
            v += cfg.lam * tv_beta_split_gradient(x, cfg.beta)[0]
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(v > 0, x / v, 0.0)
        return g, np.clip(d, lo, hi)

    def initial_state(self) -> SGPState:
        x = np.zeros(self.grid.shape)
        residual = -self.b.copy()
        f = self.objective_from_residual(x, residual)
        g, scaling = self.derivatives(x, residual, 0)
        return SGPState(0, x, residual, g, f, self.cfg.alpha_init, scaling, [f])


def _bb_steplength(s, z, d, k, cfg: SolverConfig) -> float:
    a_lo, a_hi = cfg.alpha_bounds
    if (k // cfg.bb_alternation) % 2 == 0:
        denom = float(np.sum(s * z / d))
        alpha = float(np.sum(s * s / (d * d))) / denom if denom > 0 else a_hi
    else:
        dz = d * z
        num = float(np.sum(s * dz))
        alpha = num / float(np.sum(dz * dz)) if num > 0 else a_hi
    return min(max(alpha, a_lo), a_hi)


def _iterate(problem: SGPProblem, st: SGPState) -> tuple[SGPState, float, float, bool]:
    """One SGP iteration ``x^(k) -> x^(k+1)``; returns the new state, step, line-search factor, stationarity flag."""
    cfg = problem.cfg
    y = np.maximum(st.x - st.alpha * st.scaling * st.grad, 0.0)
    d = y - st.x
    slope = float(np.sum(st.grad * d))
    if slope >= 0:
        return st, st.alpha, 0.0, True
    ad = problem.projector.forward(d)
    f_ref = max(st.memory)
    step = 1.0
    for _ in range(cfg.max_backtracks + 1):
        x_new = st.x + step * d
        r_new = st.residual + step * ad
        f_new = problem.objective_from_residual(x_new, r_new)
        if not math.isfinite(f_new):
            raise SolverError(f"non-finite objective at iteration {st.k + 1}")
        if f_new <= f_ref + cfg.sigma * step * slope:
            break
        step *= cfg.rho
    else:
        raise SolverError(f"line search exhausted {cfg.max_backtracks} backtracks at iteration {st.k + 1}")

    k_new = st.k + 1
    g_new, scaling = problem.derivatives(x_new, r_new, k_new)
    alpha = _bb_steplength(x_new - st.x, g_new - st.grad, scaling, k_new, cfg)
    memory = (st.memory + [f_new])[-cfg.memory:]
    return SGPState(k_new, x_new, r_new, g_new, f_new, alpha, scaling, memory), st.alpha, step, False


def sgp_solve(
    b: np.ndarray,
    geometry: ScanGeometry,
    cfg: SolverConfig,
    n_iter: int | None = None,
    *,
    grid: GridSpec | None = None,
    state: SGPState | None = None,
    x_gt: np.ndarray | None = None,
    keep_iterates=(),
) -> tuple[np.ndarray, SolveReport]:
    """Run SGP from ``x = 0`` (or from a saved ``state``).

    Parameters
    ----------
    b : ndarray of shape (views, detectors)
        Measured sinogram.
    geometry : ScanGeometry
    cfg : SolverConfig
    n_iter : int or None
        Stop after this many total iterations (early-stopped mode). ``None``
        runs until the relative objective change drops below ``cfg.stop_tol``
        or ``cfg.max_iters`` is reached. The tolerance test is active in both
        modes.
    grid : GridSpec, optional
        Defaults to unit pixels with ``n = num_detectors // 2``.
    state : SGPState, optional
        Resume from the state stored in a previous report.
    x_gt : ndarray, optional
        When given, the RMSE of every iterate against it is recorded.
    keep_iterates : iterable of int
        Iteration indices whose images are stored in the report.

    Returns
    -------
    x : ndarray of shape (n, n)
    report : SolveReport
    """
    if grid is None:
        grid = GridSpec(geometry.num_detectors // 2)
    if n_iter is not None and n_iter < 0:
        raise ValueError("n_iter must be >= 0")
    problem = SGPProblem(b, geometry, cfg, grid)
    st = problem.initial_state() if state is None else state.copy()
    limit = cfg.max_iters if n_iter is None else n_iter
    keep = set(keep_iterates)

    report = SolveReport(initial_objective=st.objective)
    if x_gt is not None:
        report.rmse_history.append(_rmse(st.x, x_gt))
    if st.k in keep:
        report.iterates_kept.append((st.k, st.x.copy()))

    while st.k < limit:
        f_old = st.objective
        st, alpha, step, stationary = _iterate(problem, st)
        if stationary:
            report.stop_reason = "tolerance"
            report.K_star = st.k
            break
        report.objective_history.append(st.objective)
        report.steplength_history.append(alpha)
        report.linesearch_history.append(step)
        if x_gt is not None:
            report.rmse_history.append(_rmse(st.x, x_gt))
        if st.k in keep:
            report.iterates_kept.append((st.k, st.x.copy()))
        if abs(st.objective - f_old) <= cfg.stop_tol * abs(f_old):
            report.stop_reason = "tolerance"
            report.K_star = st.k
            break
    else:
        report.stop_reason = "max_iters" if n_iter is None or n_iter >= cfg.max_iters else "fixed_K"
    report.state = st
    return st.x.copy(), report


def _rmse(x, y):
    return float(np.sqrt(np.mean((np.asarray(x) - np.asarray(y)) ** 2)))


def objective(x: np.ndarray, b: np.ndarray, geometry: ScanGeometry, cfg: SolverConfig,
              grid: GridSpec | None = None) -> float:
    """``||Ax - b||^2 + lam * TV_beta(x)``."""
    grid = grid or GridSpec(np.shape(x)[-1])
    return SGPProblem(b, geometry, cfg, grid).objective(np.asarray(x, dtype=np.float64))


def objective_gradient(x: np.ndarray, b: np.ndarray, geometry: ScanGeometry, cfg: SolverConfig,
                       grid: GridSpec | None = None) -> np.ndarray:
    """``2 A^T (Ax - b) + lam * grad TV_beta(x)``."""
    grid = grid or GridSpec(np.shape(x)[-1])
    return SGPProblem(b, geometry, cfg, grid).gradient(np.asarray(x, dtype=np.float64))


def compose_iterations_check(b: np.ndarray, geometry: ScanGeometry, cfg: SolverConfig, K: int,
                             grid: GridSpec | None = None) -> bool:
    """True when ``K`` iterations followed by a resumed run to convergence equal one straight run."""
    x_full, full = sgp_solve(b, geometry, cfg, grid=grid)
    x_ris, head = sgp_solve(b, geometry, cfg, n_iter=K, grid=grid)
    if head.stop_reason == "tolerance":
        x_is, tail_hist = x_ris, head
    else:
        x_is, tail = sgp_solve(b, geometry, cfg, grid=grid, state=head.state)
        tail_hist = head.extend(tail)
    return (
        np.array_equal(x_full, x_is)
        and full.objective_history == tail_hist.objective_history
        and full.K_star == tail_hist.K_star
    )


def with_overrides(cfg: SolverConfig, **changes) -> SolverConfig:
    return replace(cfg, **{k: v for k, v in changes.items() if v is not None})
