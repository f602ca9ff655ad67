from __future__ import annotations

import numpy as np
from joblib import Parallel, delayed
from sklearn.base import BaseEstimator, TransformerMixin

from ..geometry import GridSpec, ScanGeometry
from ..validation import check_sinograms
from .sgp import SolverConfig, sgp_solve


class SGPReconstructor(TransformerMixin, BaseEstimator):
    """Transform sinograms into images with the scaled gradient projection solver.

    Parameters
    ----------
    geometry : ScanGeometry
        Acquisition geometry of the sinograms.
    n : int, default=64
        Reconstruction grid size; unit pixels.
    lam, beta : float
        TV weight and smoothing.
    n_iter : int or None, default=None
        Early-stopping iteration count ``K``. ``None`` runs to convergence.
    max_iter, stop_tol :
        Convergence mode limits.
    memory, bb_alternation : int
        Nonmonotone line-search memory and BB rule switching period.
    n_jobs : int or None
        Sinograms are solved in parallel with joblib.

    Attributes
    ----------
    reports_ : list of SolveReport
        One report per transformed sinogram (last call).
    """

    def __init__(self, geometry: ScanGeometry | None = None, n: int = 64, *, lam: float = 4e-5,
                 beta: float = 1e-3, n_iter: int | None = None, max_iter: int = 3000,
                 stop_tol: float = 1e-6, memory: int = 10, bb_alternation: int = 3, n_jobs=None):
        self.geometry = geometry
        self.n = n
        self.lam = lam
        self.beta = beta
        self.n_iter = n_iter
        self.max_iter = max_iter
        self.stop_tol = stop_tol
        self.memory = memory
        self.bb_alternation = bb_alternation
        self.n_jobs = n_jobs

    def solver_config(self) -> SolverConfig:
        return SolverConfig(lam=self.lam, beta=self.beta, max_iters=self.max_iter, stop_tol=self.stop_tol,
                            memory=self.memory, bb_alternation=self.bb_alternation)

    def fit(self, X=None, y=None):
        if self.geometry is None:
            raise ValueError("geometry must be set")
        if X is not None:
            check_sinograms(X, self.geometry)
        self.solver_config()
        return self

    def __sklearn_is_fitted__(self):
        return True

    def transform(self, X):
        if self.geometry is None:
            raise ValueError("geometry must be set")
        X = check_sinograms(X, self.geometry)
        cfg = self.solver_config()
        grid = GridSpec(self.n)
        results = Parallel(n_jobs=self.n_jobs)(
            delayed(sgp_solve)(b, self.geometry, cfg, self.n_iter, grid=grid) for b in X
        )
        self.reports_ = [rep for _, rep in results]
        return np.stack([x for x, _ in results])
