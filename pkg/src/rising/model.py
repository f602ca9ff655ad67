"""Two-step reconstruction: a few solver iterations, then a network that finishes the job."""

from __future__ import annotations

import time

from sklearn.base import BaseEstimator, RegressorMixin, clone
from sklearn.utils.validation import check_is_fitted

from .nn.estimator import ResUNetRegressor
from .solver.estimator import SGPReconstructor
from .validation import check_images

RISING_MODE = "rising"
LPP_MODE = "lpp"


class RISING(RegressorMixin, BaseEstimator):
    """Early-stopped SGP followed by a residual U-Net.

    In ``"rising"`` mode the network is trained to map the ``K``-iteration
    reconstruction onto the solver's converged image. In ``"lpp"`` mode it is
    trained against the ground truth passed as ``y`` (learned post-processing
    baseline); everything else is identical.

    Parameters
    ----------
    reconstructor : SGPReconstructor
        Its ``n_iter`` is the early-stopping count ``K``.
    network : ResUNetRegressor
    mode : {"rising", "lpp"}
    """

    def __init__(self, reconstructor: SGPReconstructor | None = None,
                 network: ResUNetRegressor | None = None, mode: str = RISING_MODE):
        self.reconstructor = reconstructor
        self.network = network
        self.mode = mode

    def _early_solver(self):
        solver = clone(self.reconstructor)
        if solver.n_iter is None:
            raise ValueError("reconstructor.n_iter (K) must be set for the rapid solver step")
        return solver

    def fit(self, X, y=None):
        """Fit on sinograms ``X``; ``y`` holds ground-truth images (required for ``"lpp"``)."""
        if self.mode not in (RISING_MODE, LPP_MODE):
            raise ValueError(f"mode must be 'rising' or 'lpp', got {self.mode!r}")
        self.reconstructor_ = self._early_solver()
        x_ris = self.reconstructor_.transform(X)
        if self.mode == RISING_MODE:
            target_solver = clone(self.reconstructor).set_params(n_iter=None)
            targets = target_solver.transform(X)
            self.target_reports_ = target_solver.reports_
        else:
            if y is None:
                raise ValueError("lpp mode needs ground-truth images as y")
            targets = check_images(y, n=x_ris.shape[1], name="y")
        self.network_ = clone(self.network if self.network is not None else ResUNetRegressor())
        self.network_.fit(x_ris, targets)
        return self

    def predict(self, X):
        check_is_fitted(self, "network_")
        t0 = time.perf_counter()
        x_ris = self.reconstructor_.transform(X)
        t1 = time.perf_counter()
        out = self.network_.predict(x_ris)
        self.timings_ = {"solver_seconds": t1 - t0, "network_seconds": time.perf_counter() - t1}
        return out

    def score(self, X, y, sample_weight=None):
        """Negative mean squared error against ``y``."""
        y = check_images(y, name="y")
        return -float(((self.predict(X) - y) ** 2).mean())
