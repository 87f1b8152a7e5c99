"""
Error propagation
Analytic covariance recursion, trace-growth bounds and their Monte Carlo
counterparts. The analytic and empirical sides serve as each other's oracle.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from dynamics import (DimensionMismatchError, DivergenceError, NoiseModel, TransitionMap,
                      _advance, _as_array, simulate_ensemble)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-12
PSD_TOL = 1e-10
UNIT_RHO_GUARD = 1e-9


@dataclass(frozen=True, eq=False)
class CovarianceState:
    """Error covariance Sigma_t = E[delta_t delta_t^T] after ``step`` transitions"""

    sigma: np.ndarray
    step: int = 0

    def __post_init__(self):
        S = np.atleast_2d(np.array(self.sigma, dtype=float))
        if S.shape[0] != S.shape[1]:
            raise DimensionMismatchError(f"Covariance must be square, got {S.shape}")
        if np.max(np.abs(S - S.T), initial=0.0) > SYMMETRY_TOL * max(1.0, np.max(np.abs(S))):
            raise ValueError("Covariance is not symmetric")
        S = 0.5 * (S + S.T)
        if S.size and np.linalg.eigvalsh(S)[0] < -PSD_TOL * max(1.0, np.max(np.abs(S))):
            raise ValueError("Covariance is not positive semidefinite")
        S.setflags(write=False)
        object.__setattr__(self, "sigma", S)

    @classmethod
    def zeros(cls, d: int) -> "CovarianceState":
        return cls(np.zeros((d, d)))

    @property
    def d(self) -> int:
        return int(self.sigma.shape[0])

    def trace(self) -> float:
        return float(np.trace(self.sigma))

    def spectral_norm(self) -> float:
        return float(np.linalg.eigvalsh(self.sigma)[-1])


@dataclass(frozen=True)
class GrowthBoundParams:
    """
    Symbols of the trace-growth bound.

    ``rho`` should be the spectral norm of the one-step transition for the
    bound to be guaranteed; a spectral radius does not bound transient growth
    of non-normal maps. ``dim`` scales the per-step noise trace (dim * sigma2).
    """

    rho: float
    sigma2: float
    trace0: float = 0.0
    psi: float = 1.0
    dim: int = 1

    def __post_init__(self):
        if not self.rho > 0:
            raise ValueError("rho must be > 0")
        if self.sigma2 < 0 or self.trace0 < 0:
            raise ValueError("sigma2 and trace0 must be >= 0")
        if not self.psi > 0:
            raise ValueError("psi must be > 0")
        if self.dim < 1:
            raise ValueError("dim must be >= 1")


def propagate_covariance(cov: CovarianceState, A, sigma2: float) -> CovarianceState:
    """Sigma_{t+1} = A Sigma_t A^T + sigma2 I, re-symmetrized"""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.shape != (cov.d, cov.d):
        raise DimensionMismatchError(f"Transition shape {A.shape} does not match covariance dimension {cov.d}")
    nxt = A @ cov.sigma @ A.T + sigma2 * np.eye(cov.d)
    return CovarianceState(0.5 * (nxt + nxt.T), cov.step + 1)


def _geometric_sum(r2: float, n: int) -> float:
    """sum_{k=0}^{n-1} r2^k with the r2 = 1 limit handled explicitly; inf past float range"""
    if abs(math.sqrt(r2) - 1.0) < UNIT_RHO_GUARD:
        return float(n)
    log_r2 = math.log(r2)
    try:
        return math.expm1(n * log_r2) / math.expm1(log_r2)
    except OverflowError:
        return math.inf


def _grown(start: float, r2: float, n: int) -> float:
    """start * r2^n, saturating at inf"""
    if start == 0.0:
        return 0.0
    try:
        return start * r2 ** n
    except OverflowError:
        return math.inf


def trace_bound(n: int, p: GrowthBoundParams) -> float:
    """
    Initial error growth plus noise accumulation after ``n`` steps.

    Exact for scalar constant-A systems and for A = rho * Q with Q
    orthogonal; an upper bound otherwise when rho is the spectral norm.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    r2 = p.rho ** 2
    noise = p.dim * p.sigma2
    return _grown(p.trace0, r2, n) + (noise * _geometric_sum(r2, n) if noise else 0.0)


def norm_bound(n: int, p: GrowthBoundParams, norm0: Optional[float] = None) -> float:
    """
    Bound on ||Sigma_n||_2 from ||Sigma_{t+1}|| <= mu^2 ||Sigma_t|| + sigma2.

    ``norm0`` defaults to trace0, which bounds ||Sigma_0||_2 for PSD matrices.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    r2 = p.rho ** 2
    start = p.trace0 if norm0 is None else norm0
    return _grown(start, r2, n) + (p.sigma2 * _geometric_sum(r2, n) if p.sigma2 else 0.0)


def trace_series(n_steps: int, p: GrowthBoundParams) -> List[float]:
    """Entry i is the bound after i + 1 steps"""
    return [trace_bound(k, p) for k in range(1, n_steps + 1)]


def crossing_step(traces: Sequence[float], psi: float) -> Optional[int]:
    """First index whose trace reaches ``psi``; None when never breached"""
    if len(traces) == 0:
        raise ValueError("traces must be nonempty")
    for i, value in enumerate(traces):
        if value >= psi:
            return i
    return None


def analytic_traces(transition: TransitionMap, sigma2: float, s0, n_steps: int,
                    cov0: Optional[CovarianceState] = None) -> List[float]:
    """
    Covariance recursion linearized along the ideal trajectory.

    For linear maps A_t is the exact transition and the result is exact.
    Entry i is the trace after i + 1 steps.
    """
    ideal = _as_array(s0).copy()
    cov = CovarianceState.zeros(transition.d) if cov0 is None else cov0
    traces = []
    for t in range(n_steps):
        cov = propagate_covariance(cov, transition.transition_matrix(ideal, t), sigma2)
        ideal = _advance(transition, ideal, 0.0, t)
        traces.append(cov.trace())
    return traces


def empirical_trace(transition: TransitionMap, noise: NoiseModel, s0, n_steps: int,
                    n_samples: int) -> List[float]:
    """
    Trace of the unbiased sample covariance of delta_t over seeded runs.

    Entry i is the trace after i + 1 steps. Any diverged sample raises
    DivergenceError carrying the number of diverged samples.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be >= 2")
    run = simulate_ensemble(transition, s0, noise, n_steps, n_samples)
    if run.n_diverged:
        raise DivergenceError(f"{run.n_diverged} of {n_samples} samples diverged",
                              n_diverged=run.n_diverged)
    dev = run.deviations[:, 1:, :]
    return np.var(dev, axis=0, ddof=1).sum(axis=1).tolist()


def trace_comparison(transition: TransitionMap, noise: NoiseModel, s0, n_steps: int,
                     n_samples: int) -> pd.DataFrame:
    """Analytic vs Monte Carlo trace per step, ready for CSV export"""
    analytic = analytic_traces(transition, noise.sigma2, s0, n_steps)
    run = simulate_ensemble(transition, s0, noise, n_steps, n_samples)
    if run.n_diverged:
        raise DivergenceError(f"{run.n_diverged} of {n_samples} samples diverged",
                              n_diverged=run.n_diverged)
    dev = run.deviations[:, 1:, :]
    centered = dev - dev.mean(axis=0, keepdims=True)
    sq = (centered ** 2).sum(axis=2) * n_samples / (n_samples - 1)
    logger.info(f"Trace comparison over {n_samples} samples and {n_steps} steps")
    return pd.DataFrame({
        "step": np.arange(1, n_steps + 1),
        "analytic_trace": analytic,
        "empirical_trace": sq.mean(axis=0),
        "stderr": sq.std(axis=0, ddof=1) / math.sqrt(n_samples),
    })
