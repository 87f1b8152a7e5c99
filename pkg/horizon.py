"""
Critical reasoning horizon
Closed-form N*, its consistency with the covariance recursion, and
phase-transition sweeps of open-loop success rate against chain length.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from dynamics import NoiseModel, TransitionMap, derive_seed, simulate_ensemble
from error_prop import GrowthBoundParams, trace_bound

logger = logging.getLogger(__name__)

MIN_SEEDS_PER_CELL = 30
DIFFICULTY_RANGE = (0.02, 0.3)


@dataclass(frozen=True)
class HorizonParams:
    """Lyapunov exponent ``lam`` (> 0), noise trace ``sigma2`` and tolerance ``psi``"""

    lam: float
    sigma2: float
    psi: float

    def __post_init__(self):
        if not (self.lam > 0 and self.sigma2 > 0 and self.psi > 0):
            raise ValueError("HorizonParams requires lam > 0, sigma2 > 0 and psi > 0")


def critical_horizon(p: HorizonParams) -> float:
    """
    N* = ln(1 + psi (e^{2 lam} - 1) / sigma2) / (2 lam).

    Returned as a real number; callers pick floor (conservative) or rounding.
    """
    return math.log1p(p.psi * math.expm1(2.0 * p.lam) / p.sigma2) / (2.0 * p.lam)


def matched_horizon(lam: float, sigma2: float, d: int, success_tol: float) -> float:
    """N* for the success criterion ||delta_N||_2 <= success_tol in dimension d"""
    return critical_horizon(HorizonParams(lam, d * sigma2, success_tol ** 2))


@dataclass(frozen=True)
class HorizonReport:
    n_star: float
    n_floor: int
    n_ceil: int
    crossing: int
    gap: float

    def to_dict(self) -> Dict:
        return {"n_star": self.n_star, "n_floor": self.n_floor, "n_ceil": self.n_ceil,
                "crossing": self.crossing, "gap": self.gap}


def horizon_consistency(p: HorizonParams) -> HorizonReport:
    """
    Closed-form N* against the first step where the trace recursion reaches psi.

    The bound is monotone in n, so the first breach is found by bisection
    instead of materialising the whole series.
    """
    n_star = critical_horizon(p)
    bound = GrowthBoundParams(rho=math.exp(p.lam), sigma2=p.sigma2, trace0=0.0, psi=p.psi)
    lo, hi = 0, max(1, int(math.ceil(n_star)))
    while trace_bound(hi, bound) < p.psi:
        lo, hi = hi, 2 * hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if trace_bound(mid, bound) >= p.psi:
            hi = mid
        else:
            lo = mid
    return HorizonReport(n_star=n_star, n_floor=int(math.floor(n_star)), n_ceil=int(math.ceil(n_star)),
                         crossing=hi, gap=abs(hi - n_star))


def difficulty_grid(n: int = 5, low: float = DIFFICULTY_RANGE[0], high: float = DIFFICULTY_RANGE[1]) -> List[float]:
    """Planted Lyapunov exponents, log-spaced; larger difficulty means larger lam"""
    return [float(v) for v in np.geomspace(low, high, n)]


@dataclass
class PhaseGrid:
    lengths: List[int]
    difficulties: List[float]
    success_rates: np.ndarray  # (lengths, difficulties)
    n_seeds: int
    success_tol: float
    diverged: np.ndarray = None
    n_star: List[float] = field(default_factory=list)

    def __post_init__(self):
        self.success_rates = np.asarray(self.success_rates, dtype=float)
        if self.diverged is None:
            self.diverged = np.zeros_like(self.success_rates, dtype=int)
        if np.any((self.success_rates < 0) | (self.success_rates > 1)):
            raise ValueError("success rates must lie in [0, 1]")

    def row(self, difficulty_index: int) -> np.ndarray:
        return self.success_rates[:, difficulty_index]

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for j, lam in enumerate(self.difficulties):
            for i, n in enumerate(self.lengths):
                rows.append({"length": int(n), "difficulty": float(lam),
                             "success_rate": float(self.success_rates[i, j]),
                             "n_seeds": int(self.n_seeds), "n_diverged": int(self.diverged[i, j])})
        return pd.DataFrame(rows)

    def n_star_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"difficulty": self.difficulties, "n_star": self.n_star})

    def to_dict(self) -> Dict:
        return {"lengths": [int(n) for n in self.lengths], "difficulties": list(self.difficulties),
                "success_rates": self.success_rates.tolist(), "n_seeds": self.n_seeds,
                "success_tol": self.success_tol, "diverged": self.diverged.tolist(),
                "n_star": list(self.n_star)}

    @classmethod
    def from_dict(cls, data: Dict) -> "PhaseGrid":
        return cls(lengths=list(data["lengths"]), difficulties=list(data["difficulties"]),
                   success_rates=np.array(data["success_rates"]), n_seeds=data["n_seeds"],
                   success_tol=data["success_tol"], diverged=np.array(data["diverged"], dtype=int),
                   n_star=list(data.get("n_star", [])))


def phase_sweep(map_factory: Callable[[float], TransitionMap], lengths: Sequence[int],
                difficulties: Sequence[float], n_seeds: int, success_tol: float, sigma2: float,
                s0, seed: int = 0) -> PhaseGrid:
    """
    Open-loop success rate per (chain length, planted lam) cell.

    A run succeeds at length N when ||delta_N||_2 <= success_tol. Each
    difficulty row shares one ensemble of ``n_seeds`` runs of the longest
    length, so a run's outcome at N is its prefix. Diverged runs count as
    failures and are tallied per cell.
    """
    if n_seeds < MIN_SEEDS_PER_CELL:
        raise ValueError(f"phase_sweep needs n_seeds >= {MIN_SEEDS_PER_CELL} per cell")
    lengths = sorted(int(n) for n in lengths)
    if not lengths or lengths[0] < 1:
        raise ValueError("lengths must be nonempty and >= 1")

    rates = np.zeros((len(lengths), len(difficulties)))
    diverged = np.zeros((len(lengths), len(difficulties)), dtype=int)
    n_star = []
    for j, lam in enumerate(difficulties):
        transition = map_factory(lam)
        noise = NoiseModel(sigma2, derive_seed(seed, j))
        run = simulate_ensemble(transition, s0, noise, lengths[-1], n_seeds)
        norms = run.norms()
        for i, n in enumerate(lengths):
            at_n = norms[:, n]
            lost = np.isnan(at_n)
            rates[i, j] = float(np.mean(~lost & (np.nan_to_num(at_n, nan=np.inf) <= success_tol)))
            diverged[i, j] = int(lost.sum())
        n_star.append(matched_horizon(lam, sigma2, transition.d, success_tol) if sigma2 > 0 else math.inf)
        logger.info(f"Phase row lam={lam:.4f}: N*={n_star[-1]:.2f}, diverged={int(diverged[-1, j])}")

    return PhaseGrid(lengths=lengths, difficulties=[float(v) for v in difficulties], success_rates=rates,
                     n_seeds=n_seeds, success_tol=success_tol, diverged=diverged, n_star=n_star)


def fifty_percent_length(lengths: Sequence[int], rates: Sequence[float]) -> Optional[float]:
    """Chain length where the success rate first falls through 0.5, interpolated"""
    if rates[0] < 0.5:
        return float(lengths[0])
    for i in range(1, len(rates)):
        if rates[i] < 0.5:
            n0, n1 = lengths[i - 1], lengths[i]
            r0, r1 = rates[i - 1], rates[i]
            return float(n0 + (r0 - 0.5) * (n1 - n0) / (r0 - r1))
    return None
