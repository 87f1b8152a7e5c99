"""
Reasoning-state dynamics
State space, transition-map families, noise model and open-loop simulation
for the residual update S_{t+1} = S_t + G(S_t, t) + xi_t
"""

import json
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.linalg import svdvals
from scipy.stats import ortho_group

logger = logging.getLogger(__name__)

DEFAULT_FD_STEP = 1e-5

# Spawn keys of the independent noise streams derived from one seed
DYNAMICS_STREAM = 0
OBSERVATION_STREAM = 1
RECTIFIER_STREAM = 2


class HaloError(Exception):
    """Base class for every error raised by the simulator and controller"""


class DimensionMismatchError(HaloError, ValueError):
    """A state, matrix or map disagrees on the state dimension"""


class DivergenceError(HaloError):
    """A simulated state left the finite reals"""

    def __init__(self, message, step=None, state_norm=None, n_diverged=None):
        super().__init__(message)
        self.step = step
        self.state_norm = state_norm
        self.n_diverged = n_diverged


class DegenerateDirectionError(HaloError):
    """The tangent vector of a Lyapunov estimate collapsed to zero"""


class MapFamily(str, Enum):
    LINEAR_RESIDUAL = "linear_residual"
    RANDOM_TANH_NET = "random_tanh_net"
    PIECEWISE_SWITCHED = "piecewise_switched"


class EventType(str, Enum):
    STEP = "step"
    RESET = "reset"
    TERMINATE = "terminate"


def _frozen(array):
    arr = np.array(array, dtype=float)
    arr.setflags(write=False)
    return arr


def _as_array(state):
    if isinstance(state, StateVector):
        return state.values
    return np.asarray(state, dtype=float).reshape(-1)


@dataclass(frozen=True, eq=False)
class StateVector:
    """Latent reasoning state S_t (dimensionless semantic coordinates)"""

    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float).reshape(-1)
        if arr.size < 1:
            raise ValueError("StateVector needs dimension d >= 1")
        if not np.all(np.isfinite(arr)):
            raise ValueError("StateVector entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def d(self) -> int:
        return int(self.values.size)

    def norm(self) -> float:
        return float(np.linalg.norm(self.values))

    def tolist(self) -> List[float]:
        return [float(v) for v in self.values]

    def __eq__(self, other):
        if not isinstance(other, StateVector):
            return NotImplemented
        return np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash(self.values.tobytes())

    def __len__(self):
        return self.d


class TransitionMap:
    """
    Update function G of the residual form S + G(S, t).

    Subclasses are deterministic given their parameters; all randomness
    lives in NoiseModel. Evaluation accepts a single state (d,) or a batch
    of states (n, d).
    """

    family: MapFamily = None

    def __init__(self, d: int):
        if d < 1:
            raise ValueError("State dimension d must be >= 1")
        self.d = int(d)

    def evaluate(self, state, t: int = 0) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, state, t: int = 0) -> np.ndarray:
        """Analytic Jacobian of G at ``state``, shape (d, d)"""
        raise NotImplementedError

    def transition_matrix(self, state, t: int = 0) -> np.ndarray:
        """Linearized one-step map I + J(S, t)"""
        return np.eye(self.d) + self.jacobian(state, t)

    def local_rate(self, state, t: int = 0) -> float:
        """Instantaneous expansion rate ln ||I + J(S, t)||_2"""
        top = svdvals(self.transition_matrix(state, t))[0]
        return math.log(top) if top > 0 else -math.inf

    def parameters(self) -> Dict:
        raise NotImplementedError

    def describe(self) -> Dict:
        return {"family": self.family.value, "d": self.d, "parameters": self.parameters()}

    def _check_state(self, state):
        arr = np.asarray(state, dtype=float)
        if arr.shape[-1] != self.d:
            raise DimensionMismatchError(
                f"State dimension {arr.shape[-1]} does not match map dimension {self.d}"
            )
        return arr


class LinearResidual(TransitionMap):
    """G(S) = J S, so the one-step transition is A = I + J"""

    family = MapFamily.LINEAR_RESIDUAL

    def __init__(self, J):
        J = np.atleast_2d(np.asarray(J, dtype=float))
        if J.shape[0] != J.shape[1]:
            raise DimensionMismatchError(f"J must be square, got {J.shape}")
        super().__init__(J.shape[0])
        self.J = _frozen(J)
        self.A = _frozen(np.eye(self.d) + J)
        top = svdvals(self.A)[0]
        self.rho = float(top)
        self._rate = math.log(top) if top > 0 else -math.inf

    @classmethod
    def scalar(cls, a: float) -> "LinearResidual":
        """Scalar system S_{t+1} = a S_t (+ noise)"""
        return cls([[a - 1.0]])

    @classmethod
    def from_transition(cls, A) -> "LinearResidual":
        A = np.atleast_2d(np.asarray(A, dtype=float))
        return cls(A - np.eye(A.shape[0]))

    @classmethod
    def planted(cls, d: int, rho: float, seed: Optional[int] = None) -> "LinearResidual":
        """
        Planted map with A = rho * Q, Q a random orthogonal matrix.

        ||A^n||_2 = rho^n exactly and isotropic noise stays isotropic, so
        the covariance recursion has a closed form in every dimension.
        """
        if rho <= 0:
            raise ValueError("rho_plant must be > 0")
        if d == 1:
            Q = np.ones((1, 1))
        else:
            Q = ortho_group.rvs(dim=d, random_state=seed)
        return cls.from_transition(rho * Q)

    def evaluate(self, state, t: int = 0) -> np.ndarray:
        arr = self._check_state(state)
        return arr @ self.J.T

    def jacobian(self, state=None, t: int = 0) -> np.ndarray:
        return np.array(self.J)

    def transition_matrix(self, state=None, t: int = 0) -> np.ndarray:
        return np.array(self.A)

    def local_rate(self, state=None, t: int = 0) -> float:
        return self._rate

    def parameters(self) -> Dict:
        return {"J": self.J.tolist(), "rho_plant": self.rho}


class RandomTanhNet(TransitionMap):
    """
    Smooth residual block G(S) = V tanh(W S + b).

    Lipschitz by construction: ||W||_2 and ||V||_2 are clipped to
    sqrt(lipschitz), and tanh is 1-Lipschitz.
    """

    family = MapFamily.RANDOM_TANH_NET

    def __init__(self, W, V, b=None):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if V.shape != (W.shape[1], W.shape[0]):
            raise DimensionMismatchError(f"V shape {V.shape} incompatible with W shape {W.shape}")
        super().__init__(W.shape[1])
        self.W = _frozen(W)
        self.V = _frozen(V)
        self.b = _frozen(np.zeros(W.shape[0]) if b is None else b)
        self.lipschitz = float(svdvals(self.W)[0] * svdvals(self.V)[0])

    @classmethod
    def create(cls, d: int, hidden: int = 16, lipschitz: float = 1.0, seed: Optional[int] = None,
               bias_scale: float = 0.0) -> "RandomTanhNet":
        rng = np.random.default_rng(seed)
        W = rng.standard_normal((hidden, d)) / math.sqrt(d)
        V = rng.standard_normal((d, hidden)) / math.sqrt(hidden)
        b = bias_scale * rng.standard_normal(hidden)
        cap = math.sqrt(lipschitz)
        W = W * min(1.0, cap / svdvals(W)[0])
        V = V * min(1.0, cap / svdvals(V)[0])
        return cls(W, V, b)

    def evaluate(self, state, t: int = 0) -> np.ndarray:
        arr = self._check_state(state)
        return np.tanh(arr @ self.W.T + self.b) @ self.V.T

    def jacobian(self, state, t: int = 0) -> np.ndarray:
        arr = self._check_state(state).reshape(-1)
        slope = 1.0 - np.tanh(self.W @ arr + self.b) ** 2
        return self.V @ (slope[:, None] * self.W)

    def parameters(self) -> Dict:
        return {"W": self.W.tolist(), "V": self.V.tolist(), "b": self.b.tolist(),
                "lipschitz": self.lipschitz}


class PiecewiseSwitched(TransitionMap):
    """
    Non-autonomous map cycling through autonomous regimes.

    Regime k is active for ``durations[k]`` consecutive steps; the schedule
    repeats with period sum(durations).
    """

    family = MapFamily.PIECEWISE_SWITCHED

    def __init__(self, regimes: Sequence[TransitionMap], durations: Sequence[int]):
        if not regimes or len(regimes) != len(durations):
            raise ValueError("Need one duration per regime")
        if any(int(n) < 1 for n in durations):
            raise ValueError("Regime durations must be >= 1")
        d = regimes[0].d
        if any(r.d != d for r in regimes):
            raise DimensionMismatchError("All regimes must share the state dimension")
        super().__init__(d)
        self.regimes = tuple(regimes)
        self.durations = tuple(int(n) for n in durations)
        self._bounds = np.cumsum(self.durations)
        self.period = int(self._bounds[-1])

    @classmethod
    def alternating(cls, transitions: Sequence, duration: int = 1) -> "PiecewiseSwitched":
        """Linear regimes given by their one-step matrices (scalars allowed)"""
        regimes = [LinearResidual.from_transition(np.atleast_2d(A)) for A in transitions]
        return cls(regimes, [duration] * len(regimes))

    def regime(self, t: int) -> TransitionMap:
        phase = int(t) % self.period
        return self.regimes[int(np.searchsorted(self._bounds, phase, side="right"))]

    def evaluate(self, state, t: int = 0) -> np.ndarray:
        return self.regime(t).evaluate(state, t)

    def jacobian(self, state, t: int = 0) -> np.ndarray:
        return self.regime(t).jacobian(state, t)

    def local_rate(self, state, t: int = 0) -> float:
        return self.regime(t).local_rate(state, t)

    def parameters(self) -> Dict:
        return {"durations": list(self.durations),
                "regimes": [r.describe() for r in self.regimes]}


def build_map(family: str, d: int, rho_plant: Optional[float] = None, seed: Optional[int] = None,
              hidden: int = 16, lipschitz: float = 1.0, schedule: Optional[List[float]] = None,
              duration: int = 1) -> TransitionMap:
    """Construct a transition map from flat experiment parameters"""
    family = MapFamily(family)
    if family is MapFamily.LINEAR_RESIDUAL:
        return LinearResidual.planted(d, rho_plant, seed=seed)
    if family is MapFamily.RANDOM_TANH_NET:
        return RandomTanhNet.create(d, hidden=hidden, lipschitz=lipschitz, seed=seed)
    rates = schedule or [rho_plant, 1.0 / rho_plant]
    regimes = [LinearResidual.planted(d, r, seed=seed) for r in rates]
    return PiecewiseSwitched(regimes, [duration] * len(regimes))


@dataclass(frozen=True)
class SystemSpec:
    """Flat description of a simulated system, as read from an experiment config"""

    family: str = MapFamily.LINEAR_RESIDUAL.value
    d: int = 8
    lambda_plant: Optional[float] = 0.1
    rho_plant: Optional[float] = None
    sigma2: float = 0.01
    hidden: int = 16
    lipschitz: float = 1.0
    schedule: Optional[tuple] = None
    duration: int = 1
    map_seed: int = 7
    s0: Optional[tuple] = None

    @property
    def rho(self) -> float:
        return self.rho_plant if self.rho_plant is not None else math.exp(self.lambda_plant)

    @property
    def lam(self) -> float:
        return math.log(self.rho)

    def build(self, lam: Optional[float] = None) -> TransitionMap:
        """The configured map, or a copy re-planted at Lyapunov exponent ``lam``"""
        rho = self.rho if lam is None else math.exp(lam)
        lipschitz = self.lipschitz if lam is None else max(math.expm1(lam), 1e-6)
        return build_map(self.family, self.d, rho_plant=rho, seed=self.map_seed, hidden=self.hidden,
                         lipschitz=lipschitz, schedule=list(self.schedule) if self.schedule else None,
                         duration=self.duration)

    def initial_state(self) -> np.ndarray:
        if self.s0 is not None:
            return np.array(self.s0, dtype=float)
        return np.ones(self.d) / math.sqrt(self.d)

    def noise(self, seed: int) -> "NoiseModel":
        return NoiseModel(self.sigma2, seed)


def derive_seed(base_seed: int, index: int) -> int:
    """Deterministic, order-independent child seed for sample ``index``"""
    seq = np.random.SeedSequence(int(base_seed), spawn_key=(int(index),))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class NoiseModel:
    """
    Isotropic Gaussian noise xi ~ N(0, sigma2 I) with seeded streams.

    ``generator`` opens a stream at its start; ``stream_rng`` hands out the
    generator this model owns for a stream, which advances across calls.
    """

    sigma2: float
    seed: int = 0
    stream: int = DYNAMICS_STREAM
    _owned: Dict[int, np.random.Generator] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.sigma2 < 0 or not math.isfinite(self.sigma2):
            raise ValueError("sigma2 must be finite and >= 0")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def generator(self, stream: Optional[int] = None) -> np.random.Generator:
        """Fresh generator positioned at the start of ``stream`` (default: this model's)"""
        key = self.stream if stream is None else stream
        seq = np.random.SeedSequence(int(self.seed), spawn_key=(int(key),))
        return np.random.Generator(np.random.PCG64(seq))

    def stream_rng(self, stream: Optional[int] = None) -> np.random.Generator:
        key = int(self.stream if stream is None else stream)
        if key not in self._owned:
            self._owned[key] = self.generator(key)
        return self._owned[key]

    def with_stream(self, stream: int, sigma2: Optional[float] = None) -> "NoiseModel":
        return NoiseModel(self.sigma2 if sigma2 is None else sigma2, self.seed, stream)

    def draw(self, rng: np.random.Generator, d: int) -> np.ndarray:
        """Exactly ``d`` standard-normal draws, scaled by sigma"""
        return math.sqrt(self.sigma2) * rng.standard_normal(d)


@dataclass
class StepRecord:
    state: np.ndarray
    ideal: np.ndarray
    event: EventType = EventType.STEP
    entropy: Optional[float] = None
    drift: Optional[float] = None
    omega: Optional[float] = None

    def to_dict(self) -> Dict:
        return {
            "state": [float(v) for v in self.state],
            "ideal": [float(v) for v in self.ideal],
            "entropy": self.entropy,
            "drift": self.drift,
            "omega": self.omega,
            "event": self.event.value,
        }


@dataclass
class Trajectory:
    """
    Recorded evolution of one run.

    ``states`` and ``ideal_states`` hold S_0 followed by the state after
    every event; reset events do not advance the ideal trajectory.
    """

    s0: np.ndarray
    seeds: Dict[str, int] = field(default_factory=dict)
    records: List[StepRecord] = field(default_factory=list)
    status: str = "finished"
    error: Optional[str] = None
    anchors: List[str] = field(default_factory=list)

    @property
    def d(self) -> int:
        return int(np.asarray(self.s0).size)

    @property
    def states(self) -> List[np.ndarray]:
        return [np.asarray(self.s0)] + [r.state for r in self.records]

    @property
    def ideal_states(self) -> List[np.ndarray]:
        return [np.asarray(self.s0)] + [r.ideal for r in self.records]

    @property
    def per_step(self) -> List[StepRecord]:
        return self.records

    def append(self, state, ideal, event=EventType.STEP, entropy=None, drift=None, omega=None):
        self.records.append(StepRecord(
            state=np.array(state, dtype=float),
            ideal=np.array(ideal, dtype=float),
            event=EventType(event),
            entropy=None if entropy is None else float(entropy),
            drift=None if drift is None else float(drift),
            omega=None if omega is None else float(omega),
        ))

    @property
    def n_steps(self) -> int:
        """Executed dynamics steps"""
        return sum(1 for r in self.records if r.event is EventType.STEP)

    @property
    def n_resets(self) -> int:
        return sum(1 for r in self.records if r.event is EventType.RESET)

    @property
    def n_events(self) -> int:
        """Dynamics steps plus resets; a closing terminate marker is not counted"""
        return sum(1 for r in self.records if r.event is not EventType.TERMINATE)

    def deviations(self) -> np.ndarray:
        """delta_t = S_t - S_t*, shape (records + 1, d)"""
        if not self.records:
            return np.zeros((1, self.d))
        return np.vstack(self.states) - np.vstack(self.ideal_states)

    def deviation_norms(self) -> np.ndarray:
        return np.linalg.norm(self.deviations(), axis=1)

    def final_error(self) -> float:
        return float(self.deviation_norms()[-1])

    def omegas(self) -> np.ndarray:
        return np.array([np.nan if r.omega is None else r.omega for r in self.records])

    def to_dict(self) -> Dict:
        return {
            "d": self.d,
            "seeds": dict(self.seeds),
            "status": self.status,
            "error": self.error,
            "s0": [float(v) for v in np.asarray(self.s0)],
            "anchors": list(self.anchors),
            "steps": [r.to_dict() for r in self.records],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: Dict) -> "Trajectory":
        traj = cls(s0=np.array(data["s0"], dtype=float), seeds=dict(data.get("seeds", {})),
                   status=data.get("status", "finished"), error=data.get("error"),
                   anchors=list(data.get("anchors", [])))
        for rec in data.get("steps", []):
            traj.append(rec["state"], rec["ideal"], rec["event"], rec.get("entropy"),
                        rec.get("drift"), rec.get("omega"))
        return traj

    def to_frame(self) -> pd.DataFrame:
        """One row per executed event"""
        norms = self.deviation_norms()[1:]
        rows = []
        for i, rec in enumerate(self.records):
            row = {"step": i + 1, "event": rec.event.value, "entropy": rec.entropy,
                   "drift": rec.drift, "omega": rec.omega, "delta_norm": float(norms[i])}
            for k, v in enumerate(rec.state):
                row[f"s{k}"] = float(v)
            rows.append(row)
        return pd.DataFrame(rows)


def _advance(transition: TransitionMap, s: np.ndarray, xi: np.ndarray, t: int) -> np.ndarray:
    nxt = s + transition.evaluate(s, t) + xi
    if not np.all(np.isfinite(nxt)):
        norm = float(np.linalg.norm(s))
        raise DivergenceError(f"State diverged at step {t} (norm before step {norm:.3e})",
                              step=t, state_norm=norm)
    return nxt


def step(transition: TransitionMap, state, noise: NoiseModel,
         rng: Optional[np.random.Generator] = None, t: int = 0) -> StateVector:
    """
    One residual transition S + G(S, t) + xi.

    Args:
        transition: map G
        state: current state S_t
        noise: noise model; its owned stream advances when ``rng`` is None
        rng: generator to draw from (consumes exactly d draws)
        t: step index, only used by non-autonomous maps

    Returns:
        StateVector: S_{t+1}
    """
    s = _as_array(state)
    if s.size != transition.d:
        raise DimensionMismatchError(f"State dimension {s.size} does not match map dimension {transition.d}")
    if rng is None:
        rng = noise.stream_rng()
    xi = noise.draw(rng, transition.d)
    return StateVector(_advance(transition, s, xi, t))


def simulate_open_loop(transition: TransitionMap, s0, noise: NoiseModel, n_steps: int) -> Trajectory:
    """Run ``n_steps`` noisy transitions alongside the noiseless ideal run"""
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    s = _as_array(s0).copy()
    if s.size != transition.d:
        raise DimensionMismatchError(f"s0 dimension {s.size} does not match map dimension {transition.d}")
    ideal = s.copy()
    rng = noise.generator()
    traj = Trajectory(s0=s.copy(), seeds={"dynamics": int(noise.seed)})
    for t in range(n_steps):
        s = _advance(transition, s, noise.draw(rng, transition.d), t)
        ideal = _advance(transition, ideal, 0.0, t)
        traj.append(s, ideal)
    return traj


@dataclass
class EnsembleRun:
    """Deviations of many independently seeded open-loop runs"""

    deviations: np.ndarray  # (n_samples, n_steps + 1, d)
    diverged: np.ndarray  # (n_samples,) bool
    seeds: List[int]

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())

    def norms(self) -> np.ndarray:
        """||delta_t||_2 per sample and step; NaN for diverged samples"""
        return np.linalg.norm(self.deviations, axis=2)


def simulate_ensemble(transition: TransitionMap, s0, noise: NoiseModel, n_steps: int,
                      n_samples: int) -> EnsembleRun:
    """
    Vectorized open-loop runs; sample i uses seed derive_seed(noise.seed, i).

    Diverged samples are flagged, not raised, so callers decide how to count
    them.
    """
    if n_steps < 1 or n_samples < 1:
        raise ValueError("n_steps and n_samples must be >= 1")
    s0 = _as_array(s0)
    d = transition.d
    if s0.size != d:
        raise DimensionMismatchError(f"s0 dimension {s0.size} does not match map dimension {d}")

    seeds = [derive_seed(noise.seed, i) for i in range(n_samples)]
    scale = math.sqrt(noise.sigma2)
    draws = np.stack([NoiseModel(noise.sigma2, sd).generator().standard_normal((n_steps, d))
                      for sd in seeds])

    S = np.tile(s0, (n_samples, 1))
    ideal = s0.copy()
    deviations = np.zeros((n_samples, n_steps + 1, d))
    diverged = np.zeros(n_samples, dtype=bool)
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(n_steps):
            S = S + transition.evaluate(S, t) + scale * draws[:, t, :]
            ideal = _advance(transition, ideal, 0.0, t)
            bad = ~np.all(np.isfinite(S), axis=1)
            diverged |= bad
            S[diverged] = np.nan
            deviations[:, t + 1, :] = S - ideal

    if diverged.any():
        logger.warning(f"{int(diverged.sum())} of {n_samples} ensemble samples diverged")
    return EnsembleRun(deviations=deviations, diverged=diverged, seeds=seeds)


def jacobian_fd(transition: TransitionMap, state, h: float = DEFAULT_FD_STEP, t: int = 0) -> np.ndarray:
    """Central-difference Jacobian of G at ``state``"""
    if h <= 0:
        raise ValueError("Finite-difference step h must be > 0")
    s = _as_array(state)
    offsets = h * np.eye(transition.d)
    plus = transition.evaluate(s + offsets, t)
    minus = transition.evaluate(s - offsets, t)
    J = (plus - minus).T / (2.0 * h)
    if not np.all(np.isfinite(J)):
        raise DivergenceError("Non-finite map evaluation in finite differences", step=t,
                              state_norm=float(np.linalg.norm(s)))
    return J


@dataclass(frozen=True)
class SpectralNormEstimate:
    value: float
    converged: bool
    iterations: int

    def __float__(self):
        return self.value


def spectral_norm(matrix, iters: int = 2000, tol: float = 1e-13) -> SpectralNormEstimate:
    """
    Largest singular value by power iteration on M^T M.

    Returns the best estimate with ``converged=False`` when the relative
    change never dropped below ``tol`` within ``iters`` iterations.
    """
    M = np.atleast_2d(np.asarray(matrix, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise DimensionMismatchError(f"spectral_norm expects a square matrix, got {M.shape}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.any(M):
        return SpectralNormEstimate(0.0, True, 0)

    v = np.random.default_rng(0).standard_normal(M.shape[1])
    v /= np.linalg.norm(v)
    sigma = 0.0
    for k in range(1, iters + 1):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return SpectralNormEstimate(0.0, True, k)
        v = w / nw
        new_sigma = float(np.linalg.norm(M @ v))
        if abs(new_sigma - sigma) <= tol * max(new_sigma, 1.0):
            return SpectralNormEstimate(new_sigma, True, k)
        sigma = new_sigma
    logger.warning(f"Power iteration did not converge in {iters} iterations (estimate {sigma:.6g})")
    return SpectralNormEstimate(sigma, False, iters)


def lyapunov_estimate(transition: TransitionMap, s0, noise: NoiseModel, n_steps: int,
                      u0=None) -> float:
    """
    Finite-time largest Lyapunov exponent by the tangent method.

    The tangent vector is pushed through I + J_t along the noisy trajectory
    and renormalized every step; the exponent is the mean log stretch.
    """
    if n_steps < 10:
        raise ValueError("lyapunov_estimate needs n_steps >= 10")
    s = _as_array(s0).copy()
    d = transition.d
    u = np.ones(d) / math.sqrt(d) if u0 is None else np.asarray(u0, dtype=float)
    norm_u = np.linalg.norm(u)
    if norm_u == 0:
        raise DegenerateDirectionError("Initial tangent vector has zero norm")
    u = u / norm_u
    rng = noise.generator()
    total = 0.0
    for t in range(n_steps):
        w = transition.transition_matrix(s, t) @ u
        stretch = float(np.linalg.norm(w))
        if stretch == 0.0 or not math.isfinite(stretch):
            raise DegenerateDirectionError(f"Tangent vector degenerate at step {t}")
        total += math.log(stretch)
        u = w / stretch
        s = _advance(transition, s, noise.draw(rng, d), t)
    return total / n_steps
