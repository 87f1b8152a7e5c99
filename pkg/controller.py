"""
Halo controller
Closed loop over the reasoning dynamics: accumulate the observer's drift
estimates into an uncertainty score, switch to rectification when the
score reaches the stability threshold, and stop on finish, hard limit or
oscillation. Runs against the internal simulator or an external generator.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Union

import numpy as np
from sklearn.feature_extraction.text import TfidfVectorizer
from sklearn.metrics.pairwise import cosine_similarity

from adapter_protocol import AdapterSession, AdapterTransportError
from dynamics import (OBSERVATION_STREAM, RECTIFIER_STREAM, EventType, NoiseModel, StateVector, Trajectory,
                      TransitionMap, _advance, _as_array, DimensionMismatchError)
from observer import (DEFAULT_CONTEXT_LEN, ObserverCalibration, drift_proxy, entropy_for_rate,
                      mean_attention_entropy, synth_attention)

logger = logging.getLogger(__name__)

HARD_LIMIT_FACTOR = 1.25


class Regime(str, Enum):
    STABLE = "stable"
    CRITICAL = "critical"


class RunStatus(str, Enum):
    RUNNING = "running"
    FINISHED = "finished"
    TERMINATED_HARD_LIMIT = "terminated_hard_limit"
    TERMINATED_OSCILLATION = "terminated_oscillation"
    TERMINATED_TRANSPORT_ERROR = "terminated_transport_error"


class RectifierMode(str, Enum):
    FULL_RESET = "full_reset"
    PARTIAL = "partial"


@dataclass(frozen=True)
class ControllerConfig:
    """
    Switching-law settings.

    Args:
        psi: stability threshold; math.inf disables rectification
        floor_at_zero: clamp the accumulated uncertainty at 0
        max_steps: dynamics steps after which the run finishes
        osc_window: resets without progress before terminating
        progress_tol: smallest anchor displacement counting as progress
        hard_limit: cap on total events (steps plus resets); defaults to
            ceil(1.25 * max_steps)
    """

    psi: float
    floor_at_zero: bool = True
    max_steps: int = 100
    osc_window: int = 3
    progress_tol: float = 1e-9
    hard_limit: Optional[int] = None

    def __post_init__(self):
        if not self.psi > 0:
            raise ValueError("psi must be > 0")
        if self.osc_window < 1:
            raise ValueError("osc_window must be >= 1")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.progress_tol < 0:
            raise ValueError("progress_tol must be >= 0")
        if self.hard_limit is not None and self.hard_limit < self.max_steps:
            raise ValueError("hard_limit must be >= max_steps")

    @property
    def event_limit(self) -> int:
        if self.hard_limit is not None:
            return self.hard_limit
        return int(math.ceil(HARD_LIMIT_FACTOR * self.max_steps))


@dataclass(frozen=True)
class RectifierSpec:
    """
    Compress-and-reset actuator.

    ``epsilon`` is the fraction of the current error kept by a partial
    reset. Errors larger than ``recoverable_radius`` are irreversible and
    survive the reset untouched.

    ``compression_sigma2`` is the per-coordinate variance lost by each
    compression. The losses compound: every anchor summarises the previous
    one, so after k resets the landing point sits N(0, k * compression_sigma2 I)
    away from the ideal state. Frequent resets therefore cost accuracy.
    """

    epsilon: float = 0.0
    mode: RectifierMode = RectifierMode.FULL_RESET
    recoverable_radius: float = math.inf
    compression_sigma2: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "mode", RectifierMode(self.mode))
        if not 0 <= self.epsilon < 1:
            raise ValueError("epsilon must lie in [0, 1)")
        if not self.recoverable_radius > 0:
            raise ValueError("recoverable_radius must be > 0")
        if not 0 <= self.compression_sigma2 < math.inf:
            raise ValueError("compression_sigma2 must be finite and >= 0")

    @property
    def retained(self) -> float:
        return 0.0 if self.mode is RectifierMode.FULL_RESET else self.epsilon


@dataclass(frozen=True)
class ResetRecord:
    event: int
    step: int
    anchor: Union[np.ndarray, str, None] = None
    anchor_summary: Optional[str] = None
    delta_norm: Optional[float] = None
    recovered: bool = True
    discarded_events: int = 0


@dataclass
class ControllerState:
    omega: float = 0.0
    step: int = 0
    resets: List[ResetRecord] = field(default_factory=list)
    status: RunStatus = RunStatus.RUNNING
    history_start: int = 0
    anchor_offset: Optional[np.ndarray] = None


def update_uncertainty(omega: float, drift: float, cfg: ControllerConfig) -> float:
    """Omega_t = Omega_{t-1} + drift, floored at 0 when configured"""
    total = omega + drift
    return max(total, 0.0) if cfg.floor_at_zero else total


def check_stability(omega: float, psi: float) -> Regime:
    return Regime.CRITICAL if omega >= psi else Regime.STABLE


@dataclass
class RectifyOutcome:
    new_state: StateVector
    controller: ControllerState
    recovered: bool


def rectify(traj: Trajectory, spec: RectifierSpec, state: ControllerState,
            entropy: Optional[float] = None, drift: Optional[float] = None,
            rng: Optional[np.random.Generator] = None) -> RectifyOutcome:
    """
    Project the current state onto the ideal trajectory.

    The new state is S* + epsilon * delta (S* for a full reset), shifted by
    the accumulated compression loss when ``spec.compression_sigma2`` > 0;
    ``rng`` supplies that loss. A reset event with Omega = 0 is appended to
    ``traj``; the ideal trajectory does not advance. Events since the
    previous anchor are marked discarded.
    """
    s = np.asarray(traj.states[-1], dtype=float)
    ideal = np.asarray(traj.ideal_states[-1], dtype=float)
    delta = s - ideal
    delta_norm = float(np.linalg.norm(delta))
    recovered = delta_norm <= spec.recoverable_radius
    offset = state.anchor_offset
    if recovered:
        new = ideal + spec.retained * delta
        if spec.compression_sigma2 > 0:
            if rng is None:
                raise ValueError("compression loss needs a rectifier generator")
            loss = math.sqrt(spec.compression_sigma2) * rng.standard_normal(new.shape)
            offset = loss if offset is None else offset + loss
        if offset is not None:
            new = new + offset
    else:
        new = s
        logger.debug(f"Error {delta_norm:.3f} beyond recoverable radius; reset leaves the state unchanged")

    traj.append(new, ideal, EventType.RESET, entropy, drift, 0.0)
    record = ResetRecord(event=traj.n_events, step=traj.n_steps, anchor=new.copy(), delta_norm=delta_norm,
                         recovered=recovered, discarded_events=traj.n_events - 1 - state.history_start)
    controller = replace(state, omega=0.0, resets=state.resets + [record], history_start=traj.n_events,
                         anchor_offset=offset)
    return RectifyOutcome(StateVector(new), controller, recovered)


def anchor_displacement(a, b) -> float:
    """
    Progress between two anchors.

    State anchors use the Euclidean distance; text anchors use
    1 - cosine similarity of their TF-IDF vectors.
    """
    if isinstance(a, str) or isinstance(b, str):
        a, b = str(a), str(b)
        if a == b:
            return 0.0
        try:
            tfidf = TfidfVectorizer().fit_transform([a, b])
        except ValueError:
            return 1.0
        return float(1.0 - cosine_similarity(tfidf[0], tfidf[1])[0, 0])
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Anchor shapes differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def detect_oscillation(state: ControllerState, cfg: ControllerConfig) -> bool:
    """True when the last ``osc_window`` resets made no progress between their anchors"""
    if len(state.resets) < cfg.osc_window:
        return False
    window = state.resets[-cfg.osc_window:]
    return all(anchor_displacement(prev.anchor, cur.anchor) < cfg.progress_tol
               for prev, cur in zip(window, window[1:]))


def _terminate(traj: Trajectory, state: ControllerState, status: RunStatus):
    """Close a stopped run with a terminate record holding the last state"""
    state.status = status
    traj.append(traj.states[-1], traj.ideal_states[-1], EventType.TERMINATE, omega=state.omega)


def run_halo(transition: TransitionMap, s0, noise: NoiseModel, cal: ObserverCalibration,
             cfg: ControllerConfig, spec: Optional[RectifierSpec] = None, obs_noise: float = 0.0,
             context_len: int = DEFAULT_CONTEXT_LEN,
             generator_cal: Optional[ObserverCalibration] = None) -> Trajectory:
    """
    Closed-loop run over the internal simulator.

    Per event: observe the local expansion rate through synthetic attention,
    turn the mean entropy into a drift estimate, accumulate it, and either
    rectify (critical) or take one dynamics step (stable). Dynamics and
    observation noise come from separate streams of ``noise.seed``, so with
    psi = inf the state sequence equals simulate_open_loop's. Attention is
    synthesized with ``generator_cal`` (default ``cal``) and read back with
    ``cal``, so a mis-calibrated proxy can be studied.

    Raises:
        DivergenceError: when the state leaves the finite reals
    """
    spec = spec or RectifierSpec()
    generator_cal = generator_cal or cal
    s = _as_array(s0).copy()
    if s.size != transition.d:
        raise DimensionMismatchError(f"s0 dimension {s.size} does not match map dimension {transition.d}")
    ideal = s.copy()
    dyn_rng = noise.generator()
    obs_rng = noise.with_stream(OBSERVATION_STREAM).generator()
    rect_rng = noise.generator(RECTIFIER_STREAM)
    traj = Trajectory(s0=s.copy(), seeds={"dynamics": int(noise.seed), "observation": int(noise.seed),
                                          "rectifier": int(noise.seed)})
    state = ControllerState()
    h_max = math.log(context_len)
    clamped = False

    while True:
        if state.step >= cfg.max_steps:
            state.status = RunStatus.FINISHED
            break
        if traj.n_events >= cfg.event_limit:
            _terminate(traj, state, RunStatus.TERMINATED_HARD_LIMIT)
            break

        lam_true = transition.local_rate(s, state.step)
        if not clamped and entropy_for_rate(lam_true, generator_cal) > h_max:
            clamped = True
            logger.warning(f"Observation clamped at ln({context_len}) for local rate {lam_true:.4f}")
        frame = synth_attention(lam_true, generator_cal, obs_noise, rng=obs_rng, context_len=context_len,
                                saturate=True)
        entropy = mean_attention_entropy(frame)
        drift = drift_proxy(entropy, cal)
        state.omega = update_uncertainty(state.omega, drift, cfg)

        if check_stability(state.omega, cfg.psi) is Regime.CRITICAL:
            logger.debug(f"Event {traj.n_events + 1}: omega {state.omega:.4f} >= {cfg.psi}, rectifying")
            outcome = rectify(traj, spec, state, entropy, drift, rng=rect_rng)
            state = outcome.controller
            s = outcome.new_state.values.copy()
            if detect_oscillation(state, cfg):
                _terminate(traj, state, RunStatus.TERMINATED_OSCILLATION)
                logger.warning(f"Oscillation after {len(state.resets)} resets at step {state.step}")
                break
            continue

        s = _advance(transition, s, noise.draw(dyn_rng, transition.d), state.step)
        ideal = _advance(transition, ideal, 0.0, state.step)
        state.step += 1
        traj.append(s, ideal, EventType.STEP, entropy, drift, state.omega)

    traj.status = state.status.value
    return traj


def run_halo_external(session: AdapterSession, cal: ObserverCalibration, cfg: ControllerConfig,
                      template: str = "", reinit_template: str = "") -> Trajectory:
    """
    Closed loop over an external generator.

    Entropies arrive over the wire protocol; a critical check sends the
    rectify command carrying the compression ``template`` and the
    ``reinit_template`` used to resume from the anchor, and records the
    returned anchor.
    Transport failures end the run with status terminated_transport_error
    and the partial trajectory.
    """
    traj = Trajectory(s0=np.zeros(0))
    state = ControllerState()
    empty = np.zeros(0)

    try:
        while True:
            if state.step >= cfg.max_steps:
                state.status = RunStatus.FINISHED
                break
            if traj.n_events >= cfg.event_limit:
                _terminate(traj, state, RunStatus.TERMINATED_HARD_LIMIT)
                break
            message = session.next_step()
            if message.finished:
                state.status = RunStatus.FINISHED
                break
            drift = drift_proxy(message.entropy, cal)
            state.omega = update_uncertainty(state.omega, drift, cfg)

            if check_stability(state.omega, cfg.psi) is Regime.CRITICAL:
                summary = session.rectify(template, reinit_template)
                traj.append(empty, empty, EventType.RESET, message.entropy, drift, 0.0)
                traj.anchors.append(summary)
                record = ResetRecord(event=traj.n_events, step=state.step, anchor=summary, anchor_summary=summary,
                                     discarded_events=traj.n_events - 1 - state.history_start)
                state = replace(state, omega=0.0, resets=state.resets + [record], history_start=traj.n_events)
                logger.info(f"Reset {len(state.resets)} at event {traj.n_events}: {summary[:60]!r}")
                if detect_oscillation(state, cfg):
                    _terminate(traj, state, RunStatus.TERMINATED_OSCILLATION)
                    logger.warning(f"Oscillation after {len(state.resets)} resets")
                    break
                continue

            session.send_continue()
            state.step += 1
            traj.append(empty, empty, EventType.STEP, message.entropy, drift, state.omega)
    except AdapterTransportError as e:
        logger.error(f"Adapter failure after {traj.n_events} events: {e}")
        _terminate(traj, state, RunStatus.TERMINATED_TRANSPORT_ERROR)
        traj.error = f"{type(e).__name__}: {e}"

    traj.status = state.status.value
    return traj
