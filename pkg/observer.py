"""
Entropy observer
Attention entropy, the linear drift proxy lambda_hat = beta + alpha * H,
a synthetic attention generator that inverts the proxy, and the logistic
calibration that recovers (alpha, beta) from labelled entropy samples.
All entropies are in nats.
"""

import logging
import math
import warnings
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from scipy.special import softmax
from scipy.stats import entropy as scipy_entropy
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.metrics import log_loss

from dynamics import (OBSERVATION_STREAM, HaloError, NoiseModel, TransitionMap, derive_seed,
                      simulate_open_loop)

logger = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.85
DEFAULT_BETA = -2.5
ROW_SUM_TOL = 1e-9
DEFAULT_CONTEXT_LEN = 64
DEFAULT_LAYERS = 4
_DEFAULT_NOISE = NoiseModel(0.0)
DEFAULT_HEADS = 4


class ObserverValidationError(HaloError, ValueError):
    """An attention row is not a probability vector"""

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class ObserverFeasibilityError(HaloError):
    """A target entropy cannot be realised over the given context length"""


class CalibrationError(HaloError):
    """Logistic calibration failed; carries the last iterate"""

    def __init__(self, message, coef=None, intercept=None, loss=None):
        super().__init__(message)
        self.coef = coef
        self.intercept = intercept
        self.loss = loss


def validate_distribution(p) -> np.ndarray:
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.size == 0:
        raise ObserverValidationError("Empty probability vector")
    bad = np.flatnonzero(~np.isfinite(p) | (p < 0))
    if bad.size:
        raise ObserverValidationError(f"Invalid probability {p[bad[0]]!r} at index {bad[0]}", index=int(bad[0]))
    total = p.sum()
    if abs(total - 1.0) > ROW_SUM_TOL:
        raise ObserverValidationError(f"Probabilities sum to {total!r}, not 1", index=None)
    return p


@dataclass(frozen=True, eq=False)
class AttentionFrame:
    """Attention rows over context positions, one per (layer, head)"""

    rows: np.ndarray
    layer_count: int
    head_count: int

    def __post_init__(self):
        rows = np.atleast_2d(np.array(self.rows, dtype=float))
        if rows.shape[0] != self.layer_count * self.head_count:
            raise ObserverValidationError(
                f"Expected {self.layer_count * self.head_count} rows, got {rows.shape[0]}")
        for i, row in enumerate(rows):
            try:
                validate_distribution(row)
            except ObserverValidationError as e:
                raise ObserverValidationError(f"Row {i}: {e}", index=e.index) from e
        rows.setflags(write=False)
        object.__setattr__(self, "rows", rows)

    @property
    def context_len(self) -> int:
        return int(self.rows.shape[1])


def shannon_entropy(p) -> float:
    """-sum p_i ln p_i with 0 ln 0 = 0"""
    return float(scipy_entropy(validate_distribution(p)))


def mean_attention_entropy(frame: AttentionFrame) -> float:
    """Equal-weight mean of the row entropies over layers and heads"""
    if frame.rows.size == 0 or frame.layer_count * frame.head_count == 0:
        raise ObserverValidationError("Empty attention frame")
    return float(np.mean(scipy_entropy(frame.rows, axis=1)))


@dataclass(frozen=True)
class CalibrationFit:
    n_samples: int
    log_loss: float
    boundary_entropy: float


@dataclass(frozen=True)
class ObserverCalibration:
    """
    Proxy coefficients: alpha (chaos gain, per nat) and beta (intrinsic
    restorative force).
    """

    alpha: float
    beta: float
    fit: Optional[CalibrationFit] = None

    def __post_init__(self):
        if not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite")
        if self.fit is None:
            boundary = -self.beta / self.alpha if self.alpha != 0 else math.nan
            object.__setattr__(self, "fit", CalibrationFit(0, 0.0, boundary))
        if self.fit.log_loss < 0:
            raise ValueError("log_loss must be >= 0")

    @classmethod
    def default(cls) -> "ObserverCalibration":
        return cls(DEFAULT_ALPHA, DEFAULT_BETA)

    @property
    def boundary_entropy(self) -> float:
        return self.fit.boundary_entropy

    def to_dict(self) -> Dict:
        return {"alpha": self.alpha, "beta": self.beta,
                "fit": {"n_samples": self.fit.n_samples, "log_loss": self.fit.log_loss,
                        "boundary_entropy": self.fit.boundary_entropy}}

    @classmethod
    def from_dict(cls, data: Dict) -> "ObserverCalibration":
        fit = data.get("fit")
        return cls(float(data["alpha"]), float(data["beta"]),
                   CalibrationFit(int(fit["n_samples"]), float(fit["log_loss"]),
                                  float(fit["boundary_entropy"])) if fit else None)


def drift_proxy(h_bar: float, cal: ObserverCalibration) -> float:
    """lambda_hat = beta + alpha * h_bar; negative values mean contraction"""
    if h_bar < 0:
        raise ValueError("Mean entropy must be >= 0")
    return cal.beta + cal.alpha * h_bar


def entropy_for_rate(lam: float, cal: ObserverCalibration) -> float:
    """Entropy at which the proxy reads ``lam`` (inverse of drift_proxy)"""
    if cal.alpha == 0:
        raise ObserverFeasibilityError("alpha = 0 makes the proxy non-invertible")
    return (lam - cal.beta) / cal.alpha


@lru_cache(maxsize=4096)
def _row_with_entropy(target: float, context_len: int) -> np.ndarray:
    """Softmax row over logits -i at the inverse temperature hitting ``target``"""
    h_max = math.log(context_len)
    if target <= 0.0:
        row = np.zeros(context_len)
        row[0] = 1.0
    elif target >= h_max:
        row = np.full(context_len, 1.0 / context_len)
    else:
        logits = -np.arange(context_len, dtype=float)

        def gap(inv_temp):
            return scipy_entropy(softmax(inv_temp * logits)) - target

        hi = 1.0
        while gap(hi) > 0:
            hi *= 2.0
            if hi > 1e6:
                raise ObserverFeasibilityError(f"Cannot reach entropy {target!r}")
        row = softmax(brentq(gap, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps) * logits)
    row.setflags(write=False)
    return row


def synth_attention(lambda_true: float, cal: ObserverCalibration, obs_noise: float,
                    noise: Optional[NoiseModel] = None, context_len: int = DEFAULT_CONTEXT_LEN,
                    rng: Optional[np.random.Generator] = None, layers: int = DEFAULT_LAYERS,
                    heads: int = DEFAULT_HEADS, saturate: bool = False) -> AttentionFrame:
    """
    Attention frame whose mean entropy reads ``lambda_true`` through the proxy.

    The target entropy (lambda_true - beta) / alpha + eps, eps ~ N(0,
    obs_noise^2), is clamped into [0, ln context_len]. Each row is a rolled
    copy of one temperature-scaled softmax row, so every row carries the
    target entropy. Exactly one normal draw is consumed per call.

    Raises:
        ObserverFeasibilityError: when context_len < 2, or when the noiseless
            target exceeds ln context_len and ``saturate`` is off
    """
    if context_len < 2:
        raise ObserverFeasibilityError("context_len must be >= 2")
    if rng is None:
        rng = (noise or _DEFAULT_NOISE).stream_rng(OBSERVATION_STREAM)
    eps = obs_noise * rng.standard_normal()
    h_max = math.log(context_len)
    raw = entropy_for_rate(lambda_true, cal)
    if raw > h_max and not saturate:
        raise ObserverFeasibilityError(
            f"Target entropy {raw:.4f} exceeds ln({context_len}) = {h_max:.4f}; context too short")
    target = min(max(raw + eps, 0.0), h_max)
    row = _row_with_entropy(float(target), int(context_len))
    n_rows = layers * heads
    rows = np.stack([np.roll(row, k) for k in range(n_rows)])
    return AttentionFrame(rows, layers, heads)


class DriftLabel(str, Enum):
    STABLE = "stable"
    UNSTABLE = "unstable"


@dataclass(frozen=True)
class DriftSample:
    entropy: float
    label: DriftLabel

    def __post_init__(self):
        if not self.entropy >= 0:
            raise ValueError("DriftSample entropy must be >= 0")
        object.__setattr__(self, "label", DriftLabel(self.label))


@dataclass(frozen=True)
class CalibrationConfig:
    """
    Logistic fit settings.

    ``l2`` is the ridge weight on the slope added to the summed log loss.
    The slope maps to alpha = w / logit_gain unless ``reference_alpha``
    pins it; the decision boundary is kept exact either way.
    """

    max_iters: int = 1000
    tol: float = 1e-8
    l2: float = 1e-4
    logit_gain: float = 1.0
    reference_alpha: Optional[float] = None

    def __post_init__(self):
        if self.max_iters < 1 or self.tol <= 0 or self.l2 <= 0 or self.logit_gain <= 0:
            raise ValueError("max_iters >= 1, tol > 0, l2 > 0 and logit_gain > 0 are required")


def calibrate(samples: Sequence[DriftSample], config: Optional[CalibrationConfig] = None) -> ObserverCalibration:
    """
    Fit P(unstable | H) = sigmoid(w H + b) and map it onto (alpha, beta).

    The boundary -b/w becomes the entropy at which the proxy reads zero.
    """
    config = config or CalibrationConfig()
    H = np.array([s.entropy for s in samples], dtype=float)
    y = np.array([1 if s.label is DriftLabel.UNSTABLE else 0 for s in samples])
    if H.size == 0 or np.unique(y).size < 2:
        raise CalibrationError("Calibration needs both stable and unstable samples")
    if not np.all(np.isfinite(H)):
        raise ValueError("Sample entropies must be finite")

    model = LogisticRegression(C=1.0 / config.l2, solver="lbfgs", max_iter=config.max_iters, tol=config.tol)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        model.fit(H.reshape(-1, 1), y)
    w = float(model.coef_[0, 0])
    b = float(model.intercept_[0])
    loss = float(log_loss(y, model.predict_proba(H.reshape(-1, 1))[:, 1], labels=[0, 1]))
    if any(issubclass(c.category, ConvergenceWarning) for c in caught):
        raise CalibrationError(f"Logistic fit did not converge in {config.max_iters} iterations "
                               f"(w={w:.4g}, b={b:.4g}, loss={loss:.4g})", coef=w, intercept=b, loss=loss)
    if w == 0.0:
        raise CalibrationError("Fitted slope is zero; entropy carries no stability signal",
                               coef=w, intercept=b, loss=loss)

    boundary = -b / w
    alpha = config.reference_alpha if config.reference_alpha is not None else w / config.logit_gain
    beta = -alpha * boundary
    logger.info(f"Calibrated alpha={alpha:.4f}, beta={beta:.4f}, boundary={boundary:.4f} nats "
                f"from {H.size} samples (log loss {loss:.4f})")
    return ObserverCalibration(alpha, beta, CalibrationFit(int(H.size), loss, boundary))


def planted_drift_samples(n: int, boundary: float = -DEFAULT_BETA / DEFAULT_ALPHA, label_noise: float = 0.05,
                          seed: int = 0, half_width: float = 1.5) -> List[DriftSample]:
    """
    Entropies uniform on boundary +/- half_width, labelled unstable above
    the planted boundary, each label flipped with probability ``label_noise``.
    """
    rng = np.random.default_rng(seed)
    low = max(boundary - half_width, 0.0)
    H = rng.uniform(low, boundary + half_width, size=n)
    unstable = H > boundary
    flip = rng.random(n) < label_noise
    unstable = unstable ^ flip
    return [DriftSample(float(h), DriftLabel.UNSTABLE if u else DriftLabel.STABLE)
            for h, u in zip(H, unstable)]


def collect_drift_samples(map_factory: Callable[[float], TransitionMap], rates: Sequence[float], s0,
                          sigma2: float, n_steps: int, collapse_tol: float, cal: ObserverCalibration,
                          obs_noise: float = 0.1, seed: int = 0,
                          context_len: int = DEFAULT_CONTEXT_LEN) -> List[DriftSample]:
    """
    Labelled samples from open-loop runs.

    Steps at or after the first step whose error exceeds ``collapse_tol``
    are labelled unstable; entropies come from the synthetic observer.
    """
    samples = []
    for j, lam in enumerate(rates):
        transition = map_factory(lam)
        noise = NoiseModel(sigma2, derive_seed(seed, j))
        traj = simulate_open_loop(transition, s0, noise, n_steps)
        obs_rng = noise.with_stream(OBSERVATION_STREAM).generator()
        norms = traj.deviation_norms()[1:]
        over = np.flatnonzero(norms > collapse_tol)
        collapse = int(over[0]) if over.size else n_steps
        for t, state in enumerate(traj.states[:-1]):
            frame = synth_attention(transition.local_rate(state, t), cal, obs_noise, rng=obs_rng,
                                    context_len=context_len, saturate=True)
            label = DriftLabel.UNSTABLE if t >= collapse else DriftLabel.STABLE
            samples.append(DriftSample(mean_attention_entropy(frame), label))
    logger.info(f"Collected {len(samples)} drift samples from {len(rates)} runs")
    return samples


def samples_to_frame(samples: Sequence[DriftSample]) -> pd.DataFrame:
    return pd.DataFrame({"entropy": [s.entropy for s in samples],
                         "label": [s.label.value for s in samples]})


def samples_from_frame(frame: pd.DataFrame) -> List[DriftSample]:
    return [DriftSample(float(h), DriftLabel(lbl)) for h, lbl in zip(frame["entropy"], frame["label"])]
