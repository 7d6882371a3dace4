"""Runtime anomaly scoring: discounted failure-profile aggregation and a consecutive-run trigger."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .diffcore import ConfigurationError
from .model import FailureProfile, Paad


class StreamError(ValueError):
    """Frames arrived out of timestamp order."""


@dataclass(frozen=True)
class MonitorConfig:
    gamma: float = 0.9
    threshold: float = 0.5
    consecutive_required: int = 3
    rate: float = 10.0         # Hz; sets the per-frame latency budget

    def __post_init__(self):
        if not (0.0 < self.gamma <= 1.0):
            raise ConfigurationError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not (0.0 < self.threshold < 1.0):
            raise ConfigurationError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.consecutive_required < 1:
            raise ConfigurationError("consecutive_required must be at least 1")
        if self.rate <= 0:
            raise ConfigurationError("rate must be positive")

    @property
    def budget_seconds(self) -> float:
        return 1.0 / self.rate

    def to_dict(self) -> dict:
        return dict(gamma=self.gamma, threshold=self.threshold,
                    consecutive_required=self.consecutive_required, rate=self.rate)


@dataclass(frozen=True)
class MonitorState:
    run: int = 0
    last_score: float = 0.0
    alerted: bool = False      # an alert has fired for the current run


@dataclass(frozen=True)
class MonitorEvent:
    timestamp: int
    score: float
    alert: bool

    def line(self) -> str:
        return f"{self.timestamp} {self.score:.6f} {int(self.alert)}"


@dataclass
class EventLog:
    events: list[MonitorEvent] = field(default_factory=list)
    latencies: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.events)

    @property
    def alerts(self) -> list[int]:
        return [e.timestamp for e in self.events if e.alert]

    def text(self) -> str:
        return "".join(e.line() + "\n" for e in self.events)


def discount_weights(horizon: int, gamma: float) -> np.ndarray:
    """Weights beta * gamma**k, k = 0..horizon-1, which sum to one."""
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if not (0.0 < gamma <= 1.0):
        raise ConfigurationError(f"gamma must lie in (0, 1], got {gamma}")
    w = np.power(float(gamma), np.arange(horizon, dtype=np.float64))
    return w / math.fsum(w)


def beta(horizon: int, gamma: float) -> float:
    """Normalizer 1 / sum_k gamma**k."""
    return 1.0 / math.fsum(float(gamma) ** k for k in range(horizon))


def anomaly_score(profile, gamma: float = 0.9) -> float:
    """Discounted, normalized combination of a failure profile; lies in [0, 1]."""
    if not (0.0 < gamma <= 1.0):
        raise ConfigurationError(f"gamma must lie in (0, 1], got {gamma}")
    p = np.asarray(profile.probabilities if isinstance(profile, FailureProfile) else profile,
                   dtype=np.float64).ravel()
    if p.size == 0:
        raise ValueError("empty failure profile")
    if np.any(~np.isfinite(p)) or np.any(p < 0) or np.any(p > 1):
        raise ValueError("failure profile entries must be probabilities")
    if np.all(p == 1.0):
        return 1.0
    s = float(np.dot(discount_weights(p.size, gamma), p))
    return min(max(s, 0.0), 1.0)


def step(state: MonitorState, score: float, cfg: MonitorConfig) -> tuple[MonitorState, bool]:
    """Advance the trigger by one score; alert exactly when the run reaches the required length."""
    if score > cfg.threshold:
        run = state.run + 1
        alert = run == cfg.consecutive_required
        return MonitorState(run, float(score), state.alerted or alert), alert
    return MonitorState(0, float(score), False), False


def trace_alerts(scores, cfg: MonitorConfig | None = None) -> list[bool]:
    cfg = cfg or MonitorConfig()
    state, out = MonitorState(), []
    for s in scores:
        state, a = step(state, s, cfg)
        out.append(a)
    return out


def process_stream(frames, model: Paad, cfg: MonitorConfig | None = None,
                   clock=time.perf_counter) -> EventLog:
    """predict -> anomaly_score -> step for each frame, in timestamp order."""
    cfg = cfg or MonitorConfig()
    log = EventLog()
    state = MonitorState()
    last_ts = None
    for frame in frames:
        if last_ts is not None and frame.timestamp <= last_ts:
            raise StreamError(f"timestamp {frame.timestamp} follows {last_ts}")
        last_ts = frame.timestamp
        t0 = clock()
        score = anomaly_score(model.predict(frame), cfg.gamma)
        state, alert = step(state, score, cfg)
        log.latencies.append(clock() - t0)
        log.events.append(MonitorEvent(frame.timestamp, score, alert))
    return log


@dataclass
class MonitorSummary:
    anomaly_windows: int
    detected: int
    false_detections: int
    alerts: int

    def text(self) -> str:
        return (f"anomaly_windows {self.anomaly_windows}\ndetected {self.detected}\n"
                f"false_detections {self.false_detections}\nalerts {self.alerts}\n")


def anomaly_windows(anomalous) -> list[tuple[int, int]]:
    """Maximal runs [start, end) of consecutive anomalous frames (by position)."""
    a = np.asarray(anomalous, dtype=bool)
    edges = np.diff(np.r_[0, a.astype(np.int8), 0])
    return list(zip(np.flatnonzero(edges == 1).tolist(), np.flatnonzero(edges == -1).tolist()))


def summarize(alerts, anomalous) -> MonitorSummary:
    """Count windows holding at least one alert and alerts that fall outside every window."""
    alerts = np.asarray(alerts, dtype=bool)
    anomalous = np.asarray(anomalous, dtype=bool)
    if alerts.shape != anomalous.shape:
        raise ValueError("alerts and anomaly flags differ in length")
    windows = anomaly_windows(anomalous)
    detected = sum(bool(alerts[s:e].any()) for s, e in windows)
    false = int(np.sum(alerts & ~anomalous))
    return MonitorSummary(len(windows), detected, false, int(alerts.sum()))

