"""Pixel-to-spike front ends producing at most one spike per pixel."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .emulator import EventStream


@dataclass(frozen=True)
class LinearTtfsParams:
    T: float = 30.0
    dt: float = 1.0
    x_min: float = 0.0
    x_max: float = 1.0

    def __post_init__(self):
        if not self.x_max > self.x_min:
            raise ValueError("x_max > x_min violated")
        if abs(self.T / self.dt - round(self.T / self.dt)) > 1e-9:
            raise ValueError("T must be a multiple of dt")


@dataclass(frozen=True)
class CurrentTtfsParams:
    tau_en: float = 20.0
    theta_en: float = 0.32
    x_min: float = 0.1
    sigma_in: float = 0.003
    time_resolution: float = 0.008
    T: float = 64.0

    def __post_init__(self):
        if not self.tau_en > 0:
            raise ValueError("tau_en > 0 violated")
        if not self.theta_en > 0:
            raise ValueError("theta_en > 0 violated")
        if not self.time_resolution > 0:
            raise ValueError("time_resolution > 0 violated")


def linear_spike_times(x, p: LinearTtfsParams) -> np.ndarray:
    """Spike time per pixel, ``inf`` where no spike is emitted.

    Pixels outside ``[x_min, x_max]`` are clamped. A spike at exactly ``T``
    falls outside the trial and is suppressed.
    """
    x = np.clip(np.asarray(x, dtype=np.float64), p.x_min, p.x_max)
    n_steps = int(round(p.T / p.dt))
    t = (n_steps - np.rint(n_steps * (x - p.x_min) / (p.x_max - p.x_min))) * p.dt
    return np.where(t < p.T, t, np.inf)


def encode_linear(x: float, p: LinearTtfsParams) -> float | None:
    t = float(linear_spike_times(x, p))
    return t if np.isfinite(t) else None


def current_spike_times(x, p: CurrentTtfsParams) -> np.ndarray:
    """Closed-form threshold crossing of a LIF driven by ``x + x_min``,
    rounded to ``time_resolution``; ``inf`` where the drive stays below
    threshold."""
    drive = (np.asarray(x, dtype=np.float64) + p.x_min) * p.tau_en
    with np.errstate(divide="ignore", invalid="ignore"):
        t = p.tau_en * np.log(drive / (drive - p.theta_en))
    t = np.rint(t / p.time_resolution) * p.time_resolution
    return np.where(drive > p.theta_en, t, np.inf)


def encode_current(x: float, p: CurrentTtfsParams) -> float | None:
    t = float(current_spike_times(x, p))
    return t if np.isfinite(t) else None


def jitter(x, sigma: float, seed) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma >= 0 violated")
    x = np.asarray(x, dtype=np.float64)
    if sigma == 0:
        return x.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return x + rng.normal(0.0, sigma, size=x.shape)


def to_events(times: np.ndarray, duration: float) -> EventStream:
    """EventStream from a (batch, pixels) array of spike times."""
    times = np.asarray(times).reshape(len(times), -1)
    b, i = np.nonzero(np.isfinite(times) & (times < duration))
    return EventStream(times[b, i], i, duration, b, times.shape[0])


def encode_linear_batch(images, p: LinearTtfsParams) -> EventStream:
    images = np.asarray(images)
    return to_events(linear_spike_times(images.reshape(len(images), -1), p), p.T)


def encode_current_batch(images, p: CurrentTtfsParams, seed=None) -> EventStream:
    """Encode a batch; with ``seed`` given, pixels are jittered by
    ``sigma_in`` first."""
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    if seed is not None and p.sigma_in > 0:
        x = jitter(x, p.sigma_in, seed)
    return to_events(current_spike_times(x, p), p.T)


def spike_count_stats(events: EventStream, dt: float) -> tuple[float, float]:
    """Mean spike count per time bin, and the per-entry maximum bin count
    averaged over entries."""
    if events.batch_size < 1:
        raise ValueError("empty slice")
    bins = int(round(events.duration / dt))
    hist = np.zeros((events.batch_size, bins))
    np.add.at(hist, (events.batch, np.minimum(events.steps(dt), bins - 1)), 1)
    return float(hist.mean()), float(hist.max(axis=1).mean())
