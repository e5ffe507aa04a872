"""Percentage-differential transformer relay.

Phasors come from a one-cycle correlation against cos/sin at the nominal
frequency. At 1600 Hz / 60 Hz the cycle is 26.67 samples, so the window uses
the nearest integer count (27) and the correlation sums are corrected by the
inverse Gram matrix of the two reference waves; for an integer number of
samples per cycle this reduces to the classic full-cycle DFT.

Polarity: relay phasors are taken *into* the protected zone. Traces store
both sides in the through-current direction, so the output side is negated
when forming relay phasors and a healthy load flow sums to zero.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError
from .waveform import SignalTrace


@dataclass(frozen=True)
class Phasor:
    magnitude: float
    angle: float = 0.0

    def __post_init__(self):
        if self.magnitude < 0:
            raise ConfigError("phasor magnitude must be >= 0")

    @classmethod
    def from_complex(cls, z: complex) -> "Phasor":
        mag = abs(z)
        if mag == 0:
            return cls(0.0, 0.0)
        ang = cmath.phase(z)
        if ang <= -math.pi:
            ang += 2 * math.pi
        return cls(float(mag), float(ang))

    @property
    def complex(self) -> complex:
        return cmath.rect(self.magnitude, self.angle)


@dataclass(frozen=True)
class RelaySettings:
    pickup: float = 0.3
    slope: float = 0.25
    estimation_window: float | None = None  # seconds; None -> one nominal cycle
    trip_confirm_samples: int = 4

    def __post_init__(self):
        if self.pickup <= 0:
            raise ConfigError("pickup must be > 0")
        if not 0 < self.slope < 1:
            raise ConfigError("slope must be in (0, 1)")
        if self.trip_confirm_samples < 1:
            raise ConfigError("trip_confirm_samples must be >= 1")

    def window_samples(self, sampling_rate: float, frequency: float) -> int:
        period = 1.0 / frequency if self.estimation_window is None else self.estimation_window
        return max(2, int(round(period * sampling_rate)))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class RelayDecision:
    per_phase_trip: tuple[bool, bool, bool]
    trip_time: float | None
    differential: tuple[float, float, float]
    restraint: tuple[float, float, float]

    def __post_init__(self):
        if (self.trip_time is not None) != any(self.per_phase_trip):
            raise ConfigError("trip_time must be set iff some phase trips")

    @property
    def tripped(self) -> bool:
        return any(self.per_phase_trip)


@lru_cache(maxsize=32)
def _coefficients(n: int, sampling_rate: float, frequency: float) -> np.ndarray:
    """Complex weights c with phasor = c @ x for a window of n samples.

    Phasor angle is referenced to the first sample of the window.
    """
    w = 2 * np.pi * frequency / sampling_rate
    k = np.arange(n)
    basis = np.stack([np.cos(w * k), np.sin(w * k)])  # (2, n)
    gram = basis @ basis.T
    ab = np.linalg.solve(gram, basis)  # rows give a, b: x ~ a cos + b sin
    coef = ab[0] - 1j * ab[1]
    coef.setflags(write=False)
    return coef


def estimate_phasor(
    samples: Sequence[float], sampling_rate: float, frequency: float, n_window: int | None = None
) -> Phasor:
    """Fundamental phasor (peak magnitude) over the trailing cycle of ``samples``.

    The angle refers to the first sample of the trailing window.
    """
    x = np.asarray(samples, dtype=float)
    n = int(round(sampling_rate / frequency)) if n_window is None else n_window
    if x.size < n:
        raise DataError(f"need at least {n} samples for one period, got {x.size}")
    z = complex(_coefficients(n, float(sampling_rate), float(frequency)) @ x[-n:])
    return Phasor.from_complex(z)


def sliding_phasors(x: np.ndarray, sampling_rate: float, frequency: float, n: int) -> np.ndarray:
    """Complex phasors for every full window of ``x`` along axis 0.

    Row ``k`` uses samples ``k .. k+n-1`` and is referenced to absolute
    sample index 0, so phasors from different rows are comparable.
    """
    x = np.asarray(x, dtype=float)
    coef = _coefficients(n, float(sampling_rate), float(frequency))
    win = sliding_window_view(x, n, axis=0)  # (m, ..., n)
    z = win @ coef
    starts = np.arange(z.shape[0])
    rot = np.exp(-1j * 2 * np.pi * frequency * starts / sampling_rate)
    return z * rot.reshape((-1,) + (1,) * (z.ndim - 1))


def _characteristic(i_in: np.ndarray, i_out: np.ndarray, s: RelaySettings):
    diff = np.abs(i_in + i_out)
    rest = (np.abs(i_in) + np.abs(i_out)) / 2
    return diff, rest, diff > np.maximum(s.pickup, s.slope * rest)


def differential_decision(
    in_phasors: Sequence[Phasor],
    out_phasors: Sequence[Phasor],
    s: RelaySettings = RelaySettings(),
    time: float = 0.0,
) -> RelayDecision:
    """Evaluate the operate/restraint characteristic once.

    Both phasor sets are per-unit and measured into the zone, so a healthy
    through-current gives ``I_in = -I_out``.
    """
    if len(in_phasors) != 3 or len(out_phasors) != 3:
        raise ConfigError("need three input and three output phasors")
    i_in = np.array([p.complex for p in in_phasors])
    i_out = np.array([p.complex for p in out_phasors])
    diff, rest, trip = _characteristic(i_in, i_out, s)
    flags = tuple(bool(v) for v in trip)
    return RelayDecision(
        flags, time if any(flags) else None, tuple(map(float, diff)), tuple(map(float, rest))
    )


@dataclass(frozen=True)
class RelayScan:
    """Per-sample relay quantities; row k is evaluated at sample ``offset + k``."""

    times: np.ndarray
    differential: np.ndarray  # (m, 3)
    restraint: np.ndarray
    condition: np.ndarray  # raw characteristic, (m, 3) bool
    confirmed: np.ndarray  # after trip_confirm_samples, (m, 3) bool
    offset: int


def scan_trace(trace: SignalTrace, s: RelaySettings = RelaySettings(), frequency: float = 60.0) -> RelayScan:
    n = s.window_samples(trace.sampling_rate, frequency)
    if trace.n_samples < n + s.trip_confirm_samples - 1:
        raise DataError(
            f"trace of {trace.n_samples} samples too short for a {n}-sample window "
            f"and {s.trip_confirm_samples} confirmations"
        )
    pu = trace.per_unit()
    z = sliding_phasors(pu, trace.sampling_rate, frequency, n)  # (m, 6)
    diff, rest, cond = _characteristic(z[:, :3], -z[:, 3:], s)
    c = s.trip_confirm_samples
    if c == 1:
        confirmed = cond.copy()
    else:
        run = np.cumsum(cond, axis=0)
        prev = np.vstack([np.zeros((c, 3), dtype=run.dtype), run[:-c]])
        confirmed = (run - prev[: run.shape[0]]) >= c
        confirmed[: c - 1] = False
    times = trace.times[n - 1 :]
    return RelayScan(times, diff, rest, cond, confirmed, n - 1)


def relay_decision(trace: SignalTrace, s: RelaySettings = RelaySettings(), frequency: float = 60.0) -> RelayDecision:
    """Whole-trace decision: which phases ever confirm a trip, and when first."""
    sc = scan_trace(trace, s, frequency)
    per_phase = tuple(bool(v) for v in sc.confirmed.any(axis=0))
    if any(per_phase):
        k = int(np.argmax(sc.confirmed.any(axis=1)))
        return RelayDecision(
            per_phase,
            float(sc.times[k]),
            tuple(map(float, sc.differential[k])),
            tuple(map(float, sc.restraint[k])),
        )
    k = int(np.argmax(sc.differential.max(axis=1)))
    return RelayDecision(
        per_phase, None, tuple(map(float, sc.differential[k])), tuple(map(float, sc.restraint[k]))
    )


def detect_trigger(trace: SignalTrace, s: RelaySettings = RelaySettings(), frequency: float = 60.0) -> float | None:
    """Earliest time at which a confirmed trip holds on any phase, else None."""
    return relay_decision(trace, s, frequency).trip_time
