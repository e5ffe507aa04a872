"""False-data-injection, time-stamp and noise transforms on current traces.

Every transform is pure: it returns a new trace (or window) and never touches
its input. Randomness only enters through explicit seeds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import TypeVar

import numpy as np

from .errors import ConfigError, DataError, RangeError
from .relay import estimate_phasor
from .waveform import MeasurementWindow, SignalTrace


class AttackKind(str, Enum):
    INJECT_ARBITRARY = "INJECT_ARBITRARY"
    REPLAY = "REPLAY"
    TAP_MANIPULATION = "TAP_MANIPULATION"
    TSA_PLUS_FDIA = "TSA_PLUS_FDIA"


class Side(str, Enum):
    INPUT = "INPUT"
    OUTPUT = "OUTPUT"
    BOTH = "BOTH"

    @property
    def columns(self) -> list[int]:
        return {"INPUT": [0, 1, 2], "OUTPUT": [3, 4, 5], "BOTH": [0, 1, 2, 3, 4, 5]}[self.value]


FDIA_KINDS = (AttackKind.INJECT_ARBITRARY, AttackKind.REPLAY, AttackKind.TAP_MANIPULATION)

# fields each kind may (and, except phase_shift, must) populate
_FIELDS = {
    AttackKind.INJECT_ARBITRARY: {"magnitude_profile", "phase_shift"},
    AttackKind.REPLAY: {"replay_source"},
    AttackKind.TAP_MANIPULATION: {"tap_shift"},
    AttackKind.TSA_PLUS_FDIA: {"tsa_delay_ms", "payload"},
}
_OPTIONAL = {"phase_shift"}
_ALL_FIELDS = set().union(*_FIELDS.values())


@dataclass(frozen=True)
class AttackSpec:
    kind: AttackKind
    onset_time: float
    target_side: Side = Side.INPUT
    magnitude_profile: tuple[float | None, ...] | None = None
    phase_shift: float | None = None
    replay_source: str | None = None
    tap_shift: float | None = None
    tsa_delay_ms: float | None = None
    payload: "AttackSpec | None" = None

    def __post_init__(self):
        kind = AttackKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "target_side", Side(self.target_side))
        wanted = _FIELDS[kind]
        for name in _ALL_FIELDS:
            present = getattr(self, name) is not None
            if present and name not in wanted:
                raise ConfigError(f"{kind.value} does not take {name}")
            if not present and name in wanted and name not in _OPTIONAL:
                raise ConfigError(f"{kind.value} requires {name}")
        if kind is AttackKind.INJECT_ARBITRARY:
            prof = tuple(self.magnitude_profile)
            if not prof or all(m is None for m in prof):
                raise ConfigError("magnitude_profile must not be empty")
            if any(m is not None and m < 0 for m in prof):
                raise ConfigError("magnitude_profile amplitudes must be >= 0")
            object.__setattr__(self, "magnitude_profile", prof)
        if kind is AttackKind.TSA_PLUS_FDIA:
            if not self.tsa_delay_ms > 0:
                raise ConfigError("tsa_delay_ms must be > 0")
            if self.payload.kind not in FDIA_KINDS:
                raise ConfigError("TSA payload must be one of the three FDIA kinds")

    def to_dict(self) -> dict:
        d = {"kind": self.kind.value, "onset_time": self.onset_time, "target_side": self.target_side.value}
        for name in sorted(_FIELDS[self.kind]):
            v = getattr(self, name)
            if v is None:
                continue
            if name == "payload":
                v = v.to_dict()
            elif name == "magnitude_profile":
                v = list(v)
            d[name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        d = dict(d)
        if d.get("payload") is not None:
            d["payload"] = cls.from_dict(d["payload"])
        if d.get("magnitude_profile") is not None:
            d["magnitude_profile"] = tuple(d["magnitude_profile"])
        return cls(**d)


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float
    seed: int = 0
    calibrated: bool = True  # rescale each channel's draw to the exact target power

    def __post_init__(self):
        if not (np.isfinite(self.snr_db) and self.snr_db > 0):
            raise ConfigError("snr_db must be finite and > 0")

    def to_dict(self) -> dict:
        return {"snr_db": self.snr_db, "seed": self.seed, "calibrated": self.calibrated}


def _onset_index(trace: SignalTrace, onset: float) -> int:
    if not trace.t0 <= onset <= trace.t_end:
        raise RangeError(f"onset {onset} outside trace span [{trace.t0}, {trace.t_end}]")
    return trace.index_at(onset)


def inject_arbitrary(trace: SignalTrace, spec: AttackSpec) -> SignalTrace:
    """Replace targeted channels from onset with attacker-chosen sinusoids.

    Each sinusoid keeps the frequency and phase of the legitimate signal
    (estimated over the cycle before onset), shifted by ``phase_shift``. A
    ``None`` entry in ``magnitude_profile`` leaves that phase untouched.
    """
    if spec.kind is not AttackKind.INJECT_ARBITRARY:
        raise ConfigError("spec.kind must be INJECT_ARBITRARY")
    k0 = _onset_index(trace, spec.onset_time)
    f0 = 60.0
    n_cyc = int(round(trace.sampling_rate / f0))
    if k0 < n_cyc:
        raise RangeError("onset needs one cycle of pre-attack history")
    cols = spec.target_side.columns
    profile = spec.magnitude_profile
    if len(profile) not in (1, 3):
        raise ConfigError("magnitude_profile needs 1 or 3 entries per side")
    if len(profile) == 1:
        profile = profile * 3
    shift = spec.phase_shift or 0.0
    out = trace.samples.copy()
    t_rel = np.arange(trace.n_samples - (k0 - n_cyc)) / trace.sampling_rate
    w = 2 * np.pi * f0
    for c in cols:
        amp = profile[c % 3]
        if amp is None:
            continue
        ph = estimate_phasor(trace.samples[k0 - n_cyc : k0, c], trace.sampling_rate, f0)
        wave = amp * np.cos(w * t_rel + ph.angle + shift)
        out[k0:, c] = wave[n_cyc:]
    return trace.with_samples(out, [(spec.onset_time, "ATTACK")])


def inject_replay(trace: SignalTrace, fault_trace: SignalTrace, spec: AttackSpec) -> SignalTrace:
    """Overwrite targeted channels from onset with recorded fault samples.

    Copying starts at the fault inception marker of ``fault_trace``.
    """
    if spec.kind is not AttackKind.REPLAY:
        raise ConfigError("spec.kind must be REPLAY")
    if not np.isclose(trace.sampling_rate, fault_trace.sampling_rate):
        raise DataError("sampling rates of trace and replay source differ")
    k0 = _onset_index(trace, spec.onset_time)
    t_f = fault_trace.marker("FAULT")
    if t_f is None:
        raise DataError("replay source has no FAULT marker")
    f0 = fault_trace.index_at(t_f)
    need = trace.n_samples - k0
    if fault_trace.n_samples - f0 < need:
        raise DataError(f"replay source provides {fault_trace.n_samples - f0} samples, need {need}")
    out = trace.samples.copy()
    cols = spec.target_side.columns
    # replayed amperes are re-referred to this trace's per-unit base
    scale = trace.pu_base[cols] / fault_trace.pu_base[cols]
    out[k0:, cols] = fault_trace.samples[f0 : f0 + need, cols] * scale
    return trace.with_samples(out, [(spec.onset_time, "ATTACK")])


def inject_tap_manipulation(trace: SignalTrace, spec: AttackSpec) -> SignalTrace:
    """Scale output-side channels by ``1 + tap_shift`` from onset onward."""
    if spec.kind is not AttackKind.TAP_MANIPULATION:
        raise ConfigError("spec.kind must be TAP_MANIPULATION")
    tap = spec.tap_shift
    if tap == 0:
        raise ConfigError("tap_shift of zero is a no-op attack")
    if not 0 < abs(tap) <= 0.3:
        raise ConfigError("|tap_shift| must lie in (0, 0.3]")
    k0 = _onset_index(trace, spec.onset_time)
    out = trace.samples.copy()
    out[k0:, 3:] *= 1.0 + tap
    return trace.with_samples(out, [(spec.onset_time, "ATTACK")])


def time_shift(trace: SignalTrace, delay_ms: float, columns=(3, 4, 5), from_time: float | None = None) -> SignalTrace:
    """Delay ``columns`` by ``delay_ms`` using linear interpolation between samples.

    Only samples at or after ``from_time`` (default: trace start) are altered;
    they take the value the channel had ``delay_ms`` earlier. Before the first
    sample the signal is held at its first value.
    """
    if not delay_ms > 0:
        raise ConfigError("delay must be > 0")
    span_ms = (trace.n_samples - 1) / trace.sampling_rate * 1e3
    if delay_ms >= span_ms:
        raise RangeError(f"delay {delay_ms} ms exceeds trace span {span_ms:.3f} ms")
    k0 = 0 if from_time is None else _onset_index(trace, from_time)
    idx = np.arange(trace.n_samples, dtype=float)
    src = idx[k0:] - delay_ms * 1e-3 * trace.sampling_rate
    out = trace.samples.copy()
    for c in columns:
        out[k0:, c] = np.interp(src, idx, trace.samples[:, c])
    return trace.with_samples(out)


_FDIA_APPLY = {
    AttackKind.INJECT_ARBITRARY: lambda tr, sp, src: inject_arbitrary(tr, sp),
    AttackKind.REPLAY: lambda tr, sp, src: inject_replay(tr, src, sp),
    AttackKind.TAP_MANIPULATION: lambda tr, sp, src: inject_tap_manipulation(tr, sp),
}


def inject_tsa_plus_fdia(
    trace: SignalTrace,
    fdia: AttackSpec,
    tsa_delay_ms: float = 1.0,
    replay_trace: SignalTrace | None = None,
) -> SignalTrace:
    """Delay the output side from the FDIA onset, then apply the FDIA payload."""
    if not tsa_delay_ms > 0:
        raise ConfigError("tsa_delay_ms must be > 0")
    if fdia.kind not in FDIA_KINDS:
        raise ConfigError("fdia must be one of the three FDIA kinds")
    if fdia.kind is AttackKind.REPLAY and replay_trace is None:
        raise ConfigError("REPLAY payload needs a replay_trace")
    shifted = time_shift(trace, tsa_delay_ms, (3, 4, 5), from_time=fdia.onset_time)
    return _FDIA_APPLY[fdia.kind](shifted, fdia, replay_trace)


def apply_attack(trace: SignalTrace, spec: AttackSpec, replay_trace: SignalTrace | None = None) -> SignalTrace:
    """Dispatch on ``spec.kind``."""
    if spec.kind is AttackKind.TSA_PLUS_FDIA:
        return inject_tsa_plus_fdia(trace, spec.payload, spec.tsa_delay_ms, replay_trace)
    if spec.kind is AttackKind.REPLAY and replay_trace is None:
        raise ConfigError("REPLAY needs a replay_trace")
    return _FDIA_APPLY[spec.kind](trace, spec, replay_trace)


T = TypeVar("T", SignalTrace, MeasurementWindow)


def add_awgn(obj: T, noise: NoiseSpec) -> T:
    """Additive white Gaussian noise at ``noise.snr_db`` per channel.

    Signal power is the mean square of each channel over the whole trace or
    window. With ``noise.calibrated`` the drawn noise is rescaled so its mean
    square equals the target power exactly.
    """
    x = obj.samples if isinstance(obj, SignalTrace) else obj.values
    power = np.mean(x**2, axis=0)
    if np.any(power == 0):
        raise DataError(f"zero-power channel(s) {np.flatnonzero(power == 0).tolist()}: SNR undefined")
    target = power / 10 ** (noise.snr_db / 10)
    rng = np.random.default_rng(noise.seed)
    z = rng.standard_normal(x.shape)
    if noise.calibrated:
        z = z / np.sqrt(np.mean(z**2, axis=0))
    noisy = x + z * np.sqrt(target)
    if isinstance(obj, SignalTrace):
        return obj.with_samples(noisy)
    return obj.with_values(noisy)


def realized_snr_db(clean: np.ndarray, noisy: np.ndarray) -> np.ndarray:
    """Per-channel 10 log10(P_signal / P_noise) of a clean/noisy pair."""
    clean = np.asarray(clean, dtype=float)
    n = np.asarray(noisy, dtype=float) - clean
    return 10 * np.log10(np.mean(clean**2, axis=0) / np.mean(n**2, axis=0))
