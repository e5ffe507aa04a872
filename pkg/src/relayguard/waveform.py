"""Analytic three-phase current traces for a protected two-winding transformer.

Traces hold CT secondary currents in amperes, columns ordered
``A_in, B_in, C_in, A_out, B_out, C_out``. Both sides are stored in the
through-current direction, so in steady state the per-unit input and output
columns coincide. The relay applies its own polarity convention on top.

The fault model is a superposition surrogate: pre-fault load phasor, a fault
phasor lagging by the source impedance angle, and an exponentially decaying
DC term that keeps the current continuous at inception.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, RangeError, RecordError

CHANNELS = ("Ain", "Bin", "Cin", "Aout", "Bout", "Cout")
PHASES = ("A", "B", "C")
WINDOW_SAMPLES = 32
N_CHANNELS = 6
N_VALUES = WINDOW_SAMPLES * N_CHANNELS


class Label(str, Enum):
    FAULT = "FAULT"
    ATTACK = "ATTACK"


class Source(str, Enum):
    SIMULATED = "SIMULATED"
    INGESTED = "INGESTED"


class FaultType(str, Enum):
    PH1_GND = "1PH_GND"
    PH2_GND = "2PH_GND"
    PH3 = "3PH"

    @property
    def n_phases(self) -> int:
        return {"1PH_GND": 1, "2PH_GND": 2, "3PH": 3}[self.value]


@dataclass(frozen=True)
class SystemConfig:
    nominal_frequency: float = 60.0
    sampling_rate: float = 1600.0
    rated_load_mw: float = 250.0  # per-unit power base
    load_levels: tuple[float, ...] = (350.0, 352.0, 354.0, 356.0, 358.0, 360.0)
    v_in_kv: float = 20.0
    turns_ratio: float = 11.5  # output / input voltage
    ct_ratio_in: float = 2400.0
    ct_ratio_out: float = 200.0
    source_impedance: complex = complex(0.01, 0.1)
    load_angle: float = 0.0  # phase A angle at t = 0, radians
    t0: float = 0.95
    duration: float = 0.15
    trigger_window: tuple[float, float] = (1.00, 1.02)

    def __post_init__(self):
        if self.sampling_rate <= 0 or self.nominal_frequency <= 0:
            raise ConfigError("sampling_rate and nominal_frequency must be positive")
        if not self.load_levels or any(p <= 0 for p in self.load_levels):
            raise ConfigError("load_levels must be non-empty and positive")
        if self.rated_load_mw <= 0 or self.v_in_kv <= 0 or self.turns_ratio <= 0:
            raise ConfigError("ratings must be positive")
        if self.ct_ratio_in <= 0 or self.ct_ratio_out <= 0:
            raise ConfigError("CT ratios must be positive")

    @property
    def samples_per_cycle(self) -> float:
        return self.sampling_rate / self.nominal_frequency

    def side_amplitudes(self, load_mw: float) -> tuple[float, float]:
        """Peak secondary current on the input and output side for ``load_mw``."""
        i_primary_in = np.sqrt(2.0) * load_mw * 1e6 / (np.sqrt(3.0) * self.v_in_kv * 1e3)
        return i_primary_in / self.ct_ratio_in, i_primary_in / self.turns_ratio / self.ct_ratio_out

    def pu_base(self) -> np.ndarray:
        """Per-channel secondary amperes corresponding to 1 pu peak."""
        b_in, b_out = self.side_amplitudes(self.rated_load_mw)
        return np.array([b_in] * 3 + [b_out] * 3)

    def load_pu(self, load_mw: float) -> float:
        return load_mw / self.rated_load_mw

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["source_impedance"] = [self.source_impedance.real, self.source_impedance.imag]
        d["load_levels"] = list(self.load_levels)
        d["trigger_window"] = list(self.trigger_window)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SystemConfig":
        d = dict(d)
        if "source_impedance" in d and not isinstance(d["source_impedance"], complex):
            re, im = d["source_impedance"]
            d["source_impedance"] = complex(re, im)
        for key in ("load_levels", "trigger_window"):
            if key in d:
                d[key] = tuple(float(x) for x in d[key])
        return cls(**d)


@dataclass(frozen=True)
class FaultSpec:
    fault_type: FaultType
    inception_time: float
    faulted_phases: tuple[str, ...]
    fault_current_multiple: float = 8.0
    dc_offset_time_constant: float = 0.02  # seconds; 0 disables the DC term
    output_fraction: float = 0.0  # output-side current kept on faulted phases

    def __post_init__(self):
        object.__setattr__(self, "fault_type", FaultType(self.fault_type))
        phases = tuple(self.faulted_phases)
        if not phases:
            raise ConfigError("faulted_phases must not be empty")
        if any(p not in PHASES for p in phases) or len(set(phases)) != len(phases):
            raise ConfigError(f"invalid faulted_phases {phases!r}")
        if len(phases) != self.fault_type.n_phases:
            raise ConfigError(
                f"{self.fault_type.value} needs {self.fault_type.n_phases} phase(s), got {phases!r}"
            )
        if self.fault_current_multiple < 1:
            raise ConfigError("fault_current_multiple must be >= 1")
        if self.dc_offset_time_constant < 0:
            raise ConfigError("dc_offset_time_constant must be >= 0")
        object.__setattr__(self, "faulted_phases", phases)

    def to_dict(self) -> dict:
        return {
            "fault_type": self.fault_type.value,
            "inception_time": self.inception_time,
            "faulted_phases": list(self.faulted_phases),
            "fault_current_multiple": self.fault_current_multiple,
            "dc_offset_time_constant": self.dc_offset_time_constant,
            "output_fraction": self.output_fraction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        d = dict(d)
        d["faulted_phases"] = tuple(d["faulted_phases"])
        return cls(**d)


@dataclass(frozen=True)
class SignalTrace:
    samples: np.ndarray
    t0: float
    sampling_rate: float
    event_markers: tuple[tuple[float, str], ...] = ()
    pu_base: np.ndarray = field(default_factory=lambda: np.ones(N_CHANNELS))

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 2 or s.shape[1] != N_CHANNELS:
            raise DataError(f"trace must have 6 columns, got shape {s.shape}")
        if s.shape[0] < WINDOW_SAMPLES:
            raise DataError(f"trace needs >= {WINDOW_SAMPLES} samples, got {s.shape[0]}")
        if not np.all(np.isfinite(s)):
            raise DataError("trace contains non-finite values")
        if self.sampling_rate <= 0:
            raise ConfigError("sampling_rate must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        base = np.asarray(self.pu_base, dtype=float).copy()
        base.setflags(write=False)
        object.__setattr__(self, "pu_base", base)
        object.__setattr__(self, "event_markers", tuple((float(t), str(k)) for t, k in self.event_markers))

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + np.arange(self.n_samples) / self.sampling_rate

    @property
    def t_end(self) -> float:
        return self.t0 + (self.n_samples - 1) / self.sampling_rate

    def per_unit(self) -> np.ndarray:
        return self.samples / self.pu_base

    def index_at(self, t: float) -> int:
        """First sample index whose time is >= ``t``."""
        return int(np.ceil((t - self.t0) * self.sampling_rate - 1e-9))

    def marker(self, kind: str) -> float | None:
        for t, k in self.event_markers:
            if k == kind:
                return t
        return None

    def with_samples(self, samples: np.ndarray, extra_markers: Iterable[tuple[float, str]] = ()) -> "SignalTrace":
        return replace(self, samples=samples, event_markers=self.event_markers + tuple(extra_markers))


@dataclass(frozen=True)
class MeasurementWindow:
    values: np.ndarray
    label: Label
    scenario_id: str
    trigger_index: int = WINDOW_SAMPLES // 2
    source: Source = Source.SIMULATED

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != (WINDOW_SAMPLES, N_CHANNELS):
            raise DataError(f"window must have shape (32, 6), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("window contains non-finite values")
        if not 0 <= int(self.trigger_index) < WINDOW_SAMPLES:
            raise DataError(f"trigger_index {self.trigger_index} outside [0, 31]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "source", Source(self.source))
        object.__setattr__(self, "trigger_index", int(self.trigger_index))

    def with_values(self, values: np.ndarray) -> "MeasurementWindow":
        return replace(self, values=values)

    def to_record(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "label": self.label.value,
            "trigger_index": self.trigger_index,
            "source": self.source.value,
            "values": self.values.ravel().tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict) -> "MeasurementWindow":
        return cls(
            values=np.asarray(rec["values"], dtype=float).reshape(WINDOW_SAMPLES, N_CHANNELS),
            label=rec["label"],
            scenario_id=str(rec["scenario_id"]),
            trigger_index=int(rec.get("trigger_index", WINDOW_SAMPLES // 2)),
            source=rec.get("source", Source.INGESTED.value),
        )


def _check_duration(cfg: SystemConfig, duration: float) -> None:
    if duration <= 0:
        raise ConfigError("duration must be positive")
    if duration < 2.0 / cfg.nominal_frequency:
        raise ConfigError("duration must cover at least two fundamental cycles")


def _load_pu_waves(cfg: SystemConfig, load_mw: float, t: np.ndarray) -> np.ndarray:
    """Balanced per-unit load currents, shape (len(t), 3)."""
    if load_mw <= 0:
        raise ConfigError("load_mw must be positive")
    w = 2 * np.pi * cfg.nominal_frequency
    shifts = np.array([0.0, -2 * np.pi / 3, 2 * np.pi / 3])
    return cfg.load_pu(load_mw) * np.cos(w * t[:, None] + cfg.load_angle + shifts[None, :])


def simulate_steady_state(
    cfg: SystemConfig, load_mw: float, duration: float | None = None, t0: float | None = None
) -> SignalTrace:
    """Normal-load trace; input and output columns agree exactly in per-unit."""
    duration = cfg.duration if duration is None else duration
    t0 = cfg.t0 if t0 is None else t0
    _check_duration(cfg, duration)
    n = int(round(duration * cfg.sampling_rate))
    t = t0 + np.arange(n) / cfg.sampling_rate
    pu = _load_pu_waves(cfg, load_mw, t)
    base = cfg.pu_base()
    samples = np.hstack([pu, pu]) * base
    return SignalTrace(samples, t0, cfg.sampling_rate, (), base)


def simulate_fault(
    cfg: SystemConfig,
    load_mw: float,
    fault: FaultSpec,
    duration: float | None = None,
    t0: float | None = None,
) -> SignalTrace:
    """Internal fault superimposed on the steady-state load flow.

    After inception the faulted input phases carry ``multiple x load`` lagging
    by the source impedance angle, plus a DC term that decays with
    ``dc_offset_time_constant``. Faulted output phases drop to
    ``output_fraction`` of their pre-fault value.
    """
    duration = cfg.duration if duration is None else duration
    t0 = cfg.t0 if t0 is None else t0
    _check_duration(cfg, duration)
    n = int(round(duration * cfg.sampling_rate))
    t = t0 + np.arange(n) / cfg.sampling_rate
    t_f = fault.inception_time
    if not t0 <= t_f < t[-1]:
        raise RangeError(f"inception {t_f} outside trace span [{t0}, {t[-1]}]")

    w = 2 * np.pi * cfg.nominal_frequency
    load = cfg.load_pu(load_mw)
    pre = _load_pu_waves(cfg, load_mw, t)
    pu_in = pre.copy()
    pu_out = pre.copy()
    after = t >= t_f
    lag = np.angle(cfg.source_impedance)
    shifts = {"A": 0.0, "B": -2 * np.pi / 3, "C": 2 * np.pi / 3}
    for p in fault.faulted_phases:
        k = PHASES.index(p)
        ang = cfg.load_angle + shifts[p]
        fault_amp = fault.fault_current_multiple * load

        def fault_wave(tt):
            return fault_amp * np.cos(w * tt + ang - lag)

        i_pre_at_tf = load * np.cos(w * t_f + ang)
        cur = fault_wave(t[after])
        if fault.dc_offset_time_constant > 0:
            offset0 = i_pre_at_tf - fault_wave(t_f)
            with np.errstate(over="ignore"):  # tiny time constants decay to exactly zero
                cur = cur + offset0 * np.exp(-(t[after] - t_f) / fault.dc_offset_time_constant)
        pu_in[after, k] = cur
        pu_out[after, k] = fault.output_fraction * pre[after, k]

    base = cfg.pu_base()
    samples = np.hstack([pu_in, pu_out]) * base
    return SignalTrace(samples, t0, cfg.sampling_rate, ((t_f, "FAULT"),), base)


def capture_window(
    trace: SignalTrace,
    trigger_time: float,
    label: Label | str = Label.FAULT,
    scenario_id: str = "",
    pre_samples: int = WINDOW_SAMPLES // 2,
    source: Source = Source.SIMULATED,
) -> MeasurementWindow:
    """Cut 32 consecutive samples around the sample nearest ``trigger_time``.

    ``pre_samples`` samples precede the trigger sample, which sits at
    ``trigger_index == pre_samples``.
    """
    if not 0 <= pre_samples < WINDOW_SAMPLES:
        raise ConfigError("pre_samples must be in [0, 31]")
    idx = int(round((trigger_time - trace.t0) * trace.sampling_rate))
    start = idx - pre_samples
    stop = start + WINDOW_SAMPLES
    if start < 0 or stop > trace.n_samples:
        raise RangeError(
            f"trigger {trigger_time:.6f}s needs samples [{start}, {stop}) but trace has {trace.n_samples}"
        )
    return MeasurementWindow(
        trace.samples[start:stop].copy(), Label(label), scenario_id, pre_samples, source
    )


# --- serialization ---------------------------------------------------------


def write_records(windows: Iterable[MeasurementWindow], path: str | Path) -> None:
    """Line-delimited records, one JSON object per window, values time-major."""
    with open(path, "w", encoding="utf-8") as fh:
        for w in windows:
            fh.write(json.dumps(w.to_record(), separators=(",", ":")) + "\n")


def parse_record(obj: dict, line: int) -> MeasurementWindow:
    for key in ("scenario_id", "label", "values"):
        if key not in obj:
            raise RecordError(line, "parse", f"missing field {key!r}")
    try:
        label = Label(obj["label"])
    except ValueError:
        raise RecordError(line, "label", f"unknown label {obj['label']!r}") from None
    try:
        vals = np.asarray(obj["values"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise RecordError(line, "parse", str(exc)) from None
    if vals.shape != (N_VALUES,):
        raise RecordError(line, "shape", f"expected {N_VALUES} values, got {vals.size} ({obj['scenario_id']})")
    if not np.all(np.isfinite(vals)):
        raise RecordError(line, "non-finite", f"non-finite value in {obj['scenario_id']}")
    trig = int(obj.get("trigger_index", WINDOW_SAMPLES // 2))
    if not 0 <= trig < WINDOW_SAMPLES:
        raise RecordError(line, "shape", f"trigger_index {trig} outside [0, 31]")
    return MeasurementWindow(
        vals.reshape(WINDOW_SAMPLES, N_CHANNELS),
        label,
        str(obj["scenario_id"]),
        trig,
        obj.get("source", Source.INGESTED.value),
    )


def read_records(path: str | Path) -> list[MeasurementWindow]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise RecordError(i, "parse", str(exc)) from None
            out.append(parse_record(obj, i))
    return out


def write_trace_csv(trace: SignalTrace, path: str | Path) -> None:
    """Columnar export for plotting: ``t,Ain,Bin,Cin,Aout,Bout,Cout``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(("t",) + CHANNELS)
        for t, row in zip(trace.times, trace.samples):
            wr.writerow([repr(float(t))] + [repr(float(v)) for v in row])


def read_trace_csv(path: str | Path, pu_base: Sequence[float] | None = None) -> SignalTrace:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    fs = 1.0 / np.median(np.diff(t))
    base = np.ones(N_CHANNELS) if pu_base is None else np.asarray(pu_base, dtype=float)
    return SignalTrace(data[:, 1:], float(t[0]), float(round(fs, 9)), (), base)
