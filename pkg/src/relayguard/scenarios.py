"""Seeded scenario batches: simulate, attack, keep only what trips the relay, cut windows.

Each scenario draws from its own generator seeded by ``(seed, index,
attempt)``, so batches are reproducible and independent of evaluation order.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .attacks import FDIA_KINDS, AttackKind, AttackSpec, Side, apply_attack
from .errors import DataError, RelayGuardError
from .relay import RelaySettings, detect_trigger
from .waveform import (
    PHASES,
    FaultSpec,
    FaultType,
    Label,
    MeasurementWindow,
    SignalTrace,
    SystemConfig,
    capture_window,
    simulate_fault,
    simulate_steady_state,
)

CATALOG_FIELDS = (
    "scenario_id",
    "label",
    "kind",
    "seed",
    "index",
    "load_mw",
    "params",
    "tripped",
    "trigger_time",
    "rejected",
)
MAX_ATTEMPTS = 50


@dataclass(frozen=True)
class ScenarioRecord:
    scenario_id: str
    label: Label
    kind: str
    seed: int
    index: int
    load_mw: float
    params: dict
    tripped: bool
    trigger_time: float | None
    rejected: int = 0

    def to_row(self) -> dict:
        return {
            "scenario_id": self.scenario_id,
            "label": self.label.value,
            "kind": self.kind,
            "seed": self.seed,
            "index": self.index,
            "load_mw": repr(self.load_mw),
            "params": json.dumps(self.params, sort_keys=True),
            "tripped": int(self.tripped),
            "trigger_time": "" if self.trigger_time is None else repr(self.trigger_time),
            "rejected": self.rejected,
        }

    @classmethod
    def from_row(cls, row: dict) -> "ScenarioRecord":
        return cls(
            row["scenario_id"],
            Label(row["label"]),
            row["kind"],
            int(row["seed"]),
            int(row["index"]),
            float(row["load_mw"]),
            json.loads(row["params"]),
            bool(int(row["tripped"])),
            float(row["trigger_time"]) if row["trigger_time"] else None,
            int(row["rejected"]),
        )


@dataclass(frozen=True)
class GeneratorConfig:
    n_scenarios: int = 1000
    seed: int = 0
    attack_fraction: float = 0.5
    attack_kinds: tuple[str, ...] = tuple(k.value for k in FDIA_KINDS)
    fault_multiple_range: tuple[float, float] = (4.0, 12.0)
    dc_tau_range: tuple[float, float] = (0.010, 0.040)
    tsa_delay_ms: float = 1.0
    tsa_payload: str = AttackKind.REPLAY.value
    id_prefix: str = "sc"

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def random_fault(rng: np.random.Generator, cfg: SystemConfig, gen: GeneratorConfig) -> FaultSpec:
    ftype = FaultType(rng.choice([f.value for f in FaultType]))
    phases = tuple(sorted(rng.choice(PHASES, size=ftype.n_phases, replace=False)))
    return FaultSpec(
        ftype,
        float(rng.uniform(*cfg.trigger_window)),
        phases,
        float(rng.uniform(*gen.fault_multiple_range)),
        float(rng.uniform(*gen.dc_tau_range)),
    )


def random_fdia(
    rng: np.random.Generator, kind: AttackKind, cfg: SystemConfig, load_mw: float, gen: GeneratorConfig
) -> tuple[AttackSpec, dict | None]:
    """An FDIA spec plus, for replays, the parameters of the recorded fault."""
    onset = float(rng.uniform(*cfg.trigger_window))
    if kind is AttackKind.INJECT_ARBITRARY:
        side = Side.INPUT if rng.random() < 0.7 else Side.OUTPUT
        amp_in, amp_out = cfg.side_amplitudes(load_mw)
        amp = amp_in if side is Side.INPUT else amp_out
        lo, hi = (2.0, 10.0) if side is Side.INPUT else (0.0, 0.4)
        n_hit = int(rng.integers(1, 4))
        hit = set(rng.choice(3, size=n_hit, replace=False).tolist())
        prof = tuple(float(amp * rng.uniform(lo, hi)) if p in hit else None for p in range(3))
        spec = AttackSpec(
            kind, onset, side, magnitude_profile=prof, phase_shift=float(rng.uniform(-np.pi / 6, np.pi / 6))
        )
        return spec, None
    if kind is AttackKind.REPLAY:
        side = Side.INPUT if rng.random() < 0.5 else Side.OUTPUT
        src_fault = random_fault(rng, cfg, gen)
        src_load = float(rng.choice(cfg.load_levels))
        spec = AttackSpec(kind, onset, side, replay_source="fault:" + json.dumps(src_fault.to_dict(), sort_keys=True))
        return spec, {"fault": src_fault.to_dict(), "load_mw": src_load}
    if kind is AttackKind.TAP_MANIPULATION:
        # part of this range sits below the slope threshold and gets filtered out
        tap = float(rng.uniform(0.15, 0.30)) * (1 if rng.random() < 0.5 else -1)
        return AttackSpec(kind, onset, Side.OUTPUT, tap_shift=tap), None
    raise DataError(f"not an FDIA kind: {kind}")


def _replay_trace(cfg: SystemConfig, source: dict) -> SignalTrace:
    fault = FaultSpec.from_dict(source["fault"])
    # long enough to supply samples from inception to the end of any trace
    return simulate_fault(cfg, source["load_mw"], fault, duration=cfg.duration + 0.1, t0=cfg.t0)


def build_trace(cfg: SystemConfig, label: Label, load_mw: float, params: dict) -> SignalTrace:
    """Deterministically rebuild a scenario trace from its catalog parameters."""
    if label is Label.FAULT:
        return simulate_fault(cfg, load_mw, FaultSpec.from_dict(params["fault"]))
    base = simulate_steady_state(cfg, load_mw)
    spec = AttackSpec.from_dict(params["attack"])
    replay = _replay_trace(cfg, params["replay"]) if params.get("replay") else None
    return apply_attack(base, spec, replay)


def _labels_for_batch(gen: GeneratorConfig) -> np.ndarray:
    n_attack = int(round(gen.n_scenarios * gen.attack_fraction))
    labels = np.array([Label.ATTACK] * n_attack + [Label.FAULT] * (gen.n_scenarios - n_attack), dtype=object)
    return np.random.default_rng([gen.seed, 0xBA7C]).permutation(labels)


def generate_scenario(
    index: int,
    label: Label,
    cfg: SystemConfig,
    gen: GeneratorConfig,
    relay: RelaySettings = RelaySettings(),
    kind: str | None = None,
) -> tuple[MeasurementWindow, ScenarioRecord]:
    """One accepted scenario; non-tripping draws are counted in ``rejected``."""
    sid = f"{gen.id_prefix}{gen.seed}-{index:06d}"
    rejected = 0
    if label is Label.ATTACK and kind is None:
        # fixed per scenario so retries cannot drift towards easy-to-trip kinds
        kind = str(np.random.default_rng([gen.seed, index, 0xC1A55]).choice(gen.attack_kinds))
    for attempt in range(MAX_ATTEMPTS):
        rng = np.random.default_rng([gen.seed, index, attempt])
        load = float(rng.choice(cfg.load_levels))
        if label is Label.FAULT:
            fault = random_fault(rng, cfg, gen)
            params = {"fault": fault.to_dict()}
            kname = "FAULT_" + fault.fault_type.value
        else:
            kname = kind
            akind = AttackKind(kname)
            if akind is AttackKind.TSA_PLUS_FDIA:
                payload, replay = random_fdia(rng, AttackKind(gen.tsa_payload), cfg, load, gen)
                spec = AttackSpec(akind, payload.onset_time, payload.target_side, tsa_delay_ms=gen.tsa_delay_ms, payload=payload)
            else:
                spec, replay = random_fdia(rng, akind, cfg, load, gen)
            params = {"attack": spec.to_dict(), "replay": replay}
        trace = build_trace(cfg, label, load, params)
        trig = detect_trigger(trace, relay, cfg.nominal_frequency)
        if trig is not None:
            try:
                win = capture_window(trace, trig, label, sid)
            except RelayGuardError:
                trig = None
        if trig is None:
            rejected += 1
            continue
        rec = ScenarioRecord(sid, label, kname, gen.seed, index, load, params, True, trig, rejected)
        return win, rec
    raise DataError(f"scenario {sid}: no tripping draw in {MAX_ATTEMPTS} attempts")


def generate_batch(
    cfg: SystemConfig, gen: GeneratorConfig, relay: RelaySettings = RelaySettings()
) -> tuple[list[MeasurementWindow], list[ScenarioRecord]]:
    labels = _labels_for_batch(gen)
    windows, records = [], []
    for i, lab in enumerate(labels):
        w, r = generate_scenario(i, lab, cfg, gen, relay)
        windows.append(w)
        records.append(r)
    return windows, records


def generate_tsa_holdout(
    cfg: SystemConfig, n: int, seed: int = 7, relay: RelaySettings = RelaySettings(), **gen_kw
) -> tuple[list[MeasurementWindow], list[ScenarioRecord]]:
    """Attack-only batch of time-stamp + FDIA scenarios."""
    gen = GeneratorConfig(n_scenarios=n, seed=seed, attack_fraction=1.0, id_prefix="tsa", **gen_kw)
    windows, records = [], []
    for i in range(n):
        w, r = generate_scenario(i, Label.ATTACK, cfg, gen, relay, kind=AttackKind.TSA_PLUS_FDIA.value)
        windows.append(w)
        records.append(r)
    return windows, records


def rebuild_window(cfg: SystemConfig, rec: ScenarioRecord) -> MeasurementWindow:
    trace = build_trace(cfg, rec.label, rec.load_mw, rec.params)
    return capture_window(trace, rec.trigger_time, rec.label, rec.scenario_id)


def write_catalog(records: Iterable[ScenarioRecord], path: str | Path, header: dict | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write("# " + json.dumps(header, sort_keys=True) + "\n")
        wr = csv.DictWriter(fh, fieldnames=CATALOG_FIELDS)
        wr.writeheader()
        for r in records:
            wr.writerow(r.to_row())


def read_catalog(path: str | Path) -> list[ScenarioRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return [ScenarioRecord.from_row(row) for row in csv.DictReader(lines)]
