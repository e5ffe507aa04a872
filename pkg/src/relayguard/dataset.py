"""Labelled window datasets: ingestion, export, fingerprints and stratified splits."""

from __future__ import annotations

import csv
import hashlib
import json
from collections import Counter
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, RecordError
from .waveform import (
    N_VALUES,
    WINDOW_SAMPLES,
    Label,
    MeasurementWindow,
    Source,
    parse_record,
    write_records,
)


class Format(str, Enum):
    RECORDS = "RECORDS"
    CSV = "CSV"

    @classmethod
    def from_path(cls, path: str | Path) -> "Format":
        return cls.CSV if str(path).lower().endswith(".csv") else cls.RECORDS


CSV_VALUE_COLUMNS = [f"v{i:03d}" for i in range(N_VALUES)]
CSV_COLUMNS = ["scenario_id", "label", "trigger_index"] + CSV_VALUE_COLUMNS


class IngestError(DataError):
    """Collects every rejected record of one file."""

    def __init__(self, path, errors: list[RecordError]):
        self.path = str(path)
        self.errors = errors
        head = "; ".join(str(e) for e in errors[:5])
        super().__init__(f"{path}: {len(errors)} malformed record(s): {head}")


def window_hash(w: MeasurementWindow) -> str:
    """Content hash over id, label, trigger index and exact float64 values."""
    h = hashlib.sha256()
    h.update(f"{w.scenario_id}\x00{w.label.value}\x00{w.trigger_index}\x00".encode())
    h.update(np.ascontiguousarray(w.values, dtype="<f8").tobytes())
    return h.hexdigest()


def values_hash(w: MeasurementWindow) -> str:
    """Hash of the numeric content only; used for leakage checks."""
    return hashlib.sha256(np.ascontiguousarray(w.values, dtype="<f8").tobytes()).hexdigest()


@dataclass(frozen=True)
class Dataset:
    windows: tuple[MeasurementWindow, ...]
    class_counts: dict
    fingerprint: str

    @classmethod
    def from_windows(cls, windows: Iterable[MeasurementWindow]) -> "Dataset":
        ws = tuple(windows)
        counts = Counter(w.label.value for w in ws)
        hashes = sorted(window_hash(w) for w in ws)
        fp = hashlib.sha256("\n".join(hashes).encode()).hexdigest()
        return cls(ws, {lab.value: counts.get(lab.value, 0) for lab in Label}, fp)

    def __len__(self) -> int:
        return len(self.windows)

    def __iter__(self):
        return iter(self.windows)

    @property
    def labels(self) -> np.ndarray:
        return np.array([1 if w.label is Label.ATTACK else 0 for w in self.windows], dtype=int)

    def values(self) -> np.ndarray:
        """Stacked raw values, shape (n, 32, 6)."""
        if not self.windows:
            return np.zeros((0, WINDOW_SAMPLES, 6))
        return np.stack([w.values for w in self.windows])

    def content_hashes(self) -> set[str]:
        return {values_hash(w) for w in self.windows}

    def by_id(self, scenario_id: str) -> MeasurementWindow:
        for w in self.windows:
            if w.scenario_id == scenario_id:
                return w
        raise KeyError(scenario_id)


def _as_ingested(w: MeasurementWindow) -> MeasurementWindow:
    return w if w.source is Source.INGESTED else MeasurementWindow(w.values, w.label, w.scenario_id, w.trigger_index, Source.INGESTED)


def _read_records_lenient(path: Path) -> tuple[list[MeasurementWindow], list[RecordError]]:
    ok, bad = [], []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                ok.append(parse_record(json.loads(line), i))
            except json.JSONDecodeError as exc:
                bad.append(RecordError(i, "parse", str(exc)))
            except RecordError as exc:
                bad.append(exc)
    return ok, bad


def _read_csv_lenient(path: Path) -> tuple[list[MeasurementWindow], list[RecordError]]:
    ok, bad = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header is None:
            return ok, bad
        vcols = [i for i, h in enumerate(header) if h.startswith("v") and h[1:].isdigit()]
        col = {h: i for i, h in enumerate(header)}
        for line_no, row in enumerate(rd, start=2):
            if not row:
                continue
            try:
                if len(row) != len(header):
                    raise RecordError(line_no, "shape", f"{len(row)} fields, header has {len(header)}")
                rec = {
                    "scenario_id": row[col["scenario_id"]],
                    "label": row[col["label"]],
                    "values": [float(row[i]) for i in vcols],
                }
                if "trigger_index" in col:
                    rec["trigger_index"] = int(row[col["trigger_index"]])
                ok.append(parse_record(rec, line_no))
            except RecordError as exc:
                bad.append(exc)
            except (ValueError, KeyError) as exc:
                bad.append(RecordError(line_no, "parse", str(exc)))
    return ok, bad


def ingest(path: str | Path, fmt: Format | str | None = None, skip_invalid: bool = False) -> Dataset:
    """Load a RECORDS (JSON lines) or CSV file.

    Every malformed record is reported with its line number; unless
    ``skip_invalid`` the load fails as a whole.
    """
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset file {p} not found")
    fmt = Format.from_path(p) if fmt is None else Format(fmt)
    reader = _read_csv_lenient if fmt is Format.CSV else _read_records_lenient
    ok, bad = reader(p)
    if bad and not skip_invalid:
        raise IngestError(p, bad)
    return Dataset.from_windows(_as_ingested(w) for w in ok)


def export(ds: Dataset, path: str | Path, fmt: Format | str | None = None) -> None:
    p = Path(path)
    fmt = Format.from_path(p) if fmt is None else Format(fmt)
    if fmt is Format.RECORDS:
        write_records(ds.windows, p)
        return
    with open(p, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_COLUMNS)
        for w in ds.windows:
            wr.writerow([w.scenario_id, w.label.value, w.trigger_index] + [repr(float(v)) for v in w.values.ravel()])


def from_arrays(
    values: np.ndarray, labels: Sequence, scenario_ids: Sequence[str] | None = None, prefix: str = "ext"
) -> Dataset:
    """Import shim for externally produced matrices.

    ``values`` is (n, 32, 6) or (n, 192) time-major; ``labels`` are 0/1
    (1 = attack) or label strings.
    """
    x = np.asarray(values, dtype=float)
    if x.ndim == 2 and x.shape[1] == N_VALUES:
        x = x.reshape(-1, WINDOW_SAMPLES, 6)
    if x.ndim != 3 or x.shape[1:] != (WINDOW_SAMPLES, 6):
        raise DataError(f"expected (n, 32, 6) or (n, 192) values, got {x.shape}")
    if len(labels) != len(x):
        raise DataError("values and labels differ in length")
    ids = scenario_ids or [f"{prefix}-{i:06d}" for i in range(len(x))]

    def lab(y):
        if isinstance(y, str):
            return Label(y.upper())
        return Label.ATTACK if int(y) == 1 else Label.FAULT

    return Dataset.from_windows(
        MeasurementWindow(v, lab(y), str(i), WINDOW_SAMPLES // 2, Source.INGESTED) for v, y, i in zip(x, labels, ids)
    )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 42
    stratify_by: str = "label"

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must be in (0, 1)")
        if self.stratify_by != "label":
            raise ConfigError("only stratification by label is supported")


def stratified_split(ds: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[Dataset, Dataset]:
    """Per-class seeded split; train gets round-half-up(train_fraction x class count).

    Members are first put in content-hash order, so the result does not
    depend on the order of ``ds.windows``.
    """
    rng = np.random.default_rng(spec.seed)
    train, test = [], []
    for lab in sorted({w.label.value for w in ds.windows}):
        members = sorted((w for w in ds.windows if w.label.value == lab), key=window_hash)
        n = len(members)
        if n < 2:
            raise DataError(f"class {lab} has {n} member(s); need >= 2 to split")
        n_train = int(np.floor(spec.train_fraction * n + 0.5))
        n_train = min(max(n_train, 1), n - 1)
        order = rng.permutation(n)
        train += [members[i] for i in order[:n_train]]
        test += [members[i] for i in order[n_train:]]
    return Dataset.from_windows(train), Dataset.from_windows(test)


def stratified_subset(ds: Dataset, n: int, seed: int = 42) -> Dataset:
    """About ``n`` windows with the class proportions of ``ds``."""
    if n >= len(ds):
        return ds
    sub, _ = stratified_split(ds, SplitSpec(n / len(ds), seed))
    return sub


def check_disjoint(a: Dataset, b: Dataset) -> None:
    """Raise DataError if any window content appears in both datasets."""
    shared = a.content_hashes() & b.content_hashes()
    if shared:
        raise DataError(f"{len(shared)} window(s) shared between datasets (leakage)")


def merge(datasets: Iterable[Dataset]) -> Dataset:
    return Dataset.from_windows(w for d in datasets for w in d.windows)
