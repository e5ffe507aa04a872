"""Metric suite, evaluation campaigns, latency benchmark and a keyed results store.

Positive class is ATTACK everywhere; the detection rate is attack recall.
A detector is anything with ``predict_proba(windows) -> attack probabilities``.
"""

from __future__ import annotations

import csv
import json
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .attacks import NoiseSpec, add_awgn
from .dataset import Dataset
from .errors import ConfigError, ContractError, DataError
from .textualize import PromptTemplate, TemplateId
from .waveform import Label, MeasurementWindow

NOMINAL_FREQUENCY = 60.0
TRIP_BUDGET_CYCLES = (2.0, 3.0)
DEFAULT_SNRS = (45.0, 40.0, 35.0, 30.0)

MAIN_COLUMNS = (
    "Model",
    "Cyberattack Detection Rate (%)",
    "Accuracy (%)",
    "Precision (%)",
    "Recall (%)",
    "Specificity (%)",
    "F1-Score (%)",
)
COMPLEX_COLUMNS = ("Model", "Detected Complex Cyberattacks (%)")
VARIANT_NAMES = {
    TemplateId.BASELINE: "Baseline",
    TemplateId.V1_PHRASING: "Variant 1",
    TemplateId.V2_STRUCTURE: "Variant 2",
    TemplateId.V3_STRIPPED: "Variant 3",
}


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise DataError("confusion counts must be >= 0")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, y_true: Sequence[int], y_pred: Sequence[int]) -> "ConfusionMatrix":
        y = np.asarray(y_true, dtype=int)
        p = np.asarray(y_pred, dtype=int)
        if y.shape != p.shape:
            raise DataError("label and prediction lengths differ")
        return cls(
            int(np.sum((p == 1) & (y == 1))),
            int(np.sum((p == 1) & (y == 0))),
            int(np.sum((p == 0) & (y == 0))),
            int(np.sum((p == 0) & (y == 1))),
        )


@dataclass(frozen=True)
class MetricsReport:
    detection_rate: float
    accuracy: float
    precision_macro: float
    recall_macro: float
    specificity: float
    f1_macro: float
    cm: ConfusionMatrix
    undefined: tuple = ()  # per-class quantities with a zero denominator, reported as 0
    meta: dict = field(default_factory=dict)

    def row(self, model: str) -> dict:
        vals = (
            self.detection_rate,
            self.accuracy,
            self.precision_macro,
            self.recall_macro,
            self.specificity,
            self.f1_macro,
        )
        return {"Model": model, **{c: f"{v:.2f}" for c, v in zip(MAIN_COLUMNS[1:], vals)}}

    def to_dict(self) -> dict:
        d = asdict(self)
        d["undefined"] = list(self.undefined)
        return d


def _ratio(num: int, den: int, name: str, flags: list) -> float:
    if den == 0:
        flags.append(name)
        return 0.0
    return num / den


def metrics(cm: ConfusionMatrix, meta: dict | None = None) -> MetricsReport:
    if cm.total == 0:
        raise DataError("empty confusion matrix")
    flags: list[str] = []
    tpr = _ratio(cm.tp, cm.tp + cm.fn, "recall_attack", flags)
    tnr = _ratio(cm.tn, cm.tn + cm.fp, "recall_fault", flags)
    ppv = _ratio(cm.tp, cm.tp + cm.fp, "precision_attack", flags)
    npv = _ratio(cm.tn, cm.tn + cm.fn, "precision_fault", flags)
    f1_att = _ratio(2 * cm.tp, 2 * cm.tp + cm.fp + cm.fn, "f1_attack", flags)
    f1_flt = _ratio(2 * cm.tn, 2 * cm.tn + cm.fn + cm.fp, "f1_fault", flags)
    return MetricsReport(
        detection_rate=100 * tpr,
        accuracy=100 * (cm.tp + cm.tn) / cm.total,
        precision_macro=100 * (ppv + npv) / 2,
        recall_macro=100 * (tpr + tnr) / 2,
        specificity=100 * tnr,
        f1_macro=100 * (f1_att + f1_flt) / 2,
        cm=cm,
        undefined=tuple(flags),
        meta=dict(meta or {}),
    )


# -- stub detectors for harness checks ------------------------------------------


class ConstantDetector:
    def __init__(self, label: Label | str):
        self.label = Label(label)
        self.train_hashes: frozenset = frozenset()

    def predict_proba(self, windows: Sequence[MeasurementWindow]) -> np.ndarray:
        return np.full(len(windows), 1.0 if self.label is Label.ATTACK else 0.0)


class RandomDetector:
    """Predicts ATTACK with probability ``p_attack``, independent of the input."""

    def __init__(self, p_attack: float = 0.5, seed: int = 0):
        self.p_attack = p_attack
        self.rng = np.random.default_rng(seed)
        self.train_hashes: frozenset = frozenset()

    def predict_proba(self, windows: Sequence[MeasurementWindow]) -> np.ndarray:
        return (self.rng.random(len(windows)) < self.p_attack).astype(float)


class SleepDetector:
    """Blocks for a fixed time per call; used to calibrate the latency harness."""

    def __init__(self, delay_ms: float):
        self.delay_ms = delay_ms

    def __call__(self, sample) -> float:
        end = time.perf_counter() + self.delay_ms / 1000
        while time.perf_counter() < end:
            pass
        return 0.0


# -- campaigns ------------------------------------------------------------------


@dataclass(frozen=True)
class Prediction:
    scenario_id: str
    label: str
    p_attack: float
    predicted: str


def _predict(model, windows: Sequence[MeasurementWindow], threshold: float) -> tuple[np.ndarray, list[Prediction]]:
    probs = np.asarray(model.predict_proba(list(windows)), dtype=float)
    pred = (probs >= threshold).astype(int)
    log = [
        Prediction(w.scenario_id, w.label.value, float(p), (Label.ATTACK if y else Label.FAULT).value)
        for w, p, y in zip(windows, probs, pred)
    ]
    return pred, log


def check_no_leakage(model, ds: Dataset) -> None:
    shared = set(getattr(model, "train_hashes", ())) & ds.content_hashes()
    if shared:
        raise DataError(f"{len(shared)} evaluation window(s) were seen in training; refusing to evaluate")


def run_main_eval(model, test: Dataset, threshold: float = 0.5) -> tuple[MetricsReport, list[Prediction]]:
    """Metrics on a held-out test set plus the per-sample prediction log."""
    if len(test) == 0:
        raise DataError("empty test set")
    check_no_leakage(model, test)
    pred, log = _predict(model, test.windows, threshold)
    cm = ConfusionMatrix.from_predictions(test.labels, pred)
    return metrics(cm, {"campaign": "main", "test_fingerprint": test.fingerprint, "n": len(test)}), log


def run_complex_attack_eval(model, holdout: Dataset, threshold: float = 0.5) -> tuple[float, list[Prediction]]:
    """Detection rate (%) on an attack-only time-stamp + FDIA holdout."""
    if len(holdout) == 0:
        raise DataError("empty holdout")
    if any(w.label is not Label.ATTACK for w in holdout.windows):
        raise DataError("complex-attack holdout must contain only attack windows")
    check_no_leakage(model, holdout)
    pred, log = _predict(model, holdout.windows, threshold)
    return 100.0 * float(pred.mean()), log


def noise_seed(base_seed: int, snr_db: float, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, int(round(snr_db * 1000)), index]).generate_state(1)[0])


def noisy_windows(windows: Sequence[MeasurementWindow], snr_db: float, base_seed: int = 0) -> tuple[list, list[int]]:
    seeds = [noise_seed(base_seed, snr_db, i) for i in range(len(windows))]
    return [add_awgn(w, NoiseSpec(snr_db, s)) for w, s in zip(windows, seeds)], seeds


def run_noise_sweep(
    models: Mapping[str, object],
    test: Dataset,
    snr_list: Sequence[float] = DEFAULT_SNRS,
    base_seed: int = 0,
    threshold: float = 0.5,
) -> tuple[dict[str, dict[float, float]], dict[float, list[int]]]:
    """Accuracy (%) per model and SNR; noise goes onto raw windows before any preprocessing.

    Every model sees the same noisy copies. Returns the table and the per-window
    noise seeds for each SNR.
    """
    for m in models.values():
        check_no_leakage(m, test)
    y = test.labels
    table: dict[str, dict[float, float]] = {name: {} for name in models}
    seeds_log = {}
    for snr in snr_list:
        noisy, seeds = noisy_windows(test.windows, snr, base_seed)
        seeds_log[snr] = seeds
        for name, m in models.items():
            pred, _ = _predict(m, noisy, threshold)
            table[name][snr] = 100.0 * float(np.mean(pred == y))
    return table, seeds_log


def run_prompt_ablation(
    train_fn: Callable[[PromptTemplate], object],
    test: Dataset,
    templates: Iterable[PromptTemplate],
    threshold: float = 0.5,
) -> dict[TemplateId, MetricsReport]:
    """Fine-tune one model per template with ``train_fn`` and evaluate each on ``test``."""
    out = {}
    for tpl in templates:
        model = train_fn(tpl)
        tid = getattr(model, "template_id", tpl.template_id)
        if tid != tpl.template_id:
            raise ContractError(f"model was trained on {tid}, asked to evaluate {tpl.template_id}")
        report, _ = run_main_eval(model, test, threshold)
        out[tpl.template_id] = report
    return out


def detection_band(reports: Mapping[TemplateId, MetricsReport]) -> float:
    rates = [r.detection_rate for r in reports.values()]
    return max(rates) - min(rates)


# -- latency ----------------------------------------------------------------------


def cycles_at(mean_ms: float, frequency: float = NOMINAL_FREQUENCY) -> float:
    return mean_ms * frequency / 1000.0


@dataclass(frozen=True)
class LatencyReport:
    mean_ms: float
    p95_ms: float
    cycles_at_60hz: float
    sample_count: int
    hardware: str
    prepare_mean_ms: float | None = None
    budget_cycles: tuple = TRIP_BUDGET_CYCLES

    def summary(self) -> str:
        lo, hi = self.budget_cycles
        return (
            f"mean {self.mean_ms:.2f} ms, p95 {self.p95_ms:.2f} ms, "
            f"{self.cycles_at_60hz:.2f} cycles at 60 Hz (trip budget {lo:g}-{hi:g} cycles)"
        )

    def row(self) -> dict:
        d = asdict(self)
        d["budget_cycles"] = "-".join(f"{b:g}" for b in self.budget_cycles)
        return d


def bench_latency(
    predict_fn: Callable,
    samples: Sequence,
    warmup: int = 10,
    prepare_fn: Callable | None = None,
) -> LatencyReport:
    """Batch-1 timing of ``predict_fn`` per sample after ``warmup`` untimed calls.

    With ``prepare_fn`` (e.g. textualize + tokenize) that stage is timed
    separately and its output is what ``predict_fn`` receives.
    """
    if not len(samples):
        raise DataError("no samples to time")
    inputs = list(samples)
    for s in inputs[: max(warmup, 0)]:
        predict_fn(prepare_fn(s) if prepare_fn else s)
    times, prep = [], []
    for s in inputs:
        if prepare_fn is not None:
            t0 = time.perf_counter()
            s = prepare_fn(s)
            prep.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        predict_fn(s)
        times.append(time.perf_counter() - t0)
    ms = np.asarray(times) * 1000
    mean = float(ms.mean())
    hw = f"{platform.machine()} {platform.processor() or platform.system()}".strip()
    return LatencyReport(
        mean_ms=mean,
        p95_ms=max(float(np.percentile(ms, 95)), mean) if len(ms) > 1 else mean,
        cycles_at_60hz=cycles_at(mean),
        sample_count=len(ms),
        hardware=hw,
        prepare_mean_ms=float(np.mean(prep) * 1000) if prep else None,
    )


# -- results store ----------------------------------------------------------------


class ResultsStore:
    """Append-only JSON-lines store keyed by cell id; duplicate keys are rejected."""

    def __init__(self, path: str | Path):
        from filelock import FileLock

        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.lock = FileLock(str(self.path) + ".lock")

    def _load(self) -> dict[str, dict]:
        if not self.path.exists():
            return {}
        out = {}
        with open(self.path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    out[rec["key"]] = rec["value"]
        return out

    def keys(self) -> set[str]:
        return set(self._load())

    def get(self, key: str) -> dict | None:
        return self._load().get(key)

    def put(self, key: str, value: dict) -> None:
        with self.lock:
            if key in self._load():
                raise DataError(f"result {key!r} already recorded")
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"key": key, "value": value}, sort_keys=True, default=str) + "\n")

    def run_cell(self, key: str, fn: Callable[[], dict]) -> dict:
        """Return the stored value for ``key``, computing and recording it if missing."""
        prev = self.get(key)
        if prev is not None:
            return prev
        value = fn()
        self.put(key, value)
        return value


def write_table(rows: Sequence[Mapping], path: str | Path, columns: Sequence[str] | None = None, header: str | None = None) -> None:
    """CSV table; ``header`` (e.g. a config fingerprint) goes on a leading comment line."""
    if not rows and not columns:
        raise ConfigError("no rows and no columns")
    cols = list(columns or rows[0].keys())
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if header:
            fh.write(f"# {header}\n")
        wr = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        wr.writeheader()
        for r in rows:
            wr.writerow(r)


def write_predictions(log: Sequence[Prediction], path: str | Path, header: str | None = None) -> None:
    write_table([asdict(p) for p in log], path, ["scenario_id", "label", "p_attack", "predicted"], header)


def noise_table_rows(table: Mapping[str, Mapping[float, float]]) -> list[dict]:
    return [{"Model": m, **{f"{snr:g} dB": f"{acc:.2f}" for snr, acc in cells.items()}} for m, cells in table.items()]


def variant_table_rows(reports: Mapping[TemplateId, MetricsReport]) -> list[dict]:
    names = [VARIANT_NAMES[t] for t in reports]
    fields = (
        ("DetectedAttacks (%)", "detection_rate"),
        ("Accuracy (%)", "accuracy"),
        ("Precision (%)", "precision_macro"),
        ("Recall (%)", "recall_macro"),
        ("Specificity (%)", "specificity"),
        ("F1-Score (%)", "f1_macro"),
    )
    return [
        {"Metric": label, **{n: f"{getattr(r, attr):.2f}" for n, r in zip(names, reports.values())}}
        for label, attr in fields
    ]
