import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import accuracy_score, f1_score, precision_score, recall_score

from relayguard.dataset import Dataset
from relayguard.errors import ContractError, DataError
from relayguard.evaluate import (
    MAIN_COLUMNS,
    ConfusionMatrix,
    ConstantDetector,
    RandomDetector,
    ResultsStore,
    SleepDetector,
    bench_latency,
    check_no_leakage,
    cycles_at,
    detection_band,
    metrics,
    noise_seed,
    noise_table_rows,
    noisy_windows,
    run_complex_attack_eval,
    run_main_eval,
    run_noise_sweep,
    run_prompt_ablation,
    variant_table_rows,
    write_predictions,
    write_table,
)
from relayguard.textualize import BASELINE, V1, V3, TemplateId
from relayguard.waveform import Label

from conftest import random_window


def implied_confusion(tpr: Fraction, tnr: Fraction, acc: Fraction, total: int) -> ConfusionMatrix:
    """Solve acc = p tpr + (1 - p) tnr for the attack share p, then scale to ``total``."""
    p = (tnr - acc) / (tnr - tpr)
    pos = int(round(p * total))
    tp = int(round(tpr * pos))
    tn = int(round(tnr * (total - pos)))
    return ConfusionMatrix(tp, total - pos - tn, tn, pos - tp)


def test_implied_confusion_from_headline_rates():
    cm = implied_confusion(Fraction("0.9762"), Fraction(1), Fraction("0.9984"), 10_000)
    assert cm == ConfusionMatrix(tp=656, fp=0, tn=9328, fn=16)
    r = metrics(cm)
    assert round(r.detection_rate, 2) == 97.62
    assert round(r.accuracy, 2) == 99.84
    assert r.specificity == 100.0
    assert r.recall_macro == pytest.approx(98.81, abs=0.01)
    assert r.f1_macro == pytest.approx(99.36, abs=0.01)


@settings(max_examples=200, deadline=None)
@given(
    tp=st.integers(0, 200), fp=st.integers(0, 200), tn=st.integers(0, 200), fn=st.integers(0, 200)
)
def test_metrics_match_sklearn(tp, fp, tn, fn):
    cm = ConfusionMatrix(tp, fp, tn, fn)
    if cm.total == 0:
        with pytest.raises(DataError):
            metrics(cm)
        return
    y = np.array([1] * tp + [0] * fp + [0] * tn + [1] * fn)
    p = np.array([1] * tp + [1] * fp + [0] * tn + [0] * fn)
    r = metrics(cm)
    kw = dict(average="macro", zero_division=0, labels=[0, 1])
    assert r.accuracy == pytest.approx(100 * accuracy_score(y, p))
    assert r.precision_macro == pytest.approx(100 * precision_score(y, p, **kw))
    assert r.recall_macro == pytest.approx(100 * recall_score(y, p, **kw))
    assert r.f1_macro == pytest.approx(100 * f1_score(y, p, **kw))
    if tp + fn:
        assert r.detection_rate == pytest.approx(100 * tp / (tp + fn))
    else:
        assert "recall_attack" in r.undefined and r.detection_rate == 0


def test_confusion_from_predictions():
    cm = ConfusionMatrix.from_predictions([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
    assert cm == ConfusionMatrix(2, 1, 1, 1)
    with pytest.raises(DataError):
        ConfusionMatrix.from_predictions([1], [1, 0])
    with pytest.raises(DataError):
        ConfusionMatrix(-1, 0, 0, 0)


def test_report_row_uses_table_columns():
    row = metrics(ConfusionMatrix(1, 0, 1, 0)).row("X")
    assert list(row) == list(MAIN_COLUMNS)
    assert row["Accuracy (%)"] == "100.00"


def make_test(n=20, seed=0):
    rng = np.random.default_rng(seed)
    ws = [random_window(rng, Label.ATTACK if i % 2 else Label.FAULT, f"t{i}") for i in range(n)]
    return Dataset.from_windows(ws)


def test_constant_detectors_hit_known_points():
    test = make_test()
    rep, log = run_main_eval(ConstantDetector(Label.ATTACK), test)
    assert rep.detection_rate == 100 and rep.specificity == 0 and rep.accuracy == 50
    assert "precision_fault" in rep.undefined
    rep, _ = run_main_eval(ConstantDetector("FAULT"), test)
    assert rep.detection_rate == 0 and rep.specificity == 100
    assert len(log) == 20 and log[1].predicted == "ATTACK"


def test_random_detector_is_near_chance():
    test = make_test(400)
    rep, _ = run_main_eval(RandomDetector(0.5, seed=1), test)
    assert 40 < rep.accuracy < 60


def test_leakage_is_refused():
    test = make_test()
    det = ConstantDetector("FAULT")
    det.train_hashes = frozenset(list(test.content_hashes())[:1])
    with pytest.raises(DataError):
        run_main_eval(det, test)
    with pytest.raises(DataError):
        check_no_leakage(det, test)


def test_complex_eval_requires_attack_only():
    test = make_test()
    with pytest.raises(DataError):
        run_complex_attack_eval(ConstantDetector("ATTACK"), test)
    attacks = Dataset.from_windows(w for w in test.windows if w.label is Label.ATTACK)
    rate, log = run_complex_attack_eval(ConstantDetector("ATTACK"), attacks)
    assert rate == 100.0 and len(log) == 10


def test_noise_sweep_shares_noisy_copies():
    test = make_test()
    seen = {}

    class Recorder:
        train_hashes = frozenset()

        def __init__(self, name):
            self.name = name

        def predict_proba(self, windows):
            seen.setdefault(self.name, []).append([w.values.tobytes() for w in windows])
            return np.zeros(len(windows))

    table, seeds = run_noise_sweep({"a": Recorder("a"), "b": Recorder("b")}, test, (40, 30), base_seed=3)
    assert seen["a"] == seen["b"]
    assert set(table["a"]) == {40, 30} and table["a"][40] == 50.0
    assert seeds[40] == [noise_seed(3, 40, i) for i in range(20)]
    assert seeds[40] != seeds[30]
    again, _ = noisy_windows(test.windows, 40, 3)
    assert [w.values.tobytes() for w in again] == seen["a"][0]
    rows = noise_table_rows(table)
    assert rows[0] == {"Model": "a", "40 dB": "50.00", "30 dB": "50.00"}


def test_prompt_ablation_checks_template():
    test = make_test()

    class Tagged(ConstantDetector):
        def __init__(self, tid):
            super().__init__("ATTACK")
            self.template_id = tid

    reports = run_prompt_ablation(lambda tpl: Tagged(tpl.template_id), test, [BASELINE, V1, V3])
    assert list(reports) == [TemplateId.BASELINE, TemplateId.V1_PHRASING, TemplateId.V3_STRIPPED]
    assert detection_band(reports) == 0
    rows = variant_table_rows(reports)
    assert rows[0]["Metric"] == "DetectedAttacks (%)" and rows[0]["Variant 3"] == "100.00"
    with pytest.raises(ContractError):
        run_prompt_ablation(lambda tpl: Tagged(TemplateId.BASELINE), test, [V1])


def test_cycles_conversion():
    assert cycles_at(5.39) == pytest.approx(0.3234, abs=1e-12)
    assert f"{cycles_at(5.39):.2f}" == "0.32"
    assert cycles_at(1000 / 60) == pytest.approx(1.0)


def test_sleep_stub_calibrates_the_harness():
    rep = bench_latency(SleepDetector(2.0), list(range(50)), warmup=5)
    assert rep.mean_ms == pytest.approx(2.0, abs=0.5)
    assert rep.p95_ms >= rep.mean_ms
    assert rep.sample_count == 50
    assert rep.cycles_at_60hz == pytest.approx(cycles_at(rep.mean_ms))
    assert "trip budget 2-3 cycles" in rep.summary()


def test_prepare_stage_is_timed_separately():
    rep = bench_latency(lambda s: s, list(range(10)), warmup=0, prepare_fn=SleepDetector(1.0))
    assert rep.prepare_mean_ms == pytest.approx(1.0, abs=0.5)
    assert rep.mean_ms < 0.5
    with pytest.raises(DataError):
        bench_latency(lambda s: s, [])


def test_results_store_is_resumable(tmp_path):
    store = ResultsStore(tmp_path / "r" / "results.jsonl")
    calls = []

    def cell():
        calls.append(1)
        return {"acc": 1.0}

    assert store.run_cell("main/x", cell) == {"acc": 1.0}
    assert store.run_cell("main/x", cell) == {"acc": 1.0}
    assert len(calls) == 1
    with pytest.raises(DataError):
        store.put("main/x", {"acc": 0.0})
    reopened = ResultsStore(tmp_path / "r" / "results.jsonl")
    assert reopened.keys() == {"main/x"}
    assert json.loads((tmp_path / "r" / "results.jsonl").read_text())["key"] == "main/x"


def test_tables_carry_header(tmp_path):
    p = tmp_path / "t.csv"
    write_table([{"a": 1, "b": 2}], p, header="config abc")
    assert p.read_text().splitlines() == ["# config abc", "a,b", "1,2"]
    _, log = run_main_eval(ConstantDetector("FAULT"), make_test(4))
    write_predictions(log, tmp_path / "p.csv")
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "scenario_id,label,p_attack,predicted"
