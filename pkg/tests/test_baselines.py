import numpy as np
import pytest

from relayguard.baselines import (
    BASELINE_CONFIG_VERSION,
    BASELINE_DEFAULTS,
    BaselineKind,
    BaselineModel,
    features,
    train_baseline,
)
from relayguard.dataset import Dataset, stratified_split
from relayguard.errors import DataError
from relayguard.waveform import Label


@pytest.fixture(scope="module")
def split(small_batch):
    return stratified_split(Dataset.from_windows(small_batch[0]))


def test_defaults_cover_every_kind():
    assert BASELINE_CONFIG_VERSION == 1
    assert set(BASELINE_DEFAULTS) == {k.value for k in BaselineKind}
    assert BASELINE_DEFAULTS["GRU"]["hidden"] == 64


def test_features_are_per_window_min_max(split):
    x = features(split[0].windows[:3])
    assert x.shape == (3, 32, 6)
    for i in range(3):
        assert x[i].min() == 0.0 and x[i].max() == 1.0


@pytest.mark.parametrize("kind", list(BaselineKind), ids=lambda k: k.value)
def test_each_baseline_fits_and_round_trips(kind, split, tmp_path):
    train, test = split
    overrides = {"epochs": 3} if kind.is_sequence else None
    m = train_baseline(kind, train, test if kind.is_sequence else None, seed=0, overrides=overrides)
    p = m.predict_proba(test.windows)
    assert p.shape == (len(test),)
    assert np.all((p >= 0) & (p <= 1))
    m.save(tmp_path / kind.value)
    back = BaselineModel.load(tmp_path / kind.value)
    np.testing.assert_allclose(back.predict_proba(test.windows), p, atol=1e-6)
    assert back.train_hashes == frozenset(train.content_hashes())
    assert back.kind is kind


def test_random_forest_learns_the_synthetic_task(split):
    train, test = split
    m = train_baseline(BaselineKind.RANDOM_FOREST, train, seed=0)
    acc = np.mean((m.predict_proba(test.windows) >= 0.5).astype(int) == test.labels)
    assert acc > 0.5 + 1e-9  # above the balanced majority rate


def test_net_training_is_seeded(split):
    train, test = split
    a = train_baseline("GRU", train, test, seed=3, overrides={"epochs": 2})
    b = train_baseline("GRU", train, test, seed=3, overrides={"epochs": 2})
    np.testing.assert_array_equal(a.predict_proba(test.windows), b.predict_proba(test.windows))


def test_single_class_is_rejected(split):
    faults = Dataset.from_windows(w for w in split[0].windows if w.label is Label.FAULT)
    with pytest.raises(DataError):
        train_baseline("KNN", faults)
