import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from relayguard.classifier import ModelBundle
from relayguard.errors import CapabilityError, DataError
from relayguard.explain import (
    AttentionTensor,
    attention_from_scores,
    explain,
    export_heatmap,
    extract_attention,
    map_from_csv,
    project_to_cells,
    read_map_csv,
    read_map_fingerprint,
    softmax,
    token_importance,
    write_map_csv,
)
from relayguard.textualize import align_tokens_to_cells, textualize, tokenize

from conftest import random_window


@pytest.fixture(scope="module")
def bundle(reference_asset):
    return ModelBundle(
        model=reference_asset.new_model().eval(),
        tokenizer=reference_asset.tokenizer,
        kind="distilbert",
        encoder_asset_id=reference_asset.asset_id,
        tokenizer_contract_id=reference_asset.contract_id,
        train_config_fingerprint="untrained",
    )


@pytest.fixture(scope="module")
def prompt(reference_asset):
    w = random_window(np.random.default_rng(9), sid="x1")
    doc = textualize(w)
    sample = tokenize(doc, reference_asset.tokenizer)
    return w, doc, sample, align_tokens_to_cells(sample, doc)


def random_attention(rng, layers=2, heads=3, n=7):
    return AttentionTensor(softmax(rng.normal(size=(layers, heads, n, n)) * 3))


def test_three_token_softmax_hand_oracle():
    p = softmax(np.log(np.array([1.0, 2.0, 4.0])))
    np.testing.assert_allclose(p, [1 / 7, 2 / 7, 4 / 7], atol=1e-9)
    q = np.array([[1.0, 0.0]])
    k = np.array([[0.0, 0.0], [math.sqrt(2) * math.log(2), 0.0], [math.sqrt(2) * math.log(4), 0.0]])
    np.testing.assert_allclose(attention_from_scores(q, k)[0], [1 / 7, 2 / 7, 4 / 7], atol=1e-9)


def test_softmax_is_shift_invariant_and_stable():
    x = np.array([1000.0, 1001.0, 1002.0])
    np.testing.assert_allclose(softmax(x), softmax(x - 1000), atol=1e-15)
    assert np.isfinite(softmax(x)).all()


def test_tensor_validation():
    with pytest.raises(DataError):
        AttentionTensor(np.full((1, 1, 2, 2), 0.4))
    with pytest.raises(DataError):
        AttentionTensor(np.zeros((2, 2, 2)))
    with pytest.raises(DataError):
        AttentionTensor(np.array([[[[1.5, -0.5], [0.5, 0.5]]]]))


def brute_received(w, keep):
    L, H, n, _ = w.shape
    raw = [sum(w[l, h, i, j] for l in range(L) for h in range(H) for i in range(n)) / (L * H * n) for j in range(n)]
    raw = [r if keep[j] else 0.0 for j, r in enumerate(raw)]
    m = max(raw)
    return [r / m for r in raw]


def brute_given(w, keep):
    L, H, n, _ = w.shape
    raw = []
    for i in range(n):
        tot = sum(w[l, h, i, j] for l in range(L) for h in range(H) for j in range(n) if keep[j])
        raw.append(tot / (L * H) if keep[i] else 0.0)
    m = max(raw)
    return [r / m for r in raw]


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6), n=st.integers(2, 9))
def test_token_importance_matches_loops(seed, n):
    rng = np.random.default_rng(seed)
    t = random_attention(rng, n=n)
    keep = rng.random(n) < 0.7
    keep[0] = True
    np.testing.assert_allclose(token_importance(t, keep, "received"), brute_received(t.weights, keep), atol=1e-12)
    np.testing.assert_allclose(token_importance(t, keep, "given"), brute_given(t.weights, keep), atol=1e-12)


def test_token_importance_errors():
    t = random_attention(np.random.default_rng(0), n=3)
    with pytest.raises(DataError):
        token_importance(t, [False, False, False])
    with pytest.raises(DataError):
        token_importance(t, [True, True])
    with pytest.raises(DataError):
        token_importance(t, [True] * 3, mode="rollout")


def test_projection_conservation_and_coverage():
    rng = np.random.default_rng(1)
    n = 250
    scores = rng.random(n)
    cells = [(t, c) for t in range(32) for c in range(6)]
    align = [cells[i % 192] if i % 5 else None for i in range(n)]
    amap = project_to_cells(scores, align)
    mapped = sum(s for s, a in zip(scores, align) if a is not None)
    assert (amap.cell_scores * amap.token_counts).sum() * amap.scale == pytest.approx(mapped, abs=1e-9)
    assert amap.token_counts.sum() == sum(a is not None for a in align)
    assert amap.cell_scores.max() == 1.0
    # brute force per-cell mean
    for cell in [(0, 0), (5, 3), (31, 5)]:
        vals = [s for s, a in zip(scores, align) if a == cell]
        expected = np.mean(vals) / amap.scale if vals else 0.0
        assert amap.cell_scores[cell] == pytest.approx(expected, abs=1e-12)


def test_uncovered_cells_are_listed():
    align = [(0, 0), None, (1, 2)]
    amap = project_to_cells(np.array([0.5, 1.0, 0.25]), align)
    assert len(amap.uncovered) == 190
    assert amap.cell_scores[0, 0] == 1.0 and amap.cell_scores[1, 2] == 0.5
    with pytest.raises(DataError):
        project_to_cells(np.ones(2), align)


def test_extracted_attention_rows_sum_to_one(bundle, prompt):
    _, _, sample, _ = prompt
    t = extract_attention(bundle, sample)
    assert t.weights.shape == (2, 4, sample.n_tokens, sample.n_tokens)
    assert np.abs(t.weights.sum(axis=-1) - 1).max() < 1e-6


def test_explain_covers_all_192_cells(bundle, prompt):
    _, _, sample, align = prompt
    amap = explain(bundle, sample, align)
    assert amap.cell_scores.shape == (32, 6)
    assert (amap.token_counts == 1).all() and not amap.uncovered
    keep = [m and not s for m, s in zip(sample.attention_mask, sample.special_mask)]
    mapped = sum(s for s, a in zip(amap.token_scores, align) if a is not None)
    assert (amap.cell_scores * amap.token_counts).sum() * amap.scale == pytest.approx(mapped, abs=1e-9)
    assert amap.token_scores[0] == 0.0 and amap.token_scores[-1] == 0.0
    assert sum(keep) == sample.n_tokens - 2
    one = explain(bundle, sample, align, layers=[1])
    assert one.aggregation_id == "received:layers=1"
    assert len(amap.top_cells(0.1)) == 19


def test_non_eager_attention_is_refused(bundle, prompt):
    _, _, sample, _ = prompt
    bundle.model.config._attn_implementation = "sdpa"
    try:
        with pytest.raises(CapabilityError):
            extract_attention(bundle, sample)
    finally:
        bundle.model.config._attn_implementation = "eager"


def test_map_csv_round_trip(tmp_path, bundle, prompt):
    _, _, sample, align = prompt
    amap = explain(bundle, sample, align)
    p = tmp_path / "m.csv"
    write_map_csv(amap, p, fingerprint="abc123")
    assert read_map_fingerprint(p) == "abc123"
    np.testing.assert_array_equal(read_map_csv(p), amap.cell_scores)
    np.testing.assert_array_equal(map_from_csv(p).cell_scores, amap.cell_scores)
    lines = p.read_text().splitlines()
    assert lines[1] == "time_index,channel,score" and len(lines) == 2 + 192


@pytest.mark.parametrize("ext", ["png", "svg"])
def test_heatmap_bytes_are_reproducible(tmp_path, bundle, prompt, ext):
    w, _, sample, align = prompt
    amap = explain(bundle, sample, align)
    a, ca = export_heatmap(amap, w, tmp_path / f"a.{ext}", fingerprint="fp1")
    b, _ = export_heatmap(amap, w, tmp_path / f"b.{ext}", fingerprint="fp1")
    assert a.read_bytes() == b.read_bytes()
    assert ca.exists()
    c, none = export_heatmap(map_from_csv(ca), w, tmp_path / f"c.{ext}", fingerprint="fp1", sidecar=False)
    assert none is None
    assert c.read_bytes() == a.read_bytes()
    with pytest.raises(DataError):
        export_heatmap(amap, w, tmp_path / "x.jpg")
