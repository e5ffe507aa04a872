"""Self-attention readout, token importance and projection onto the (32, 6) grid."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import CapabilityError, DataError
from .textualize import TokenizedSample
from .waveform import CHANNELS, N_CHANNELS, WINDOW_SAMPLES, MeasurementWindow

ROW_TOLERANCE = 1e-6


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def attention_from_scores(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention weights for one head, rows over queries."""
    q = np.asarray(q, dtype=float)
    k = np.asarray(k, dtype=float)
    return softmax(q @ k.T / np.sqrt(q.shape[-1]))


@dataclass(frozen=True)
class AttentionTensor:
    """Weights indexed [layer, head, query, key]; each query row sums to 1."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 4 or w.shape[2] != w.shape[3]:
            raise DataError(f"attention must be (layers, heads, n, n), got {w.shape}")
        if w.size and (w.min() < -ROW_TOLERANCE or w.max() > 1 + ROW_TOLERANCE):
            raise DataError("attention weights outside [0, 1]")
        err = np.abs(w.sum(axis=-1) - 1.0).max() if w.size else 0.0
        if err > ROW_TOLERANCE:
            raise DataError(f"attention rows do not sum to 1 (max error {err:.2e})")
        object.__setattr__(self, "weights", w)

    @property
    def n_layers(self) -> int:
        return self.weights.shape[0]

    @property
    def n_heads(self) -> int:
        return self.weights.shape[1]

    @property
    def n_tokens(self) -> int:
        return self.weights.shape[2]

    def layers(self, which: Sequence[int] | None) -> "AttentionTensor":
        return self if which is None else AttentionTensor(self.weights[list(which)])


@dataclass(frozen=True)
class AttentionMap:
    cell_scores: np.ndarray  # (32, 6), max 1 unless all zero
    token_scores: np.ndarray
    aggregation_id: str
    token_counts: np.ndarray  # tokens mapped to each cell
    scale: float  # raw cell means = cell_scores * scale
    uncovered: tuple = field(default_factory=tuple)

    def top_cells(self, fraction: float = 0.1) -> list[tuple[int, int]]:
        """Cells in the top ``fraction`` by score, highest first."""
        flat = self.cell_scores.ravel()
        k = max(1, int(round(fraction * flat.size)))
        idx = np.argsort(-flat, kind="stable")[:k]
        return [divmod(int(i), N_CHANNELS) for i in idx]


@torch.no_grad()
def extract_attention(model, sample: TokenizedSample) -> AttentionTensor:
    """Per-layer, per-head attention weights of the encoder for one sample."""
    model._check(sample)
    net = model.model
    impl = getattr(net.config, "_attn_implementation", "eager")
    if impl not in (None, "eager"):
        raise CapabilityError(f"attention implementation {impl!r} does not expose weights")
    ids = torch.tensor([sample.token_ids])
    mask = torch.tensor([sample.attention_mask])
    net.eval()
    out = net(input_ids=ids, attention_mask=mask, output_attentions=True)
    att = getattr(out, "attentions", None)
    if not att or any(a is None for a in att):
        raise CapabilityError("model does not return attention weights")
    return AttentionTensor(torch.stack([a[0] for a in att]).double().numpy())


def token_importance(t: AttentionTensor, mask: Sequence[bool], mode: str = "received") -> np.ndarray:
    """Token scores averaged over layers and heads, max-normalized over ``mask``.

    ``received`` averages the weight each key column gets over all query rows.
    ``given`` sums, per query row, the weight it puts on unmasked keys.
    Masked positions score exactly 0.
    """
    keep = np.asarray(mask, dtype=bool)
    if keep.shape != (t.n_tokens,):
        raise DataError(f"mask has {keep.size} entries for {t.n_tokens} tokens")
    if not keep.any():
        raise DataError("every token is masked")
    w = t.weights
    if mode == "received":
        raw = w.mean(axis=2).mean(axis=(0, 1))
    elif mode == "given":
        raw = w[..., keep].sum(axis=-1).mean(axis=(0, 1))
    else:
        raise DataError(f"unknown aggregation mode {mode!r}")
    scores = np.where(keep, raw, 0.0)
    peak = scores.max()
    return scores / peak if peak > 0 else scores


def project_to_cells(
    token_scores: np.ndarray, alignment: Sequence[tuple[int, int] | None], aggregation_id: str = "received"
) -> AttentionMap:
    """Average token scores per measurement cell; cells without tokens get 0."""
    scores = np.asarray(token_scores, dtype=float)
    if len(alignment) != len(scores):
        raise DataError(f"alignment has {len(alignment)} entries for {len(scores)} tokens")
    total = np.zeros((WINDOW_SAMPLES, N_CHANNELS))
    counts = np.zeros((WINDOW_SAMPLES, N_CHANNELS), dtype=int)
    for s, cell in zip(scores, alignment):
        if cell is not None:
            total[cell] += s
            counts[cell] += 1
    means = np.divide(total, counts, out=np.zeros_like(total), where=counts > 0)
    peak = means.max()
    scale = float(peak) if peak > 0 else 1.0
    uncovered = tuple((int(i), int(j)) for i, j in zip(*np.nonzero(counts == 0)))
    return AttentionMap(means / scale, scores, aggregation_id, counts, scale, uncovered)


def explain(
    model, sample: TokenizedSample, alignment, mode: str = "received", layers: Sequence[int] | None = None
) -> AttentionMap:
    """Attention map for one sample; special and padding tokens are excluded."""
    att = extract_attention(model, sample).layers(layers)
    keep = [bool(m) and not sp for m, sp in zip(sample.attention_mask, sample.special_mask)]
    tag = mode if layers is None else f"{mode}:layers={','.join(map(str, layers))}"
    return project_to_cells(token_importance(att, keep, mode), alignment, tag)


def write_map_csv(amap: AttentionMap, path: str | Path, fingerprint: str | None = None) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        if fingerprint:
            fh.write(f"# fingerprint={fingerprint} aggregation={amap.aggregation_id}\n")
        wr = csv.writer(fh)
        wr.writerow(["time_index", "channel", "score"])
        for t in range(WINDOW_SAMPLES):
            for c in range(N_CHANNELS):
                wr.writerow([t, CHANNELS[c], repr(float(amap.cell_scores[t, c]))])


def read_map_csv(path: str | Path) -> np.ndarray:
    out = np.zeros((WINDOW_SAMPLES, N_CHANNELS))
    with open(path, newline="", encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    for row in csv.DictReader(lines):
        out[int(row["time_index"]), CHANNELS.index(row["channel"])] = float(row["score"])
    return out


def read_map_fingerprint(path: str | Path) -> str | None:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith("# fingerprint="):
        return first[len("# fingerprint=") :].split()[0]
    return None


def map_from_csv(path: str | Path) -> AttentionMap:
    """A map rebuilt from its CSV sidecar; token-level detail is not stored there."""
    scores = read_map_csv(path)
    return AttentionMap(scores, np.zeros(0), "stored", np.ones_like(scores, dtype=int), 1.0)


HEATMAP_SIZE = (8.0, 6.0)  # inches
HEATMAP_DPI = 100


def export_heatmap(
    amap: AttentionMap,
    window: MeasurementWindow,
    path: str | Path,
    size: tuple[float, float] = HEATMAP_SIZE,
    dpi: int = HEATMAP_DPI,
    fingerprint: str | None = None,
    sidecar: bool = True,
) -> tuple[Path, Path | None]:
    """Draw the six waveforms over the cell scores; writes the image and a CSV sidecar.

    Output bytes depend only on the arguments.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "relayguard"  # stable element ids

    p = Path(path)
    fmt = p.suffix.lstrip(".").lower()
    if fmt not in ("png", "svg"):
        raise DataError(f"heatmap must be .png or .svg, got {p.name}")
    x = window.values
    fig, axes = plt.subplots(N_CHANNELS, 1, figsize=size, dpi=dpi, sharex=True)
    t = np.arange(WINDOW_SAMPLES)
    for c, ax in enumerate(axes):
        lo, hi = float(x[:, c].min()), float(x[:, c].max())
        if hi == lo:
            lo, hi = lo - 1, hi + 1
        ax.imshow(
            amap.cell_scores[:, c][None, :],
            aspect="auto",
            cmap="Reds",
            vmin=0.0,
            vmax=1.0,
            extent=(-0.5, WINDOW_SAMPLES - 0.5, lo, hi),
            origin="lower",
            interpolation="nearest",
        )
        ax.plot(t, x[:, c], color="black", linewidth=1.0)
        ax.set_ylim(lo, hi)
        ax.set_ylabel(CHANNELS[c], rotation=0, labelpad=18)
        ax.set_yticks([])
    axes[-1].set_xlabel("sample")
    axes[0].set_title(f"{window.scenario_id} ({window.label.value})")
    fig.tight_layout()
    meta = {"Date": None} if fmt == "svg" else {"Software": None}
    if fingerprint:
        meta["Description"] = f"fingerprint={fingerprint}"
    fig.savefig(p, format=fmt, dpi=dpi, metadata=meta)
    plt.close(fig)
    if not sidecar:
        return p, None
    csv_path = p.with_suffix(".csv")
    write_map_csv(amap, csv_path, fingerprint)
    return p, csv_path
