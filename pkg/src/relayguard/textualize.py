"""Turn measurement windows into structured text prompts and token sequences."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .errors import CapabilityError, ConfigError, DataError, TokenBudgetError
from .waveform import N_CHANNELS, WINDOW_SAMPLES, Label, MeasurementWindow

MAX_TOKENS = 512
DELIMITER = ", "
_Q = Decimal("0.001")


class TemplateId(str, Enum):
    BASELINE = "BASELINE"
    V1_PHRASING = "V1_PHRASING"
    V2_STRUCTURE = "V2_STRUCTURE"
    V3_STRIPPED = "V3_STRIPPED"

    @classmethod
    def parse(cls, name: str) -> "TemplateId":
        aliases = {"V1": cls.V1_PHRASING, "V2": cls.V2_STRUCTURE, "V3": cls.V3_STRIPPED}
        key = name.strip().upper()
        return aliases.get(key) or cls(key)


_SIDE = ("input", "input", "input", "output", "output", "output")
_PHASE = ("A", "B", "C", "A", "B", "C")


def _baseline_header(c: int) -> str:
    return (
        f"Transformer Differential Relay's current measurement vector of phase {_PHASE[c]} "
        f"on transformer {_SIDE[c]} side:"
    )


def _v1_header(c: int) -> str:
    return f"Differential relay phase {_PHASE[c]} current measurements at transformer {_SIDE[c]} side:"


@dataclass(frozen=True)
class PromptTemplate:
    template_id: TemplateId
    header_texts: tuple[str, ...]  # 6 per-vector headers, or 1 preamble for V3
    channel_order: tuple[int, ...]

    def __post_init__(self):
        if sorted(self.channel_order) != list(range(N_CHANNELS)):
            raise ConfigError("channel_order must be a permutation of 0..5")
        if len(self.header_texts) not in (1, N_CHANNELS):
            raise ConfigError("header_texts needs 1 or 6 entries")


BASELINE = PromptTemplate(
    TemplateId.BASELINE, tuple(_baseline_header(c) for c in range(6)), (0, 1, 2, 3, 4, 5)
)
V1 = PromptTemplate(TemplateId.V1_PHRASING, tuple(_v1_header(c) for c in range(6)), (0, 1, 2, 3, 4, 5))
V2 = PromptTemplate(
    TemplateId.V2_STRUCTURE, tuple(_baseline_header(c) for c in range(6)), (0, 3, 1, 4, 2, 5)
)
V3 = PromptTemplate(
    TemplateId.V3_STRIPPED,
    ("Transformer Differential Relay's current measurement vectors are:",),
    (0, 1, 2, 3, 4, 5),
)
TEMPLATES = {t.template_id: t for t in (BASELINE, V1, V2, V3)}


def get_template(name: str | TemplateId) -> PromptTemplate:
    tid = name if isinstance(name, TemplateId) else TemplateId.parse(name)
    return TEMPLATES[tid]


@dataclass(frozen=True)
class PromptDocument:
    text: str
    template_id: TemplateId
    value_spans: tuple[tuple[int, int, int, int], ...]  # (start, end, time, channel)
    scenario_id: str = ""
    label: Label | None = None


@dataclass(frozen=True)
class TokenizedSample:
    token_ids: tuple[int, ...]
    token_offsets: tuple[tuple[int, int], ...]
    attention_mask: tuple[bool, ...]
    special_mask: tuple[bool, ...]
    label: Label | None
    scenario_id: str = ""
    tokenizer_contract_id: str = ""
    max_tokens: int = MAX_TOKENS

    @property
    def n_tokens(self) -> int:
        return len(self.token_ids)

    @property
    def over_budget(self) -> bool:
        return self.n_tokens > self.max_tokens


def normalize(window: MeasurementWindow) -> MeasurementWindow:
    """Joint min-max scaling of all 192 values to [0, 1]; constant windows map to 0."""
    v = window.values
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        return window.with_values(np.zeros_like(v))
    return window.with_values((v - lo) / (hi - lo))


def format_value(v: float) -> str:
    """Fixed-width ``d.ddd`` string, rounding half away from zero on the decimal repr."""
    v = float(v) + 0.0  # folds -0.0
    if not 0.0 <= v <= 1.0:
        raise ConfigError(f"value {v!r} outside [0, 1]")
    return str(Decimal(repr(v)).quantize(_Q, rounding=ROUND_HALF_UP))


def format_matrix(values: np.ndarray) -> list[list[str]]:
    """Formatted strings indexed ``[channel][time]``."""
    return [[format_value(x) for x in values[:, c]] for c in range(values.shape[1])]


def render_prompt(window: MeasurementWindow, template: PromptTemplate = BASELINE) -> PromptDocument:
    """Render a normalized window, recording the character span of every numeral."""
    vals = window.values
    if vals.min() < 0 or vals.max() > 1:
        raise ConfigError("render_prompt expects a normalized window")
    strings = format_matrix(vals)
    parts: list[str] = []
    spans: list[tuple[int, int, int, int]] = []
    pos = 0

    def emit(s: str):
        nonlocal pos
        parts.append(s)
        pos += len(s)

    stripped = len(template.header_texts) == 1
    if stripped:
        emit(template.header_texts[0])
    for line_no, c in enumerate(template.channel_order):
        if line_no or stripped:
            emit("\n")
        if not stripped:
            emit(template.header_texts[c] + " ")
        emit("[")
        for t in range(WINDOW_SAMPLES):
            if t:
                emit(DELIMITER)
            s = strings[c][t]
            spans.append((pos, pos + len(s), t, c))
            emit(s)
        emit("]")
        if stripped:
            emit(";")
    return PromptDocument("".join(parts), template.template_id, tuple(spans), window.scenario_id, window.label)


def textualize(window: MeasurementWindow, template: PromptTemplate = BASELINE) -> PromptDocument:
    """normalize + render_prompt."""
    return render_prompt(normalize(window), template)


def parse_numerals(doc: PromptDocument) -> np.ndarray:
    """Read the 192 numerals back out of the text via the recorded spans, as (32, 6) strings."""
    out = np.empty((WINDOW_SAMPLES, N_CHANNELS), dtype=object)
    for s, e, t, c in doc.value_spans:
        out[t, c] = doc.text[s:e]
    return out


def tokenize(
    doc: PromptDocument,
    tokenizer,
    max_tokens: int = MAX_TOKENS,
    contract_id: str | None = None,
) -> TokenizedSample:
    """Tokenize without truncation; ``over_budget`` flags samples above ``max_tokens``."""
    if not getattr(tokenizer, "is_fast", False):
        raise CapabilityError("tokenizer cannot report character offsets (needs a fast tokenizer)")
    enc = tokenizer(
        doc.text,
        return_offsets_mapping=True,
        return_special_tokens_mask=True,
        truncation=False,
        add_special_tokens=True,
    )
    if contract_id is None:
        contract_id = getattr(tokenizer, "contract_id", "")
    return TokenizedSample(
        tuple(enc["input_ids"]),
        tuple(tuple(o) for o in enc["offset_mapping"]),
        tuple(bool(m) for m in enc["attention_mask"]),
        tuple(bool(m) for m in enc["special_tokens_mask"]),
        doc.label,
        doc.scenario_id,
        contract_id,
        max_tokens,
    )


def tokenize_corpus(docs: Iterable[PromptDocument], tokenizer, max_tokens: int = MAX_TOKENS) -> list[TokenizedSample]:
    """Tokenize many documents; reject the whole batch if any exceeds the budget."""
    samples = [tokenize(d, tokenizer, max_tokens) for d in docs]
    offenders = [(s.scenario_id, s.n_tokens) for s in samples if s.over_budget]
    if offenders:
        raise TokenBudgetError(offenders, max_tokens)
    return samples


def align_tokens_to_cells(sample: TokenizedSample, doc: PromptDocument) -> list[tuple[int, int] | None]:
    """Map each token to the (time, channel) cell whose numeral it overlaps.

    Tokens touching no numeral, or more than one, map to None.
    """
    spans = sorted(doc.value_spans)
    starts = [s[0] for s in spans]
    for a, b in zip(spans, spans[1:]):
        if a[1] > b[0]:
            raise DataError("value spans overlap")
    out: list[tuple[int, int] | None] = []
    for (s, e), special in zip(sample.token_offsets, sample.special_mask):
        if special or e <= s:
            out.append(None)
            continue
        i = bisect.bisect_right(starts, s) - 1
        hits = []
        j = max(i, 0)
        while j < len(spans) and spans[j][0] < e:
            if spans[j][1] > s:
                hits.append(spans[j])
            j += 1
        out.append((hits[0][2], hits[0][3]) if len(hits) == 1 else None)
    return out


def cell_coverage(alignment: Sequence[tuple[int, int] | None]) -> np.ndarray:
    """Token count per (time, channel) cell."""
    counts = np.zeros((WINDOW_SAMPLES, N_CHANNELS), dtype=int)
    for cell in alignment:
        if cell is not None:
            counts[cell] += 1
    return counts
