"""Encoder assets: a pretrained-model directory plus its tokenizer.

Any HuggingFace-style directory with a fast tokenizer can serve as an asset.
``build_reference_asset`` writes a compact, self-contained one for offline
use: an uncased WordPiece tokenizer whose vocabulary holds every fixed-width
numeral ``0.000 .. 1.000`` as a single token, and a small DistilBERT (or
GPT-2) encoder whose numeral embeddings start from a smooth function of the
numeral's value.
"""

from __future__ import annotations

import hashlib
import json
import string
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CapabilityError, ConfigError
from .textualize import TEMPLATES

SPECIAL_TOKENS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
ASSET_FILE = "asset.json"

ARCH_SIZES = {
    "distilbert": dict(dim=128, n_layers=2, n_heads=4, hidden_dim=256),
    "gpt2": dict(n_embd=128, n_layer=2, n_head=4),
}


def reference_vocab() -> list[str]:
    words = set()
    for tpl in TEMPLATES.values():
        for h in tpl.header_texts:
            for w in h.lower().replace("'", " ' ").replace(":", " : ").split():
                words.add(w)
    punct = list(string.punctuation)
    numerals = [f"{i / 1000:.3f}" for i in range(1001)]
    chars = list(string.ascii_lowercase) + list(string.digits)
    vocab = SPECIAL_TOKENS + punct + numerals + sorted(words - set(punct)) + chars
    vocab += ["##" + c for c in chars]
    seen = set()
    return [v for v in vocab if not (v in seen or seen.add(v))]


def build_reference_tokenizer(model_max_length: int = 512):
    """Fast tokenizer over ``reference_vocab`` that keeps ``d.ddd`` numerals whole."""
    from tokenizers import Regex, Tokenizer, decoders, models, normalizers, pre_tokenizers, processors
    from transformers import PreTrainedTokenizerFast

    vocab = {tok: i for i, tok in enumerate(reference_vocab())}
    tk = Tokenizer(models.WordPiece(vocab=vocab, unk_token="[UNK]", max_input_chars_per_word=100))
    tk.normalizer = normalizers.BertNormalizer(lowercase=True, strip_accents=None, clean_text=True)
    tk.pre_tokenizer = pre_tokenizers.Sequence(
        [
            pre_tokenizers.WhitespaceSplit(),
            pre_tokenizers.Split(Regex(r"\d+\.\d+|[^\w\s]"), behavior="isolated"),
        ]
    )
    tk.post_processor = processors.TemplateProcessing(
        single="[CLS] $A [SEP]",
        pair="[CLS] $A [SEP] $B:1 [SEP]:1",
        special_tokens=[("[CLS]", vocab["[CLS]"]), ("[SEP]", vocab["[SEP]"])],
    )
    tk.decoder = decoders.WordPiece()
    return PreTrainedTokenizerFast(
        tokenizer_object=tk,
        unk_token="[UNK]",
        pad_token="[PAD]",
        cls_token="[CLS]",
        sep_token="[SEP]",
        mask_token="[MASK]",
        model_max_length=model_max_length,
    )


def tokenizer_contract_id(tokenizer) -> str:
    if not getattr(tokenizer, "is_fast", False):
        raise CapabilityError("asset tokenizer must be a fast tokenizer with offset mapping")
    vocab = sorted(tokenizer.get_vocab().items(), key=lambda kv: kv[1])
    backend = json.loads(tokenizer.backend_tokenizer.to_str())
    backend.pop("model", None)
    blob = json.dumps({"vocab": vocab, "pipeline": backend}, sort_keys=True).encode()
    return "tok-" + hashlib.sha256(blob).hexdigest()[:16]


def _numeral_embeddings(values: np.ndarray, dim: int) -> np.ndarray:
    """Smooth value code: a linear ramp plus sin/cos at geometric frequencies."""
    k = np.arange(1, dim // 2 + 1)
    freqs = np.pi * np.geomspace(0.5, 64.0, k.size)
    feats = np.concatenate([np.sin(values[:, None] * freqs), np.cos(values[:, None] * freqs)], axis=1)
    feats[:, 0] = 2 * values - 1
    return feats[:, :dim]


def _build_model(arch: str, tokenizer, seed: int, sizes: dict | None = None):
    import torch
    from transformers import DistilBertConfig, DistilBertForSequenceClassification, GPT2Config, GPT2ForSequenceClassification

    torch.manual_seed(seed)
    sizes = dict(ARCH_SIZES[arch], **(sizes or {}))
    vocab_size = len(tokenizer.get_vocab())
    pad = tokenizer.pad_token_id
    if arch == "distilbert":
        cfg = DistilBertConfig(
            vocab_size=vocab_size,
            max_position_embeddings=512,
            sinusoidal_pos_embds=True,
            pad_token_id=pad,
            num_labels=2,
            **sizes,
        )
        cfg._attn_implementation = "eager"
        model = DistilBertForSequenceClassification(cfg)
        emb = model.distilbert.embeddings.word_embeddings
        dim = cfg.dim
    elif arch == "gpt2":
        cfg = GPT2Config(vocab_size=vocab_size, n_positions=512, pad_token_id=pad, num_labels=2, **sizes)
        cfg._attn_implementation = "eager"
        model = GPT2ForSequenceClassification(cfg)
        emb = model.transformer.wte
        dim = cfg.n_embd
    else:
        raise ConfigError(f"unknown arch {arch!r}")
    vocab = tokenizer.get_vocab()
    nums = [(tok, idx) for tok, idx in vocab.items() if len(tok) == 5 and tok[1] == "." and tok.replace(".", "").isdigit()]
    if nums:
        vals = np.array([float(t) for t, _ in nums])
        code = _numeral_embeddings(vals, dim)
        with torch.no_grad():
            idx = torch.tensor([i for _, i in nums])
            emb.weight[idx] = torch.tensor(code, dtype=emb.weight.dtype) + 0.02 * emb.weight[idx]
    return model


def _quiet_hf() -> None:
    # weight save/load progress bars clutter CLI output and test logs
    from transformers.utils import logging as hf_logging

    hf_logging.disable_progress_bar()


def build_reference_asset(out_dir: str | Path, arch: str = "distilbert", seed: int = 0, sizes: dict | None = None) -> "EncoderAsset":
    """Write tokenizer, config, weights and ``asset.json`` to ``out_dir``."""
    _quiet_hf()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    tok = build_reference_tokenizer()
    model = _build_model(arch, tok, seed, sizes)
    tok.save_pretrained(out)
    model.save_pretrained(out)
    meta = {
        "asset_id": f"relayguard-ref-{arch}-" + _hash_state(model),
        "arch": arch,
        "seed": seed,
        "tokenizer_contract_id": tokenizer_contract_id(tok),
    }
    (out / ASSET_FILE).write_text(json.dumps(meta, indent=2))
    return load_asset(out)


def _hash_state(model) -> str:
    h = hashlib.sha256()
    for name, t in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:12]


@dataclass
class EncoderAsset:
    path: Path
    asset_id: str
    arch: str
    tokenizer: object
    contract_id: str

    def new_model(self):
        """Fresh sequence-classification model initialised from the asset weights."""
        from transformers import AutoModelForSequenceClassification

        _quiet_hf()
        model = AutoModelForSequenceClassification.from_pretrained(
            self.path, num_labels=2, attn_implementation="eager"
        )
        if getattr(model.config, "pad_token_id", None) is None:
            model.config.pad_token_id = self.tokenizer.pad_token_id
        return model


def load_asset(path: str | Path) -> EncoderAsset:
    from transformers import AutoConfig, AutoTokenizer

    _quiet_hf()
    p = Path(path)
    if not p.is_dir():
        raise CapabilityError(f"encoder asset directory {p} not found")
    tok = AutoTokenizer.from_pretrained(p)
    if not getattr(tok, "is_fast", False):
        raise CapabilityError("asset tokenizer must be a fast tokenizer with offset mapping")
    if tok.pad_token is None:
        tok.pad_token = tok.eos_token or tok.unk_token
    contract = tokenizer_contract_id(tok)
    tok.contract_id = contract
    meta_file = p / ASSET_FILE
    if meta_file.exists():
        meta = json.loads(meta_file.read_text())
        asset_id, arch = meta["asset_id"], meta["arch"]
    else:
        cfg = AutoConfig.from_pretrained(p)
        arch = cfg.model_type
        asset_id = f"{p.name}-{hashlib.sha256(cfg.to_json_string().encode()).hexdigest()[:12]}"
    return EncoderAsset(p, asset_id, arch, tok, contract)
