"""Fine-tuning a pretrained encoder to tell attacks from faults, and predicting with it."""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .assets import EncoderAsset, load_asset
from .dataset import Dataset, SplitSpec, stratified_split, values_hash
from .errors import ConfigError, ContractError, DataError
from .lora import LoraConfig, apply_lora
from .textualize import (
    BASELINE,
    MAX_TOKENS,
    PromptTemplate,
    TemplateId,
    TokenizedSample,
    get_template,
    textualize,
    tokenize,
    tokenize_corpus,
)
from .waveform import Label, MeasurementWindow

log = logging.getLogger(__name__)

LABEL_MAP = {0: Label.FAULT.value, 1: Label.ATTACK.value}
MODEL_KINDS = ("distilbert", "distilbert-lora", "gpt2-style")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    learning_rate: float = 2e-5
    batch_size: int = 16
    weight_decay: float = 0.01
    logging_steps: int = 10
    seed: int = 42
    val_fraction: float = 0.1
    max_tokens: int = MAX_TOKENS
    lr_schedule: str = "linear"  # or "constant"

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_schedule not in ("linear", "constant"):
            raise ConfigError("lr_schedule must be 'linear' or 'constant'")

    def to_dict(self) -> dict:
        return asdict(self)

    def fingerprint(self, extra: dict | None = None) -> str:
        blob = json.dumps({"train": self.to_dict(), **(extra or {})}, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# desk-scale recipe for CPU runs on a 2,000-sample subset: the from-scratch
# reference encoder needs a larger step size and smaller batches than the full recipe
DESK_TRAIN_CONFIG = TrainConfig(epochs=2, learning_rate=1e-3, batch_size=8)


def binary_macro_f1(y_true: np.ndarray, y_pred: np.ndarray) -> float:
    f1s = []
    for c in (0, 1):
        tp = np.sum((y_pred == c) & (y_true == c))
        fp = np.sum((y_pred == c) & (y_true != c))
        fn = np.sum((y_pred != c) & (y_true == c))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))


def _label_int(lab) -> int:
    return 1 if Label(lab) is Label.ATTACK else 0


def _collate(samples: Sequence[TokenizedSample], pad_id: int) -> dict:
    n = max(s.n_tokens for s in samples)
    ids = torch.full((len(samples), n), pad_id, dtype=torch.long)
    mask = torch.zeros((len(samples), n), dtype=torch.long)
    for i, s in enumerate(samples):
        ids[i, : s.n_tokens] = torch.tensor(s.token_ids)
        mask[i, : s.n_tokens] = torch.tensor(s.attention_mask, dtype=torch.long)
    return {"input_ids": ids, "attention_mask": mask}


@dataclass
class ModelBundle:
    model: nn.Module
    tokenizer: object
    kind: str
    encoder_asset_id: str
    tokenizer_contract_id: str
    train_config_fingerprint: str
    template_id: TemplateId = TemplateId.BASELINE
    label_map: dict = field(default_factory=lambda: dict(LABEL_MAP))
    train_hashes: frozenset = frozenset()
    history: list = field(default_factory=list)
    best_epoch: int | None = None
    best_metric: float | None = None
    lora: dict | None = None
    param_report: dict | None = None
    train_config: dict | None = None
    nondeterministic: bool = False

    # -- prediction ---------------------------------------------------------

    def _check(self, sample: TokenizedSample) -> None:
        if sample.tokenizer_contract_id != self.tokenizer_contract_id:
            raise ContractError(
                f"sample tokenized with {sample.tokenizer_contract_id!r}, model expects {self.tokenizer_contract_id!r}"
            )

    @torch.no_grad()
    def logits(self, samples: Sequence[TokenizedSample], batch_size: int = 32) -> np.ndarray:
        for s in samples:
            self._check(s)
        was_training = self.model.training
        self.model.eval()
        out = []
        pad = self.tokenizer.pad_token_id
        for i in range(0, len(samples), batch_size):
            batch = _collate(samples[i : i + batch_size], pad)
            out.append(self.model(**batch).logits.float().numpy())
        self.model.train(was_training)
        return np.concatenate(out) if out else np.zeros((0, 2))

    def predict_proba_samples(self, samples: Sequence[TokenizedSample], batch_size: int = 32) -> np.ndarray:
        """Class probabilities, shape (n, 2), columns FAULT, ATTACK."""
        lg = self.logits(samples, batch_size)
        return torch.softmax(torch.from_numpy(lg).double(), dim=-1).numpy()

    def prepare(self, windows: Sequence[MeasurementWindow], template: PromptTemplate | None = None) -> list[TokenizedSample]:
        tpl = template or get_template(self.template_id)
        return [tokenize(textualize(w, tpl), self.tokenizer, contract_id=self.tokenizer_contract_id) for w in windows]

    def predict_proba(self, windows: Sequence[MeasurementWindow]) -> np.ndarray:
        """Attack probability per raw window (textualized with the training template)."""
        return self.predict_proba_samples(self.prepare(windows))[:, 1]

    # -- persistence ----------------------------------------------------------

    def save(self, out_dir: str | Path) -> None:
        from safetensors.torch import save_file

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        state = {k: v.contiguous() for k, v in self.model.state_dict().items()}
        save_file(state, str(out / "model.safetensors"))
        self.model.config.save_pretrained(out)
        self.tokenizer.save_pretrained(out / "tokenizer")
        meta = {
            "kind": self.kind,
            "encoder_asset_id": self.encoder_asset_id,
            "tokenizer_contract_id": self.tokenizer_contract_id,
            "train_config_fingerprint": self.train_config_fingerprint,
            "template_id": self.template_id.value,
            "label_map": {str(k): v for k, v in self.label_map.items()},
            "best_epoch": self.best_epoch,
            "best_metric": self.best_metric,
            "lora": self.lora,
            "param_report": self.param_report,
            "train_config": self.train_config,
            "nondeterministic": self.nondeterministic,
            "history": self.history,
        }
        (out / "bundle.json").write_text(json.dumps(meta, indent=2))
        (out / "train_hashes.txt").write_text("\n".join(sorted(self.train_hashes)))
        write_training_log(self.history, out / "train_log.csv")

    @classmethod
    def load(cls, path: str | Path) -> "ModelBundle":
        from safetensors.torch import load_file
        from transformers import AutoConfig, AutoModelForSequenceClassification, AutoTokenizer

        from .assets import tokenizer_contract_id

        p = Path(path)
        meta = json.loads((p / "bundle.json").read_text())
        config = AutoConfig.from_pretrained(p)
        config._attn_implementation = "eager"
        model = AutoModelForSequenceClassification.from_config(config)
        if meta.get("lora"):
            apply_lora(model, LoraConfig(**{**meta["lora"], "target_modules": tuple(meta["lora"]["target_modules"] or ()) or None}), config.model_type)
        model.load_state_dict(load_file(str(p / "model.safetensors")))
        model.eval()
        tok = AutoTokenizer.from_pretrained(p / "tokenizer")
        if tok.pad_token is None:
            tok.pad_token = tok.eos_token or tok.unk_token
        tok.contract_id = tokenizer_contract_id(tok)
        if tok.contract_id != meta["tokenizer_contract_id"]:
            raise ContractError("stored tokenizer does not match the bundle contract")
        hashes = (p / "train_hashes.txt").read_text().split()
        return cls(
            model=model,
            tokenizer=tok,
            kind=meta["kind"],
            encoder_asset_id=meta["encoder_asset_id"],
            tokenizer_contract_id=meta["tokenizer_contract_id"],
            train_config_fingerprint=meta["train_config_fingerprint"],
            template_id=TemplateId(meta["template_id"]),
            label_map={int(k): v for k, v in meta["label_map"].items()},
            train_hashes=frozenset(hashes),
            history=meta["history"],
            best_epoch=meta["best_epoch"],
            best_metric=meta["best_metric"],
            lora=meta["lora"],
            param_report=meta["param_report"],
            train_config=meta["train_config"],
            nondeterministic=meta["nondeterministic"],
        )


def write_training_log(history: list, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["epoch", "step", "loss", "val_metric"])
        for row in history:
            wr.writerow([row.get("epoch"), row.get("step"), row.get("loss", ""), row.get("val_metric", "")])


def predict(model: ModelBundle, sample: TokenizedSample) -> tuple[Label, float]:
    """Label and attack probability for one tokenized sample."""
    p = float(model.predict_proba_samples([sample])[0, 1])
    return (Label.ATTACK if p >= 0.5 else Label.FAULT), p


def predict_batch(model: ModelBundle, samples: Sequence[TokenizedSample], batch_size: int = 32) -> list[tuple[Label, float]]:
    probs = model.predict_proba_samples(samples, batch_size)[:, 1]
    return [((Label.ATTACK if p >= 0.5 else Label.FAULT), float(p)) for p in probs]


def _check_train_set(train: Sequence[TokenizedSample], val: Sequence[TokenizedSample] | None, contract: str) -> None:
    if not train:
        raise DataError("empty training set")
    labels = {_label_int(s.label) for s in train}
    if len(labels) < 2:
        raise DataError("training set contains a single class")
    for s in list(train) + list(val or []):
        if s.tokenizer_contract_id != contract:
            raise ContractError(f"sample {s.scenario_id} was tokenized with a different tokenizer")
        if s.over_budget:
            raise DataError(f"sample {s.scenario_id} exceeds the {s.max_tokens}-token budget")


def _train(
    model: nn.Module,
    tokenizer,
    train: Sequence[TokenizedSample],
    val: Sequence[TokenizedSample] | None,
    cfg: TrainConfig,
) -> tuple[dict, list, int, float | None]:
    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    params = [p for p in model.parameters() if p.requires_grad]
    decay = [p for p in params if p.ndim >= 2]
    no_decay = [p for p in params if p.ndim < 2]
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.learning_rate,
    )
    steps_per_epoch = (len(train) + cfg.batch_size - 1) // cfg.batch_size
    total = steps_per_epoch * cfg.epochs
    if cfg.lr_schedule == "linear":
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: max(0.0, 1 - s / total))
    else:
        sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 1.0)
    y_all = torch.tensor([_label_int(s.label) for s in train])
    pad = tokenizer.pad_token_id
    loss_fn = nn.CrossEntropyLoss()
    history: list[dict] = []
    best_state, best_epoch, best_metric = None, None, None
    step, running, n_run = 0, 0.0, 0
    for epoch in range(1, cfg.epochs + 1):
        model.train()
        order = torch.randperm(len(train), generator=gen).tolist()
        for i in range(0, len(order), cfg.batch_size):
            idx = order[i : i + cfg.batch_size]
            batch = _collate([train[j] for j in idx], pad)
            out = model(**batch)
            loss = loss_fn(out.logits, y_all[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
            step += 1
            running += loss.item()
            n_run += 1
            if step % cfg.logging_steps == 0:
                history.append({"epoch": epoch, "step": step, "loss": running / n_run})
                log.info("epoch %d step %d loss %.4f", epoch, step, running / n_run)
                running, n_run = 0.0, 0
        metric = None
        if val:
            metric = _eval_macro_f1(model, tokenizer, val)
            history.append({"epoch": epoch, "step": step, "val_metric": metric})
            log.info("epoch %d val macro-F1 %.4f", epoch, metric)
        if best_metric is None or (metric is not None and metric > best_metric) or (metric is None):
            best_state = copy.deepcopy(model.state_dict())
            best_epoch, best_metric = epoch, metric
    model.load_state_dict(best_state)
    model.eval()
    return best_state, history, best_epoch, best_metric


@torch.no_grad()
def _eval_macro_f1(model, tokenizer, samples: Sequence[TokenizedSample], batch_size: int = 32) -> float:
    model.eval()
    preds = []
    for i in range(0, len(samples), batch_size):
        batch = _collate(samples[i : i + batch_size], tokenizer.pad_token_id)
        preds.append(model(**batch).logits.argmax(-1).numpy())
    model.train()
    y = np.array([_label_int(s.label) for s in samples])
    return binary_macro_f1(y, np.concatenate(preds))


def fine_tune(
    asset: EncoderAsset,
    train: Sequence[TokenizedSample],
    val: Sequence[TokenizedSample] | None,
    cfg: TrainConfig = TrainConfig(),
    lora: LoraConfig | None = None,
    template_id: TemplateId = TemplateId.BASELINE,
    train_hashes: frozenset = frozenset(),
) -> ModelBundle:
    """Fine-tune every encoder weight plus the head (or only adapters and head with ``lora``).

    The returned bundle holds the epoch with the best validation macro-F1; without a
    validation set the last epoch is kept.
    """
    _check_train_set(train, val, asset.contract_id)
    model = asset.new_model()
    report = None
    kind = "gpt2-style" if asset.arch == "gpt2" else "distilbert"
    if lora is not None:
        report = apply_lora(model, lora, asset.arch)
        kind += "-lora"
        log.info("LoRA trainable fraction %.4f", report["trainable_fraction"])
    _, history, best_epoch, best_metric = _train(model, asset.tokenizer, train, val, cfg)
    extra = {"asset": asset.asset_id, "lora": lora.to_dict() if lora else None, "template": template_id.value}
    return ModelBundle(
        model=model,
        tokenizer=asset.tokenizer,
        kind=kind,
        encoder_asset_id=asset.asset_id,
        tokenizer_contract_id=asset.contract_id,
        train_config_fingerprint=cfg.fingerprint(extra),
        template_id=template_id,
        train_hashes=frozenset(train_hashes),
        history=history,
        best_epoch=best_epoch,
        best_metric=best_metric,
        lora=lora.to_dict() if lora else None,
        param_report=report,
        train_config=cfg.to_dict(),
    )


def fine_tune_lora(
    asset: EncoderAsset,
    train: Sequence[TokenizedSample],
    val: Sequence[TokenizedSample] | None,
    cfg: TrainConfig = TrainConfig(),
    lora: LoraConfig = LoraConfig(),
    **kw,
) -> ModelBundle:
    return fine_tune(asset, train, val, cfg, lora=lora, **kw)


def prepare_samples(ds: Dataset, asset: EncoderAsset, template: PromptTemplate = BASELINE, max_tokens: int = MAX_TOKENS) -> list[TokenizedSample]:
    """Textualize and tokenize a dataset, rejecting any prompt over the budget."""
    docs = [textualize(w, template) for w in ds.windows]
    return tokenize_corpus(docs, asset.tokenizer, max_tokens)


def train_detector(
    asset: EncoderAsset | str | Path,
    train_ds: Dataset,
    cfg: TrainConfig = TrainConfig(),
    template: PromptTemplate = BASELINE,
    lora: LoraConfig | None = None,
) -> ModelBundle:
    """Carve a stratified validation split from ``train_ds``, then fine-tune."""
    if not isinstance(asset, EncoderAsset):
        asset = load_asset(asset)
    if cfg.val_fraction > 0:
        fit, val = stratified_split(train_ds, SplitSpec(1 - cfg.val_fraction, cfg.seed))
    else:
        fit, val = train_ds, None
    tr = prepare_samples(fit, asset, template, cfg.max_tokens)
    va = prepare_samples(val, asset, template, cfg.max_tokens) if val is not None else None
    return fine_tune(
        asset, tr, va, cfg, lora=lora, template_id=template.template_id, train_hashes=frozenset(train_ds.content_hashes())
    )
