"""Non-LLM reference detectors on numeric windows.

Sequence models (CNN, LSTM, GRU) see the normalized (32, 6) matrix time-major;
tabular models see it flattened to 192 features. Default hyperparameters come
from the versioned ``baseline_defaults.yaml`` next to this module and are
stored with every trained model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .dataset import Dataset
from .errors import ConfigError, DataError
from .textualize import normalize
from .waveform import MeasurementWindow


def _load_defaults() -> tuple[int, dict[str, dict]]:
    import yaml

    raw = yaml.safe_load((Path(__file__).parent / "baseline_defaults.yaml").read_text())
    version = int(raw.pop("version"))
    return version, {k: dict(v or {}) for k, v in raw.items()}


BASELINE_CONFIG_VERSION, BASELINE_DEFAULTS = _load_defaults()


class BaselineKind(str, Enum):
    CNN = "CNN"
    LSTM = "LSTM"
    GRU = "GRU"
    RANDOM_FOREST = "RANDOM_FOREST"
    DECISION_TREE = "DECISION_TREE"
    SVM = "SVM"
    XGBOOST = "XGBOOST"
    LOGISTIC_REGRESSION = "LOGISTIC_REGRESSION"
    KNN = "KNN"
    NAIVE_BAYES = "NAIVE_BAYES"

    @property
    def is_sequence(self) -> bool:
        return self in (BaselineKind.CNN, BaselineKind.LSTM, BaselineKind.GRU)


def features(windows: Sequence[MeasurementWindow]) -> np.ndarray:
    """Normalized windows stacked to (n, 32, 6)."""
    if not windows:
        return np.zeros((0, 32, 6))
    return np.stack([normalize(w).values for w in windows])


class _CNN(nn.Module):
    def __init__(self, channels=(32, 64), kernel_size=3):
        super().__init__()
        c1, c2 = channels
        self.body = nn.Sequential(
            nn.Conv1d(6, c1, kernel_size, padding=kernel_size // 2),
            nn.ReLU(),
            nn.MaxPool1d(2),
            nn.Conv1d(c1, c2, kernel_size, padding=kernel_size // 2),
            nn.ReLU(),
            nn.AdaptiveAvgPool1d(1),
        )
        self.head = nn.Linear(c2, 2)

    def forward(self, x):  # x: (n, 32, 6)
        return self.head(self.body(x.transpose(1, 2)).squeeze(-1))


class _RNN(nn.Module):
    def __init__(self, cell: str, hidden=64, layers=1):
        super().__init__()
        rnn = nn.LSTM if cell == "LSTM" else nn.GRU
        self.rnn = rnn(6, hidden, num_layers=layers, batch_first=True)
        self.head = nn.Linear(hidden, 2)

    def forward(self, x):
        out, _ = self.rnn(x)
        return self.head(out[:, -1])


def _make_net(kind: BaselineKind, p: dict) -> nn.Module:
    if kind is BaselineKind.CNN:
        return _CNN(tuple(p["channels"]), p["kernel_size"])
    return _RNN(kind.value, p["hidden"], p["layers"])


def _make_estimator(kind: BaselineKind, p: dict, seed: int):
    from sklearn.ensemble import RandomForestClassifier
    from sklearn.linear_model import LogisticRegression
    from sklearn.naive_bayes import GaussianNB
    from sklearn.neighbors import KNeighborsClassifier
    from sklearn.svm import SVC
    from sklearn.tree import DecisionTreeClassifier

    if kind is BaselineKind.RANDOM_FOREST:
        return RandomForestClassifier(random_state=seed, **p)
    if kind is BaselineKind.DECISION_TREE:
        return DecisionTreeClassifier(random_state=seed, **p)
    if kind is BaselineKind.SVM:
        return SVC(probability=True, random_state=seed, **p)
    if kind is BaselineKind.XGBOOST:
        from xgboost import XGBClassifier

        return XGBClassifier(random_state=seed, n_jobs=1, **p)
    if kind is BaselineKind.LOGISTIC_REGRESSION:
        return LogisticRegression(**p)
    if kind is BaselineKind.KNN:
        return KNeighborsClassifier(**p)
    if kind is BaselineKind.NAIVE_BAYES:
        return GaussianNB(**p)
    raise ConfigError(f"not a tabular baseline: {kind}")


@dataclass
class BaselineModel:
    kind: BaselineKind
    parameters: dict
    estimator: object
    input_shape: tuple
    train_hashes: frozenset = frozenset()
    history: list = field(default_factory=list)

    def predict_proba_features(self, x: np.ndarray) -> np.ndarray:
        if self.kind.is_sequence:
            net = self.estimator
            net.eval()
            with torch.no_grad():
                lg = net(torch.as_tensor(x, dtype=torch.float32))
            return torch.softmax(lg.double(), dim=-1).numpy()[:, 1]
        return self.estimator.predict_proba(x.reshape(len(x), -1))[:, 1]

    def predict_proba(self, windows: Sequence[MeasurementWindow]) -> np.ndarray:
        """Attack probability per raw window."""
        return self.predict_proba_features(features(windows))

    def save(self, out_dir: str | Path) -> None:
        import joblib

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {
            "kind": self.kind.value,
            "config_version": BASELINE_CONFIG_VERSION,
            "parameters": self.parameters,
            "input_shape": list(self.input_shape),
            "history": self.history,
        }
        (out / "baseline.json").write_text(json.dumps(meta, indent=2))
        (out / "train_hashes.txt").write_text("\n".join(sorted(self.train_hashes)))
        if self.kind.is_sequence:
            torch.save(self.estimator.state_dict(), out / "weights.pt")
        else:
            joblib.dump(self.estimator, out / "estimator.joblib")

    @classmethod
    def load(cls, path: str | Path) -> "BaselineModel":
        import joblib

        p = Path(path)
        meta = json.loads((p / "baseline.json").read_text())
        kind = BaselineKind(meta["kind"])
        if kind.is_sequence:
            est = _make_net(kind, meta["parameters"])
            est.load_state_dict(torch.load(p / "weights.pt"))
        else:
            est = joblib.load(p / "estimator.joblib")
        hashes = frozenset((p / "train_hashes.txt").read_text().split())
        return cls(kind, meta["parameters"], est, tuple(meta["input_shape"]), hashes, meta["history"])


def _fit_net(kind, p, x, y, xv, yv, seed) -> tuple[nn.Module, list]:
    torch.manual_seed(seed)
    net = _make_net(kind, p)
    opt = torch.optim.Adam(net.parameters(), lr=p["learning_rate"])
    gen = torch.Generator().manual_seed(seed)
    xt = torch.as_tensor(x, dtype=torch.float32)
    yt = torch.as_tensor(y, dtype=torch.long)
    loss_fn = nn.CrossEntropyLoss()
    best, best_acc, history = None, -1.0, []
    for epoch in range(1, p["epochs"] + 1):
        net.train()
        order = torch.randperm(len(xt), generator=gen)
        for i in range(0, len(order), p["batch_size"]):
            idx = order[i : i + p["batch_size"]]
            loss = loss_fn(net(xt[idx]), yt[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
        if xv is not None and len(xv):
            net.eval()
            with torch.no_grad():
                acc = float((net(torch.as_tensor(xv, dtype=torch.float32)).argmax(-1).numpy() == yv).mean())
        else:
            acc = float(epoch)  # keep the last epoch
        history.append({"epoch": epoch, "loss": loss.item(), "val_metric": acc})
        if acc > best_acc:
            best_acc, best = acc, {k: v.clone() for k, v in net.state_dict().items()}
    net.load_state_dict(best)
    net.eval()
    return net, history


def train_baseline(
    kind: BaselineKind | str,
    train: Dataset,
    val: Dataset | None = None,
    seed: int = 42,
    overrides: dict | None = None,
) -> BaselineModel:
    kind = BaselineKind(kind)
    y = train.labels
    if len(set(y.tolist())) < 2:
        raise DataError("training set contains a single class")
    p = {**BASELINE_DEFAULTS[kind.value], **(overrides or {})}
    x = features(train.windows)
    if kind.is_sequence:
        xv = features(val.windows) if val is not None else None
        yv = val.labels if val is not None else None
        est, history = _fit_net(kind, p, x, y, xv, yv, seed)
        shape = (32, 6)
    else:
        est = _make_estimator(kind, p, seed)
        est.fit(x.reshape(len(x), -1), y)
        history, shape = [], (192,)
    return BaselineModel(kind, p, est, shape, frozenset(train.content_hashes()), history)
