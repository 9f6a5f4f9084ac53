"""AdamW, subject-wise split plans, metrics and the early-stopping training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .features import FeatureSet
from .graph import region_map_for
from .model import MsgmConfig, MsgmModel, loss as smoothed_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    label_smoothing: float = 0.1
    batch_size: int = 32
    epochs: int = 20
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.patience < 1 or self.batch_size < 1 or self.epochs < 1:
            raise ValueError("patience, batch_size and epochs must be >= 1")

    @classmethod
    def from_json(cls, doc: dict) -> "TrainConfig":
        extra = set(doc) - {f.name for f in fields(cls)}
        if extra:
            raise ValueError(f"unknown train config keys: {sorted(extra)}")
        return cls(**doc)

    def to_json(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Sequence[T.Tensor], lr: float = 3e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.eps, self.weight_decay = lr, eps, weight_decay
        self.b1, self.b2 = betas
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Sequence[np.ndarray] | None = None) -> None:
        grads = [p.grad for p in self.params] if grads is None else list(grads)
        bad = [p.name or str(i) for i, (p, g) in enumerate(zip(self.params, grads))
               if g is None or not np.all(np.isfinite(g))]
        if bad:
            raise DivergenceError(f"non-finite or missing gradient for: {', '.join(bad)}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, (p, g) in enumerate(zip(self.params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            w = p.data * (1.0 - self.lr * self.weight_decay)
            w = w - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.assign(w)


def adamw_step(params, grads, state: AdamW | None = None, cfg: TrainConfig | None = None) -> AdamW:
    """Functional wrapper: one AdamW update, returning the (possibly new) state."""
    if state is None:
        cfg = cfg or TrainConfig()
        state = AdamW(params, cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    state.step(grads)
    return state


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    mode: str = "loso"  # "loso" | "leave_n_out"
    n: int = 1
    val_fraction: float | None = None

    def __post_init__(self):
        if self.mode not in ("loso", "leave_n_out"):
            raise SplitError(f"unknown split mode {self.mode!r}")

    @property
    def held_out(self) -> int:
        return 1 if self.mode == "loso" else self.n

    @property
    def val(self) -> float:
        if self.val_fraction is not None:
            return self.val_fraction
        return 0.2 if self.mode == "loso" else 0.1

    @classmethod
    def from_json(cls, doc: dict) -> "SplitPlan":
        extra = set(doc) - {f.name for f in fields(cls)}
        if extra:
            raise SplitError(f"unknown split config keys: {sorted(extra)}")
        return cls(**doc)

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Fold:
    index: int
    test_subjects: tuple[int, ...]
    train_idx: np.ndarray
    val_idx: np.ndarray
    test_idx: np.ndarray


def make_splits(subjects: Sequence[int], plan: SplitPlan, seed: int = 0) -> list[Fold]:
    """Subject-wise folds over per-sample subject ids.

    Test subjects are taken in sorted order, ``n`` at a time; validation
    samples are a seeded shuffle of the remaining subjects' samples.
    """
    subjects = np.asarray(subjects)
    uniq = sorted(set(int(s) for s in subjects))
    S, n = len(uniq), plan.held_out
    if S < 2:
        raise SplitError(f"need at least two subjects, got {S}")
    if n >= S:
        raise SplitError(f"cannot hold out {n} of {S} subjects")
    rng = np.random.default_rng(seed)
    folds = []
    for i in range(math.ceil(S / n)):
        test_subj = tuple(uniq[i * n:(i + 1) * n])
        test_mask = np.isin(subjects, test_subj)
        pool = np.flatnonzero(~test_mask)
        pool = pool[rng.permutation(len(pool))]
        n_val = int(round(plan.val * len(pool)))
        folds.append(Fold(i, test_subj, np.sort(pool[n_val:]), np.sort(pool[:n_val]), np.flatnonzero(test_mask)))
    return folds


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class Metrics:
    accuracy: float
    f1: float
    n: int

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "f1": self.f1, "n": self.n}


def macro_f1(pred: np.ndarray, labels: np.ndarray, n_classes: int) -> float:
    scores = []
    for c in range(n_classes):
        tp = np.sum((pred == c) & (labels == c))
        fp = np.sum((pred == c) & (labels != c))
        fn = np.sum((pred != c) & (labels == c))
        denom = 2 * tp + fp + fn
        scores.append(0.0 if denom == 0 or not np.any(labels == c) else 2 * tp / denom)
    return float(np.mean(scores))


def score(pred, labels, n_classes: int) -> Metrics:
    pred, labels = np.asarray(pred), np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on empty data")
    return Metrics(float(np.mean(pred == labels)), macro_f1(pred, labels, n_classes), int(len(labels)))


def evaluate(model: MsgmModel, data: FeatureSet) -> Metrics:
    if len(data) == 0:
        raise ValueError("cannot evaluate on empty data")
    logits = model.predict(data.arrays())
    return score(np.argmax(logits, axis=1), data.labels, model.cfg.n_classes)


def summarize(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())} if len(arr) else {"mean": None, "std": None}


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    test_subjects: tuple[int, ...]
    status: str
    test: Metrics | None = None
    best_val_accuracy: float | None = None
    best_epoch: int | None = None
    epochs_run: int = 0
    history: list[dict] = field(default_factory=list)
    train_subjects: tuple[int, ...] = ()
    model: MsgmModel | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {
            "fold": self.fold,
            "test_subjects": list(self.test_subjects),
            "train_subjects": list(self.train_subjects),
            "status": self.status,
            "test": self.test.to_json() if self.test else None,
            "best_val_accuracy": self.best_val_accuracy,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "history": self.history,
        }


class EarlyStopping:
    """Tracks the best validation accuracy; ``step`` returns True when training should stop."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.stale = 0

    def step(self, epoch: int, value: float) -> tuple[bool, bool]:
        """Returns ``(improved, stop)``."""
        if value > self.best:
            self.best, self.best_epoch, self.stale = value, epoch, 0
            return True, False
        self.stale += 1
        return False, self.stale >= self.patience


def train_epoch(model: MsgmModel, opt: AdamW, data: FeatureSet, cfg: TrainConfig,
                rng: np.random.Generator) -> float:
    params = list(model.parameters().values())
    order = rng.permutation(len(data))
    arrays = data.arrays()
    total, seen = 0.0, 0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        batch = [A[idx] for A in arrays]
        with T.Tape() as tape:
            logits = model.forward(batch, training=True, rng=rng)
            value = smoothed_loss(logits, data.labels[idx], cfg.label_smoothing)
        if not np.isfinite(value.item()):
            raise DivergenceError(f"loss became {value.item()}")
        T.backward(value, tape, params)
        opt.step()
        model.project()
        total += value.item() * len(idx)
        seen += len(idx)
    return total / max(seen, 1)


def build_model(cfg: MsgmConfig, channel_names: Sequence[str], train_data: FeatureSet, seed: int) -> MsgmModel:
    regions = region_map_for(channel_names, cfg.region_map)
    model = MsgmModel(cfg, regions, seed)
    model.init_graphs(train_data.arrays())
    return model


def train_fold(fold: Fold, data: FeatureSet, model_cfg: MsgmConfig, cfg: TrainConfig,
               on_epoch: Callable[[int, dict], None] | None = None) -> FoldResult:
    train, val, test = data.subset(fold.train_idx), data.subset(fold.val_idx), data.subset(fold.test_idx)
    train_subj = tuple(sorted(set(int(s) for s in train.subjects) | set(int(s) for s in val.subjects)))
    result = FoldResult(fold.index, fold.test_subjects, "ok", train_subjects=train_subj)
    seed = cfg.seed * 1000 + fold.index
    model = build_model(model_cfg, data.channel_names, train, seed)
    opt = AdamW(list(model.parameters().values()), cfg.lr, cfg.betas, cfg.eps, cfg.weight_decay)
    rng = np.random.default_rng(seed + 1)
    stopper = EarlyStopping(cfg.patience)
    best_state = model.state()
    monitor = val if len(val) else train
    try:
        for epoch in range(1, cfg.epochs + 1):
            train_loss = train_epoch(model, opt, train, cfg, rng)
            val_acc = evaluate(model, monitor).accuracy
            improved, stop = stopper.step(epoch, val_acc)
            if improved:
                best_state = model.state()
            row = {"epoch": epoch, "train_loss": train_loss, "val_accuracy": val_acc}
            result.history.append(row)
            result.epochs_run = epoch
            log.info("fold %d epoch %d loss %.4f val_acc %.4f", fold.index, epoch, train_loss, val_acc)
            if on_epoch:
                on_epoch(fold.index, row)
            if stop:
                break
    except (DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("fold %d diverged: %s", fold.index, exc)
        result.status = "failed"
        result.model = None
        return result
    model.load_state(best_state)
    result.best_val_accuracy = float(stopper.best)
    result.best_epoch = stopper.best_epoch
    result.test = evaluate(model, test)
    result.model = model
    return result


def train(data: FeatureSet, model_cfg: MsgmConfig, cfg: TrainConfig, plan: SplitPlan,
          on_epoch: Callable[[int, dict], None] | None = None) -> list[FoldResult]:
    folds = make_splits(data.subjects, plan, cfg.seed)
    return [train_fold(f, data, model_cfg, cfg, on_epoch) for f in folds]


def results_summary(results: Sequence[FoldResult]) -> dict:
    ok = [r for r in results if r.status == "ok"]
    return {
        "accuracy": summarize([r.test.accuracy for r in ok]),
        "f1": summarize([r.test.f1 for r in ok]),
        "folds_ok": len(ok),
        "folds_failed": len(results) - len(ok),
        "f1_average": "macro",
    }
