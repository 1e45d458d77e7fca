"""Optimization: Adam with decoupled weight decay, R-Drop double-pass epochs,
dev-set model selection over folds, out-of-domain pretraining followed by
in-domain fine-tuning, the loss-weight grid and the greedy scale search."""

from __future__ import annotations

import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import losses as L
from . import tensor as T
from .corpus import Essay, FoldSplit, PromptSpec, normalize_score
from .encoder import EncoderConfig
from .metrics import evaluate_prompt
from .multiscale import EssayBatch, MultiScaleConfig, MultiScaleModel, encode_essays
from .tensor import Tape, Tensor, backward
from .tokenizer import Vocabulary, wordpiece_tokenize

logger = logging.getLogger(__name__)

LOSS_GRID_VALUES = (0.0, 0.1, 0.5, 1.0)


class TrainingAborted(RuntimeError):
    """Raised when a batch loss stops being finite."""


@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 6e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.005
    batch_size: int = 32
    epochs: int = 80
    dropout: float = 0.1
    alpha: float = 1.0
    beta: float = 0.0
    gamma: float = 0.0
    mr_margin: float = 0.0
    rdrop_coeff: float = 9.0
    seed: int = 0
    freeze: str = "last_layer"
    pretrain_epochs: int = 20
    rdrop_in_pretrain: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise ValueError("learning rate and adam eps must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.weight_decay < 0 or self.rdrop_coeff < 0 or self.mr_margin < 0:
            raise ValueError("weight decay, margin and rdrop coefficient must be non-negative")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1 or self.pretrain_epochs < 0:
            raise ValueError("batch_size and epochs must be positive")
        if (self.beta > 0 or self.gamma > 0) and self.batch_size < 2:
            raise ValueError("ranking and cosine losses need batch_size >= 2")
        self.loss_weights  # validates alpha/beta/gamma

    @property
    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(self.alpha, self.beta, self.gamma, self.mr_margin, self.rdrop_coeff)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None], state: AdamState,
              cfg: TrainingConfig) -> None:
    """One in-place Adam update with bias correction and decoupled decay.

    Frozen tensors and tensors without a gradient are left untouched.
    """
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, (p, g) in enumerate(zip(params, grads, strict=True)):
        if not p.requires_grad or g is None:
            continue
        if g.shape != p.data.shape:
            raise T.ShapeError(f"gradient shape {g.shape} != parameter shape {p.data.shape} ({p.name})")
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        if cfg.weight_decay:
            update = update + cfg.weight_decay * p.data
        p.data -= (cfg.learning_rate * update).astype(p.data.dtype)


class Adam:
    def __init__(self, params: Iterable[Tensor], cfg: TrainingConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = AdamState()

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state, self.cfg)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------------------
# data


@dataclass
class EncodedSet:
    """Essays tokenized and grouped for the model, with both label scales."""

    ids: list[str]
    batch: EssayBatch
    labels: np.ndarray  # normalized to [0, 1]
    raw: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    def take(self, idx) -> "EncodedSet":
        idx = np.asarray(idx, dtype=np.int64)
        return EncodedSet([self.ids[i] for i in idx], self.batch.take(idx), self.labels[idx], self.raw[idx])

    def subset(self, ids: Iterable[str]) -> "EncodedSet":
        pos = {e: i for i, e in enumerate(self.ids)}
        return self.take([pos[e] for e in ids])


def encode_set(essays: Sequence[Essay], vocab: Vocabulary, ms_cfg: MultiScaleConfig,
               specs: dict[int, PromptSpec] | PromptSpec,
               labels: Sequence[float] | None = None) -> EncodedSet:
    """Tokenize essays; labels default to each essay's normalized raw score."""
    tokens = [wordpiece_tokenize(e.text, vocab) for e in essays]
    raw = np.array([np.nan if e.raw_score is None else e.raw_score for e in essays], dtype=np.float64)
    if labels is None:
        spec_for = (lambda e: specs) if isinstance(specs, PromptSpec) else (lambda e: specs[e.prompt_id])
        labels = [np.nan if e.raw_score is None else normalize_score(e.raw_score, spec_for(e)) for e in essays]
    return EncodedSet([e.essay_id for e in essays], encode_essays(tokens, vocab, ms_cfg),
                      np.asarray(labels, dtype=np.float64), raw)


def batch_slices(n: int, batch_size: int) -> list[slice]:
    """Contiguous batches; a trailing singleton joins the previous batch so
    pairwise losses always see at least two essays."""
    starts = list(range(0, n, batch_size))
    bounds = starts + [n]
    if len(starts) > 1 and n - starts[-1] == 1:
        bounds.pop(-2)
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


# ---------------------------------------------------------------------------
# training


def batch_loss(model: MultiScaleModel, batch: EssayBatch, labels: np.ndarray, pad_id: int,
               w: L.LossWeights, rng: np.random.Generator | None) -> Tensor:
    """Combined loss of one batch; with a positive R-Drop coefficient the
    batch runs through the model twice with independent dropout masks."""
    labels = labels.astype(T.default_dtype())
    if w.rdrop_coeff > 0:
        y1 = model.forward(batch, pad_id, training=True, rng=rng).total
        y2 = model.forward(batch, pad_id, training=True, rng=rng).total
        return L.rdrop_total(y1, y2, labels, w)
    y = model.forward(batch, pad_id, training=True, rng=rng).total
    return L.combined(y, labels, w)


def train_epoch(model: MultiScaleModel, data: EncodedSet, cfg: TrainingConfig, rng: np.random.Generator,
                optimizer: Adam, pad_id: int, weights: L.LossWeights | None = None) -> float:
    """One shuffled pass over ``data``; returns the mean batch loss."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty set")
    w = cfg.loss_weights if weights is None else weights
    order = rng.permutation(len(data))
    total = 0.0
    slices = batch_slices(len(data), cfg.batch_size)
    for sl in slices:
        part = data.take(order[sl])
        optimizer.zero_grad()
        with Tape() as tape:
            loss = batch_loss(model, part.batch, part.labels, pad_id, w, rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingAborted(f"non-finite loss {value} on batch of essays {part.ids[:5]}...")
        backward(loss, tape)
        optimizer.step()
        total += value
    return total / len(slices)


def predict_normalized(model: MultiScaleModel, data: EncodedSet, pad_id: int, batch_size: int = 32) -> np.ndarray:
    out = np.empty(len(data), dtype=np.float64)
    for sl in batch_slices(len(data), batch_size):
        with T.no_record():
            out[sl] = model.forward(data.batch.take(np.arange(len(data))[sl]), pad_id).total.data
    return out


def dev_score(preds: np.ndarray, data: EncodedSet, spec: PromptSpec) -> float:
    """Model-selection metric: QWK for discrete prompts, negative RMSE otherwise."""
    metrics = evaluate_prompt(preds, data.raw, spec)
    return metrics["qwk"] if metrics["qwk"] is not None else -metrics["rmse"]


def select_best(dev_scores: Sequence[float]) -> int:
    """Index of the best dev score; the earliest epoch wins ties."""
    if not len(dev_scores):
        raise ValueError("no dev scores")
    return int(np.argmax(np.asarray(dev_scores, dtype=np.float64)))


@dataclass(frozen=True)
class ModelFactory:
    """Picklable recipe for a fresh model, so folds can run in worker processes."""

    enc_cfg: EncoderConfig
    ms_cfg: MultiScaleConfig
    seed: int = 0
    freeze: str = "last_layer"

    def __call__(self) -> MultiScaleModel:
        model = MultiScaleModel(self.enc_cfg, self.ms_cfg, seed=self.seed)
        model.set_trainable(self.freeze)
        return model


@dataclass
class FoldResult:
    fold_index: int
    best_epoch: int  # 1-based
    dev_history: list[float]
    train_history: list[float]
    test_metrics: dict
    state: dict[str, np.ndarray]
    per_scale_sample: list[dict]

    @property
    def dev_best(self) -> float:
        return self.dev_history[self.best_epoch - 1]


@dataclass
class FitResult:
    folds: list[FoldResult]

    @property
    def mean_test_qwk(self) -> float | None:
        vals = [f.test_metrics["qwk"] for f in self.folds]
        return None if any(v is None for v in vals) else float(np.mean(vals))

    @property
    def mean_test_rmse(self) -> float:
        return float(np.mean([f.test_metrics["rmse"] for f in self.folds]))


def fit_fold(model: MultiScaleModel, train: EncodedSet, dev: EncodedSet, test: EncodedSet | None,
             spec: PromptSpec, cfg: TrainingConfig, pad_id: int, fold_index: int = 0,
             weights: L.LossWeights | None = None, sample_size: int = 3) -> FoldResult:
    """Train for ``cfg.epochs``, score dev after every epoch, keep the best
    epoch's weights and evaluate the test split once with them."""
    rng = T.make_rng(cfg.seed * 1009 + fold_index)
    optimizer = Adam(model.parameters(), cfg)
    dev_history, train_history = [], []
    best_state, best = None, -np.inf
    for epoch in range(cfg.epochs):
        train_history.append(train_epoch(model, train, cfg, rng, optimizer, pad_id, weights))
        score = dev_score(predict_normalized(model, dev, pad_id, cfg.batch_size), dev, spec)
        dev_history.append(score)
        if score > best:
            best, best_state = score, model.state_dict()
        logger.info("fold %d epoch %d: train loss %.5f dev %.4f", fold_index, epoch + 1,
                    train_history[-1], score)
    best_epoch = select_best(dev_history) + 1
    if best_state is None:  # every dev score was nan or -inf
        best_state = model.state_dict()
    model.load_state(best_state)
    test_metrics, sample = {}, []
    if test is not None and len(test):
        test_metrics = evaluate_prompt(predict_normalized(model, test, pad_id, cfg.batch_size), test.raw, spec)
        for sb, eid in zip(model.predict(test.batch.take(np.arange(min(sample_size, len(test)))), pad_id), test.ids):
            sample.append({"essay_id": eid, "y_doc_tok": sb.y_doc_tok,
                           "per_scale": {str(k): v for k, v in sb.per_scale.items()}, "y_total": sb.y_total})
    return FoldResult(fold_index, best_epoch, dev_history, train_history, test_metrics, best_state, sample)


def _run_fold(args) -> FoldResult:
    factory, init_state, data, split, spec, cfg, pad_id, weights = args
    model = factory()
    if init_state is not None:
        model.load_state(init_state)
    return fit_fold(model, data.subset(split.train_ids), data.subset(split.dev_ids),
                    data.subset(split.test_ids), spec, cfg, pad_id, split.fold_index, weights)


def fit(factory: ModelFactory, data: EncodedSet, folds: Sequence[FoldSplit], spec: PromptSpec,
        cfg: TrainingConfig, pad_id: int, jobs: int = 1, init_state: dict[str, np.ndarray] | None = None,
        weights: L.LossWeights | None = None) -> FitResult:
    """Cross-validated training: one fresh model per fold (optionally started
    from ``init_state``), each selected on its dev split."""
    tasks = [(factory, init_state, data, split, spec, cfg, pad_id, weights) for split in folds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_fold, tasks))
    else:
        results = [_run_fold(t) for t in tasks]
    return FitResult(results)


def pretrain(model: MultiScaleModel, pool: EncodedSet, cfg: TrainingConfig, pad_id: int) -> list[float]:
    """Out-of-domain stage: MSE only, whatever the configured loss weights."""
    coeff = cfg.rdrop_coeff if cfg.rdrop_in_pretrain else 0.0
    weights = L.LossWeights(alpha=1.0, beta=0.0, gamma=0.0, rdrop_coeff=coeff)
    rng = T.make_rng(cfg.seed * 1009 + 997)
    optimizer = Adam(model.parameters(), cfg)
    return [train_epoch(model, pool, cfg, rng, optimizer, pad_id, weights) for _ in range(cfg.pretrain_epochs)]


@dataclass
class TransferResult:
    pretrain_losses: list[float]
    pretrained_state: dict[str, np.ndarray]
    fit: FitResult


def transfer_pipeline(factory: ModelFactory, pool: EncodedSet, data: EncodedSet, folds: Sequence[FoldSplit],
                      spec: PromptSpec, cfg: TrainingConfig, pad_id: int, jobs: int = 1) -> TransferResult:
    """Pretrain on the out-of-domain pool, then fine-tune every fold from the
    pretrained weights."""
    if len(pool) == 0:
        raise ValueError("no out-of-domain essays to pretrain on")
    model = factory()
    losses = pretrain(model, pool, cfg, pad_id)
    state = model.state_dict()
    return TransferResult(losses, state, fit(factory, data, folds, spec, cfg, pad_id, jobs, init_state=state))


# ---------------------------------------------------------------------------
# loss weights and scale search


def loss_weight_grid(values: Sequence[float] = LOSS_GRID_VALUES) -> list[tuple[float, float, float]]:
    return [(1.0, b, g) for b in values for g in values]


def tune_loss_weights(evaluate: Callable[[float, float, float], float],
                      grid: Sequence[tuple[float, float, float]] | None = None) -> tuple[tuple[float, float, float], list]:
    """Pick (alpha, beta, gamma) by dev score; the first grid point wins ties."""
    grid = loss_weight_grid() if grid is None else list(grid)
    scores = [evaluate(*w) for w in grid]
    return grid[select_best(scores)], list(zip(grid, scores))


def parse_scales(spec: str) -> tuple[int, ...]:
    """``"A:B:STEP"`` to the inclusive range A, A+STEP, ..., <= B."""
    try:
        a, b, step = (int(x) for x in spec.split(":"))
    except ValueError:
        raise ValueError(f"scales must look like A:B:STEP, got {spec!r}") from None
    if a < 1 or step < 1 or b < a:
        raise ValueError(f"invalid scale range {spec!r}")
    return tuple(range(a, b + 1, step))


@dataclass
class ScaleSearchState:
    scales: tuple[int, ...]
    baseline: float | None = None
    single: dict[int, float] = field(default_factory=dict)
    qwk_ave: float | None = None
    candidates: list[int] = field(default_factory=list)
    prefixes: list[tuple[tuple[int, ...], float]] = field(default_factory=list)
    selected: tuple[int, ...] = ()
    trace: list[tuple[tuple[int, ...], float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scales": list(self.scales),
            "baseline_qwk": self.baseline,
            "single_scale_qwk": {str(k): v for k, v in self.single.items()},
            "qwk_ave": self.qwk_ave,
            "candidates": self.candidates,
            "trace": [{"combination": ["doc", "tok", *c], "dev_qwk": q} for c, q in self.trace],
            "selected": ["doc", "tok", *self.selected],
        }


def greedy_scale_search(scales: Sequence[int], evaluator: Callable[[tuple[int, ...]], float]) -> ScaleSearchState:
    """Screen each segment scale alongside doc+token, keep those above the
    mean single-scale dev QWK (best first), then add the best prefix of that
    list. ``evaluator`` maps a tuple of segment scales to a dev QWK; the empty
    tuple is the doc+token baseline."""
    scales = tuple(scales)
    if not scales:
        raise ValueError("no segment scales to search")
    state = ScaleSearchState(scales)

    def run(combo):
        q = float(evaluator(combo))
        state.trace.append((combo, q))
        return q

    state.baseline = run(())
    for k in scales:
        state.single[k] = run((k,))
    values = list(state.single.values())
    state.qwk_ave = statistics.fmean(values)
    if max(values) > min(values):
        above = [k for k in scales if state.single[k] > state.qwk_ave]
        # stable sort keeps scale order among equal QWKs
        state.candidates = sorted(above, key=lambda k: -state.single[k])
    for i in range(1, len(state.candidates) + 1):
        prefix = tuple(state.candidates[:i])
        state.prefixes.append((prefix, run(prefix)))
    if state.prefixes:
        best = select_best([q for _, q in state.prefixes])
        state.selected = state.prefixes[best][0]
    return state


def with_dropout(enc_cfg: EncoderConfig, cfg: TrainingConfig) -> EncoderConfig:
    return replace(enc_cfg, dropout_rate=cfg.dropout)
