"""Splits, Adam, the epoch loop with early stopping, random search, and a
scikit-learn estimator facade over the whole thing.

Training operates on pre-featurised tensors grouped by domain. One epoch is
ceil(max_e n_e / batch_size) optimizer steps, where every step draws one
batch per training domain (domains weighted equally, small domains cycling
through reshuffles, so they are effectively resampled with replacement).
Validation loss is the uniform domain average of pooled binary cross-entropy
on the validation tensors, computed in eval mode; the parameters of the best
validation epoch are the ones returned.

Trajectories are bitwise reproducible: all randomness (init, batch order,
dropout, meta-splits) derives from the config seed.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .model import GruNetwork, predict_probabilities
from .objectives import (
    OBJECTIVES,
    DomainBatch,
    FishrState,
    GroupDroState,
    PenaltyConfig,
    compute_update,
    domain_bce_loss,
)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

TEST_FRACTION = 0.2
N_FOLDS = 5


class TrainingDiverged(RuntimeError):
    """Non-finite loss; carries the step and per-domain losses at failure."""

    def __init__(self, epoch: int, step: int, domain_losses: dict):
        self.epoch = epoch
        self.step = step
        self.domain_losses = domain_losses
        listing = ", ".join(f"{d}={v!r}" for d, v in sorted(domain_losses.items()))
        super().__init__(f"non-finite loss at epoch {epoch}, step {step}: {listing}")


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation settings for one training run."""

    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    dropout: float = 0.5
    batch_size: int = 128
    hidden_dim: int = 64
    n_layers: int = 1
    max_epochs: int = 1000
    patience: int = 10
    seed: int = 0
    objective: str = "erm"
    penalties: PenaltyConfig = field(default_factory=PenaltyConfig)
    grad_clip: Optional[float] = None  # global norm; None disables clipping
    stay_averaged: bool = False

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.batch_size < 1 or self.hidden_dim < 1 or self.n_layers < 1:
            raise ValueError("batch_size, hidden_dim and n_layers must be >= 1")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ValueError("grad_clip must be > 0 when set")


@dataclass
class DomainData:
    """One domain's featurised cohort slice."""

    domain_id: str
    stay_ids: tuple
    inputs: np.ndarray  # (n, T, P)
    labels: np.ndarray  # (n, T) float 0/1
    mask: np.ndarray  # (n, T) bool

    def __post_init__(self) -> None:
        n = len(self.stay_ids)
        if self.inputs.shape[0] != n or self.labels.shape[0] != n or self.mask.shape[0] != n:
            raise ValueError(f"domain {self.domain_id}: inconsistent leading dimension")

    @property
    def n_stays(self) -> int:
        return len(self.stay_ids)

    def subset(self, stay_ids: Sequence[str]) -> "DomainData":
        index = {sid: i for i, sid in enumerate(self.stay_ids)}
        rows = np.array([index[sid] for sid in stay_ids], dtype=np.intp)
        return DomainData(
            domain_id=self.domain_id,
            stay_ids=tuple(stay_ids),
            inputs=self.inputs[rows],
            labels=self.labels[rows],
            mask=self.mask[rows],
        )


@dataclass(frozen=True)
class SplitPlan:
    """Stay-level test/fold assignment, stratified per domain."""

    domains: tuple
    test_ids: Mapping[str, tuple]
    folds: tuple  # length N_FOLDS; each a {domain: (train_ids, val_ids)}

    def train_ids(self, fold: int, domain: str) -> tuple:
        return self.folds[fold][domain][0]

    def val_ids(self, fold: int, domain: str) -> tuple:
        return self.folds[fold][domain][1]


def make_splits(
    stay_ids_by_domain: Mapping[str, Sequence[str]],
    seed: int,
    test_fraction: float = TEST_FRACTION,
    n_folds: int = N_FOLDS,
) -> SplitPlan:
    """Hold out `test_fraction` per domain, then fold the remainder.

    Every fold uses one chunk of the remaining pool as validation and the
    rest as training, so with the default fractions the overall split is
    64% train / 16% validation / 20% test per domain.
    """
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must be in (0, 1)")
    if n_folds < 2:
        raise ValueError("n_folds must be >= 2")
    rng = np.random.default_rng(seed)
    domains = tuple(sorted(stay_ids_by_domain))
    test_ids: dict[str, tuple] = {}
    folds: list[dict[str, tuple]] = [dict() for _ in range(n_folds)]
    for domain in domains:
        ids = sorted(stay_ids_by_domain[domain])
        if len(ids) != len(set(ids)):
            raise ValueError(f"duplicate stay ids in domain {domain!r}")
        order = rng.permutation(len(ids))
        shuffled = [ids[i] for i in order]
        n_test = max(1, round(test_fraction * len(ids)))
        pool = shuffled[n_test:]
        if len(pool) < n_folds:
            raise ValueError(
                f"domain {domain!r}: {len(ids)} stays leave a pool of {len(pool)},"
                f" too few for {n_folds} folds plus a test split"
            )
        test_ids[domain] = tuple(sorted(shuffled[:n_test]))
        chunks = np.array_split(np.arange(len(pool)), n_folds)
        for fold, chunk in enumerate(chunks):
            val = {pool[i] for i in chunk}
            folds[fold][domain] = (
                tuple(sorted(set(pool) - val)),
                tuple(sorted(val)),
            )
    return SplitPlan(domains=domains, test_ids=test_ids, folds=tuple(folds))


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def for_params(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(
    params: dict,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    learning_rate: float,
    weight_decay: float = 0.0,
) -> dict:
    """One canonical Adam update; decay enters as an additive gradient term."""
    state.t += 1
    bc1 = 1.0 - ADAM_BETA1**state.t
    bc2 = 1.0 - ADAM_BETA2**state.t
    out = {}
    for name, theta in params.items():
        g = grads[name] + weight_decay * theta
        state.m[name] = ADAM_BETA1 * state.m[name] + (1.0 - ADAM_BETA1) * g
        state.v[name] = ADAM_BETA2 * state.v[name] + (1.0 - ADAM_BETA2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        out[name] = theta - learning_rate * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return out


def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale all gradients together so their global L2 norm is <= max_norm."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads, total
    factor = max_norm / total
    return {k: g * factor for k, g in grads.items()}, total


class _DomainSampler:
    """Cyclic shuffled index stream; reshuffles at every wrap, so domains
    smaller than the step budget are resampled within an epoch."""

    def __init__(self, n: int, rng: np.random.Generator):
        self.n = n
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def take(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.intp)
        filled = 0
        while filled < count:
            if self.pos == self.n:
                self.order = self.rng.permutation(self.n)
                self.pos = 0
            grab = min(count - filled, self.n - self.pos)
            out[filled : filled + grab] = self.order[self.pos : self.pos + grab]
            self.pos += grab
            filled += grab
        return out


@dataclass
class EpochRecord:
    epoch: int
    train_losses: dict  # domain -> mean loss over the epoch's steps
    val_loss: float
    penalty: float


@dataclass
class TrainResult:
    params: dict  # weights of the best validation epoch
    best_epoch: int
    best_val_loss: float
    history: list
    model: GruNetwork  # carries the best weights


def steps_per_epoch(domain_sizes: Sequence[int], batch_size: int) -> int:
    """An epoch covers the largest domain once: ceil(max_e n_e / batch)."""
    if not domain_sizes or min(domain_sizes) < 1:
        raise ValueError("domain_sizes must be non-empty positive counts")
    return max(1, math.ceil(max(domain_sizes) / batch_size))


def evaluation_loss(model: GruNetwork, data: Mapping[str, DomainData], chunk: int = 256) -> float:
    """Uniform domain average of pooled BCE, eval mode, chunked for memory."""
    per_domain = []
    for domain in sorted(data):
        d = data[domain]
        total = 0.0
        count = 0.0
        for lo in range(0, d.n_stays, chunk):
            sl = slice(lo, lo + chunk)
            fp = model.forward(d.inputs[sl], train=False)
            loss = domain_bce_loss(fp, d.labels[sl], d.mask[sl])
            cells = float(d.mask[sl].sum())
            total += loss.value.item() * cells
            count += cells
        per_domain.append(total / count)
    return float(np.mean(per_domain))


def train(
    config: TrainConfig,
    train_data: Mapping[str, DomainData],
    val_data: Mapping[str, DomainData],
) -> TrainResult:
    """Full optimisation run; returns the best-validation-epoch weights."""
    if not train_data:
        raise ValueError("train: no training domains")
    domains = sorted(train_data)
    widths = {train_data[d].inputs.shape[2] for d in domains}
    if len(widths) != 1:
        raise ValueError(f"train: inconsistent feature widths {sorted(widths)}")

    model = GruNetwork(
        input_width=widths.pop(),
        hidden_dim=config.hidden_dim,
        n_layers=config.n_layers,
        dropout=config.dropout,
        seed=config.seed,
    )
    batch_rng = np.random.default_rng([config.seed, 101])
    dropout_rng = np.random.default_rng([config.seed, 202])
    split_rng = np.random.default_rng([config.seed, 303])
    samplers = {d: _DomainSampler(train_data[d].n_stays, batch_rng) for d in domains}
    adam = AdamState.for_params(model.get_values())
    groupdro_state = GroupDroState(domain_ids=list(domains))
    fishr_state = FishrState()

    n_steps = steps_per_epoch([train_data[d].n_stays for d in domains], config.batch_size)
    history: list[EpochRecord] = []
    best_val = math.inf
    best_epoch = 0
    best_params = model.get_values()
    epochs_since_best = 0
    global_step = 0

    for epoch in range(1, config.max_epochs + 1):
        sums = {d: 0.0 for d in domains}
        penalty_sum = 0.0
        for step in range(n_steps):
            batches = []
            for d in domains:
                rows = samplers[d].take(config.batch_size)
                dd = train_data[d]
                batches.append(
                    DomainBatch(
                        domain_id=d,
                        inputs=dd.inputs[rows],
                        labels=dd.labels[rows],
                        mask=dd.mask[rows],
                    )
                )
            result = compute_update(
                model,
                batches,
                config.objective,
                config.penalties,
                step=global_step,
                groupdro_state=groupdro_state,
                fishr_state=fishr_state,
                split_rng=split_rng,
                dropout_rng=dropout_rng,
                train=True,
                stay_averaged=config.stay_averaged,
                mldg_inner_lr=config.learning_rate,
            )
            if not math.isfinite(result.loss_value) or not all(
                math.isfinite(v) for v in result.domain_loss_values.values()
            ):
                raise TrainingDiverged(epoch, global_step, result.domain_loss_values)
            grads = result.grads
            if config.grad_clip is not None:
                grads, _ = clip_gradients(grads, config.grad_clip)
            model.set_values(
                adam_step(model.get_values(), grads, adam, config.learning_rate, config.weight_decay)
            )
            for d, v in result.domain_loss_values.items():
                sums[d] += v
            penalty_sum += result.penalty_value
            global_step += 1

        val_loss = evaluation_loss(model, val_data)
        if not math.isfinite(val_loss):
            raise TrainingDiverged(epoch, global_step, {"validation": val_loss})
        history.append(
            EpochRecord(
                epoch=epoch,
                train_losses={d: sums[d] / n_steps for d in domains},
                val_loss=val_loss,
                penalty=penalty_sum / n_steps,
            )
        )
        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = model.get_values()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    model.set_values(best_params)
    return TrainResult(
        params=best_params,
        best_epoch=best_epoch,
        best_val_loss=best_val,
        history=history,
        model=model,
    )


def write_history_csv(stream, history: Sequence[EpochRecord]) -> None:
    if not history:
        raise ValueError("empty history")
    domains = sorted(history[0].train_losses)
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(["epoch"] + [f"train_loss.{d}" for d in domains] + ["val_loss"])
    for rec in history:
        row = [rec.epoch] + [repr(rec.train_losses[d]) for d in domains] + [repr(rec.val_loss)]
        writer.writerow(row)


# Hyperparameter search supports. The weight-decay grid is zero plus the
# powers of ten from 1e-7 through 1e0.
WEIGHT_DECAY_CHOICES = (0.0, 1e-7, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0)
DROPOUT_CHOICES = (0.3, 0.4, 0.5, 0.6, 0.7)
BATCH_CHOICES = (128, 256, 512)
HIDDEN_CHOICES = (32, 64, 128)
LAYER_RANGE = (1, 10)


def draw_train_config(rng: np.random.Generator, base: TrainConfig) -> TrainConfig:
    """One random-search draw; fields not searched are taken from `base`."""
    penalties = replace(
        base.penalties,
        coral_gamma=10.0 ** rng.uniform(2.0, 4.0),
        vrex_lambda=10.0 ** rng.uniform(2.0, 4.0),
        vrex_warmup=int(round(10.0 ** rng.uniform(0.0, 3.0))),
        fishr_lambda=10.0 ** rng.uniform(2.0, 4.0),
        fishr_warmup=int(round(10.0 ** rng.uniform(0.0, 3.0))),
        mldg_beta=10.0 ** rng.uniform(-1.0, 1.0),
        mldg_n_meta_test=int(rng.choice((1, 2))),
        groupdro_eta=10.0 ** rng.uniform(-3.0, -1.0),
    )
    return replace(
        base,
        learning_rate=float(np.exp(rng.uniform(-10.0, -3.0))),
        weight_decay=float(rng.choice(WEIGHT_DECAY_CHOICES)),
        dropout=float(rng.choice(DROPOUT_CHOICES)),
        batch_size=int(rng.choice(BATCH_CHOICES)),
        hidden_dim=int(rng.choice(HIDDEN_CHOICES)),
        n_layers=int(rng.integers(LAYER_RANGE[0], LAYER_RANGE[1] + 1)),
        penalties=penalties,
    )


@dataclass
class SearchResult:
    best: TrainConfig
    best_mean_val_loss: float
    table: list  # (config, per-fold val losses) in draw order


def random_search(
    folds: Sequence[tuple],
    base: TrainConfig,
    n_draws: int = 10,
    seed: int = 0,
    runner: Optional[Callable[[TrainConfig, Mapping, Mapping], float]] = None,
) -> SearchResult:
    """Draw `n_draws` configs, train each on every fold, keep the lowest
    mean validation loss. `folds` holds (train_data, val_data) pairs; the
    test domain never appears in either, so selection only ever sees
    training-domain validation stays. `runner` is swappable for tests."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    if not folds:
        raise ValueError("random_search: no folds")
    if runner is None:
        runner = lambda cfg, tr, va: train(cfg, tr, va).best_val_loss
    rng = np.random.default_rng(seed)
    table = []
    best = None
    best_mean = math.inf
    for draw in range(n_draws):
        config = draw_train_config(rng, replace(base, seed=base.seed + draw))
        losses = [runner(config, tr, va) for tr, va in folds]
        mean = float(np.mean(losses))
        table.append((config, losses))
        if mean < best_mean:
            best_mean = mean
            best = config
    return SearchResult(best=best, best_mean_val_loss=best_mean, table=table)


class SequenceClassifier(ClassifierMixin, BaseEstimator):
    """Recurrent binary classifier with a scikit-learn surface.

    X is (n, T, P). y may be (n,) for an end-of-sequence label or (n, T) for
    per-hour labels, in which case `fit` also accepts a boolean (n, T) mask
    of labelled hours. A validation slice is carved off internally for early
    stopping; `predict_proba` scores the final hour, and
    `predict_proba_sequence` returns the full per-hour matrix.
    """

    def __init__(
        self,
        learning_rate: float = 1e-3,
        weight_decay: float = 0.0,
        dropout: float = 0.5,
        batch_size: int = 128,
        hidden_dim: int = 64,
        n_layers: int = 1,
        max_epochs: int = 1000,
        patience: int = 10,
        seed: int = 0,
        val_fraction: float = 0.2,
        grad_clip: Optional[float] = 10.0,
    ):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.batch_size = batch_size
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.val_fraction = val_fraction
        self.grad_clip = grad_clip

    def fit(self, X, y, mask=None):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        if X.ndim != 3:
            raise ValueError(f"X must be (n, T, P), got {X.shape}")
        n, t, _ = X.shape
        if y.ndim == 1:
            labels = np.zeros((n, t))
            labels[:, -1] = y
            mask = np.zeros((n, t), dtype=bool)
            mask[:, -1] = True
        elif y.shape == (n, t):
            labels = y
            mask = np.ones((n, t), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
        else:
            raise ValueError(f"y must be (n,) or (n, T), got {y.shape}")

        rng = np.random.default_rng(self.seed)
        order = rng.permutation(n)
        n_val = max(1, round(self.val_fraction * n))
        if n - n_val < 1:
            raise ValueError("not enough samples to carve a validation slice")
        val_rows, train_rows = order[:n_val], order[n_val:]

        def pack(rows):
            return {
                "all": DomainData(
                    domain_id="all",
                    stay_ids=tuple(str(i) for i in rows),
                    inputs=X[rows],
                    labels=labels[rows],
                    mask=mask[rows],
                )
            }

        config = TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            dropout=self.dropout,
            batch_size=self.batch_size,
            hidden_dim=self.hidden_dim,
            n_layers=self.n_layers,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            grad_clip=self.grad_clip,
        )
        result = train(config, pack(train_rows), pack(val_rows))
        self.model_ = result.model
        self.history_ = result.history
        self.classes_ = np.array([0, 1])
        return self

    def _scores(self, X, kind: str) -> np.ndarray:
        if not hasattr(self, "model_"):
            raise NotFittedError("SequenceClassifier is not fitted; call fit first")
        X = np.asarray(X, dtype=np.float64)
        fp = self.model_.forward(X, train=False)
        return predict_probabilities(fp.logit_matrix(), kind)

    def predict_proba(self, X) -> np.ndarray:
        pos = self._scores(X, "single_at_24h")[:, 0]
        return np.column_stack([1.0 - pos, pos])

    def predict_proba_sequence(self, X) -> np.ndarray:
        return self._scores(X, "hourly")

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)
