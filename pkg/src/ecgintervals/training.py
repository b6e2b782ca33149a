"""Losses, target normalization, the Adam optimizer, and task training.

Regression heads minimize MSE on z-scored targets (the QT head averages
its two targets equally, which is scale-fair since both are unit
variance). The P-wave presence classifier minimizes class-weighted
binary cross-entropy, with the negative-class weight defaulting to the
inverse prevalence measured on the training split. The learning rate
halves every three epochs; early stopping watches validation loss with
patience 3 and restores the best-epoch parameters.

The PR regressor trains only on records whose PR label is positive;
zero-PR records (no identifiable P wave) are excluded from its batches
and counted in the log. The presence classifier sees every record.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import ikres_model as im
from . import sigproc
from . import tensorcore as tc
from .dataio import EcgRecord, IntervalLabels
from .tensorcore import Tensor

LOSS_EPS = 1e-7


class TrainingError(Exception):
    """Divergence, empty task subsets, or invalid loss inputs."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.01
    lr_decay: float = 0.5
    decay_every: int = 3
    batch_size: int = 64  # the clinical-scale recipe uses 512; desk default is smaller
    max_epochs: int = 20
    patience: int = 3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def validate(self) -> None:
        if self.lr0 <= 0:
            raise TrainingError("lr0 must be positive")
        if self.patience < 1:
            raise TrainingError("patience must be >= 1")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise TrainingError("batch_size and max_epochs must be >= 1")


# ---------------------------------------------------------------------------
# losses (tape-aware)
# ---------------------------------------------------------------------------

def mse_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    """Mean squared error over every element of the batch."""
    t = np.asarray(target, dtype=pred.data.dtype)
    if t.shape != pred.data.shape:
        raise TrainingError(f"mse shape mismatch: pred {pred.data.shape} vs target {t.shape}")
    diff = pred.data - t
    out = Tensor(np.array([np.mean(diff**2)]), dtype=pred.data.dtype)

    def node():
        if out.grad is None or not pred.requires_grad:
            return
        tc._accumulate(pred, out.grad.item() * 2.0 * diff / diff.size)

    tape = tc.active_tape()
    if tape is not None and pred.requires_grad:
        out.requires_grad = True
        tape.record(node)
    return out


def class_weights_from_prevalence(labels: np.ndarray) -> tuple[float, float]:
    """(pos_weight, neg_weight) with the rarer negative class upweighted by
    the prevalence ratio n_pos/n_neg."""
    labels = np.asarray(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise TrainingError("both classes required to derive weights")
    return 1.0, n_pos / n_neg


def weighted_bce_loss(
    prob: Tensor, labels: np.ndarray, pos_weight: float = 1.0, neg_weight: float = 1.0
) -> Tensor:
    """Class-weighted binary cross-entropy on probabilities.

    Probabilities are clamped to [eps, 1-eps] before the logs; inputs
    outside [0, 1] are an error rather than something to clamp away.
    """
    y = np.asarray(labels, dtype=prob.data.dtype).reshape(prob.data.shape)
    p_raw = prob.data
    if np.any(p_raw < 0) or np.any(p_raw > 1):
        raise TrainingError("probabilities outside [0, 1]")
    if not np.all((y == 0) | (y == 1)):
        raise TrainingError("labels must be binary")
    p = np.clip(p_raw, LOSS_EPS, 1.0 - LOSS_EPS)
    w = np.where(y == 1, pos_weight, neg_weight)
    losses = -w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    out = Tensor(np.array([np.mean(losses)]), dtype=prob.data.dtype)

    def node():
        if out.grad is None or not prob.requires_grad:
            return
        inside = (p_raw > LOSS_EPS) & (p_raw < 1.0 - LOSS_EPS)
        g = -w * (y / p - (1.0 - y) / (1.0 - p)) / y.size
        tc._accumulate(prob, out.grad.item() * np.where(inside, g, 0.0))

    tape = tc.active_tape()
    if tape is not None and prob.requires_grad:
        out.requires_grad = True
        tape.record(node)
    return out


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, params: dict[str, Tensor]) -> "AdamState":
        return cls(
            step=0,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(
    params: dict[str, Tensor],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One bias-corrected Adam update in place; missing grads mean zero.

    A non-finite gradient raises instead of silently poisoning the run.
    """
    if lr <= 0:
        raise TrainingError("learning rate must be positive")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        elif not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}; training halted")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def lr_schedule(epoch: int, lr0: float = 0.01, decay_every: int = 3, decay: float = 0.5) -> float:
    """lr = lr0 * decay^floor(epoch / decay_every)."""
    if epoch < 0:
        raise TrainingError("epoch must be >= 0")
    return lr0 * decay ** (epoch // decay_every)


# ---------------------------------------------------------------------------
# dataset assembly
# ---------------------------------------------------------------------------

@dataclass
class PreparedSplit:
    """Preprocessed model inputs plus aligned label columns for one split."""

    record_ids: list[str]
    x: np.ndarray  # [n, 1, input_len] float32
    pr_ms: np.ndarray
    qrs_ms: np.ndarray
    qt_ms: np.ndarray
    hr_bpm: np.ndarray
    pr_present: np.ndarray  # bool

    def __len__(self) -> int:
        return self.x.shape[0]


def prepare_split(
    records: Sequence[EcgRecord],
    labels: Sequence[IntervalLabels],
    preprocess_config: sigproc.PreprocessConfig = sigproc.PreprocessConfig(),
) -> tuple[PreparedSplit, list[tuple[str, str]]]:
    """Run the preprocessing chain over a split; gate rejections are
    returned as (record_id, reason) rather than raised."""
    xs, ids, rows = [], [], []
    excluded: list[tuple[str, str]] = []
    for record, label in zip(records, labels):
        try:
            vec = sigproc.preprocess(record, preprocess_config)
        except sigproc.RecordRejected as e:
            excluded.append((record.record_id, e.reason))
            continue
        xs.append(vec.astype(np.float32))
        ids.append(record.record_id)
        rows.append((label.pr_ms, label.qrs_ms, label.qt_ms, label.hr_bpm, label.pr_present))
    if not xs:
        raise TrainingError("every record in the split was rejected")
    arr = np.stack(xs)[:, None, :]
    cols = np.array([r[:4] for r in rows], dtype=np.float64)
    return (
        PreparedSplit(
            record_ids=ids,
            x=arr,
            pr_ms=cols[:, 0],
            qrs_ms=cols[:, 1],
            qt_ms=cols[:, 2],
            hr_bpm=cols[:, 3],
            pr_present=np.array([r[4] for r in rows], dtype=bool),
        ),
        excluded,
    )


def task_matrix(task: str, split: PreparedSplit) -> tuple[np.ndarray, np.ndarray, int]:
    """(inputs, targets, n_excluded) for one task.

    Regression targets are in natural units (z-scoring happens against
    the training-split normalizer); the classifier target is the binary
    presence flag. The PR regressor sees only positive-PR rows.
    """
    if task == "pr":
        keep = split.pr_present
        return split.x[keep], split.pr_ms[keep, None], int((~keep).sum())
    if task == "qrs":
        return split.x, split.qrs_ms[:, None], 0
    if task == "qt":
        return split.x, np.stack([split.qt_ms, split.hr_bpm], axis=1), 0
    if task == "prchk":
        return split.x, split.pr_present.astype(np.float64)[:, None], 0
    raise TrainingError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _batch_loss(
    params: dict[str, Tensor],
    model_config: im.IKresConfig,
    task: str,
    xb: np.ndarray,
    yb: np.ndarray,
    weights: Optional[tuple[float, float]],
    training: bool,
) -> tuple[Tensor, Optional[tc.Tape]]:
    tape = tc.Tape() if training else None
    ctx = tape if tape is not None else _NullContext()
    with ctx:
        out = im.forward_model(params, model_config, Tensor(xb), task, training=training)
        if task == "prchk":
            pos_w, neg_w = weights
            loss = weighted_bce_loss(out, yb, pos_w, neg_w)
        else:
            loss = mse_loss(out, yb.astype(np.float32))
    return loss, tape


class _NullContext:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return None


def _dataset_loss(params, model_config, task, x, y, weights, batch_size) -> float:
    total, n = 0.0, 0
    for i in range(0, len(x), batch_size):
        xb, yb = x[i : i + batch_size], y[i : i + batch_size]
        loss, _ = _batch_loss(params, model_config, task, xb, yb, weights, training=False)
        total += loss.data.item() * len(xb)
        n += len(xb)
    return total / max(n, 1)


def predict(
    params: dict[str, Tensor],
    model_config: im.IKresConfig,
    task: str,
    x: np.ndarray,
    batch_size: int = 256,
) -> np.ndarray:
    """Eval-mode forward over an array, concatenated."""
    outs = []
    for i in range(0, len(x), batch_size):
        out = im.forward_model(params, model_config, Tensor(x[i : i + batch_size]), task, False)
        outs.append(out.data.copy())
    return np.concatenate(outs, axis=0)


def train_task(
    task: str,
    train_split: PreparedSplit,
    val_split: PreparedSplit,
    model_config: im.IKresConfig = im.IKresConfig(),
    config: TrainConfig = TrainConfig(),
    config_hash: Optional[str] = None,
    log_fn: Optional[Callable[[dict], None]] = None,
) -> tuple[im.ModelCheckpoint, list[dict]]:
    """Train one task end to end and return its checkpoint plus the log.

    The checkpoint embeds the training-split normalizer (regression) and
    the selected presence threshold (classifier). Early stopping restores
    the parameters of the epoch with the lowest validation loss.
    """
    if task not in im.HEADS:
        raise TrainingError(f"unknown task {task!r}")
    config.validate()
    model_config.validate()

    x_train, y_train_nat, n_excl = task_matrix(task, train_split)
    x_val, y_val_nat, _ = task_matrix(task, val_split)
    if len(x_train) == 0 or len(x_val) == 0:
        raise TrainingError(f"task {task!r} has an empty train or validation subset")

    weights = None
    normalizer = None
    if task == "prchk":
        weights = class_weights_from_prevalence(y_train_nat)
        y_train = y_train_nat
        y_val = y_val_nat
    else:
        normalizer = im.Normalizer.fit(im.HEAD_TARGETS[task], y_train_nat)
        y_train = normalizer.forward(y_train_nat)
        y_val = normalizer.forward(y_val_nat)

    init_seed = (config.seed * 1_000_003 + im.HEADS.index(task) + 1) % (2**63)
    params = im.build_model(model_config, task, init_seed=init_seed)
    state = AdamState.init(im.trainable(params))

    best_val = np.inf
    best_params = None
    best_epoch = -1
    log: list[dict] = []
    epochs_since_best = 0

    for epoch in range(config.max_epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config.lr0, config.decay_every, config.lr_decay)
        order = np.random.default_rng((config.seed, epoch)).permutation(len(x_train))
        total, seen = 0.0, 0
        for i in range(0, len(order), config.batch_size):
            idx = order[i : i + config.batch_size]
            for p in params.values():
                p.zero_grad()
            loss, tape = _batch_loss(
                params, model_config, task, x_train[idx], y_train[idx], weights, training=True
            )
            if not np.isfinite(loss.data.item()):
                raise TrainingError(f"task {task}: non-finite loss at epoch {epoch}")
            tape.backward(loss)
            adam_step(
                im.trainable(params), state, lr,
                config.adam_beta1, config.adam_beta2, config.adam_eps,
            )
            total += loss.data.item() * len(idx)
            seen += len(idx)

        train_loss = total / seen
        val_loss = _dataset_loss(params, model_config, task, x_val, y_val, weights,
                                 config.batch_size)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "wall_s": time.perf_counter() - t0,
        }
        if task == "pr" and epoch == 0:
            entry["excluded_zero_pr"] = n_excl
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)

        if val_loss < best_val:
            best_val = val_loss
            best_epoch = epoch
            best_params = {k: Tensor(v.data.copy(), requires_grad=v.requires_grad)
                           for k, v in params.items()}
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                break

    params = best_params if best_params is not None else params

    threshold = None
    if task == "prchk":
        from . import tandem_eval

        scores = predict(params, model_config, task, x_train, config.batch_size)[:, 0]
        selected = tandem_eval.select_threshold(scores, y_train[:, 0].astype(int))
        threshold = float(selected.threshold)

    ckpt = im.ModelCheckpoint(
        config=model_config,
        task=task,
        params=params,
        normalizer=normalizer,
        prchk_threshold=threshold,
        config_hash=config_hash,
    )
    for entry in log:
        entry["best_epoch"] = best_epoch
    return ckpt, log
