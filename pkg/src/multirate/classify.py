"""Supervised event detection on top of the multirate encoder.

Fine-tuning attaches a softmax MLP head to the final encoder state (one loss
at the last step only, labels include an extra background class at index 0)
with 1:2 positive:background batch sampling. Evaluation pools per-step
states (average or VLAD) and ranks videos with one-vs-rest linear SVMs,
scored by mean average precision over the target classes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Corpus, RunConfig, save_checkpoint
from .errors import UndefinedMetricError
from .optim import ParamStore
from .recurrent import MultirateGru, collect_states
from .rng import RngState
from .seq2seq import sample_window

__all__ = [
    "ClassifierHead", "FinetuneTrainer", "biased_batch", "pool_average",
    "LinearSvm", "svm_train", "average_precision", "mean_average_precision",
    "EvalResult", "BACKGROUND",
]

BACKGROUND = 0
INFERENCE_STEPS = 150  # whole-video inference reads at most this many frames


class ClassifierHead:
    """FC(d1)-ReLU-Dropout(p)-FC(d1)-ReLU-Dropout(p)-FC(classes+1)-Softmax."""

    def __init__(self, store: ParamStore, prefix: str, input_dim: int,
                 num_classes: int, rng: RngState, hidden: int = 1024,
                 dropout_p: float = 0.5):
        if num_classes < 1:
            raise ValueError(f"need at least one target class, got {num_classes}")
        self.num_classes = num_classes
        self.dropout_p = dropout_p
        p = prefix
        self.W1 = store.weight(f"{p}.W1", input_dim, hidden, rng)
        self.b1 = store.zeros(f"{p}.b1", (hidden,))
        self.W2 = store.weight(f"{p}.W2", hidden, hidden, rng)
        self.b2 = store.zeros(f"{p}.b2", (hidden,))
        self.W3 = store.weight(f"{p}.W3", hidden, num_classes + 1, rng)
        self.b3 = store.zeros(f"{p}.b3", (num_classes + 1,))

    def logits(self, x: T.Tensor, training: bool = False,
               rng: RngState | None = None) -> T.Tensor:
        h = T.dropout(T.relu(self.W1 @ x + self.b1), self.dropout_p, training, rng)
        h = T.dropout(T.relu(self.W2 @ h + self.b2), self.dropout_p, training, rng)
        return self.W3 @ h + self.b3

    def probs(self, x: T.Tensor, training: bool = False,
              rng: RngState | None = None) -> T.Tensor:
        return T.softmax(self.logits(x, training, rng))


def pool_average(outputs: np.ndarray) -> np.ndarray:
    """Mean over steps of an (S, d) matrix."""
    outputs = np.asarray(outputs)
    if outputs.ndim != 2 or outputs.shape[0] < 1:
        raise ValueError(f"pool_average expects a non-empty (S, d) matrix, "
                         f"got shape {outputs.shape}")
    return outputs.mean(axis=0)


def biased_batch(corpus: Corpus, batch_size: int, rng: RngState,
                 split: str = "train") -> list:
    """One positive-biased batch of manifest entries (1 positive : 2 background).

    Positives and background videos are each drawn uniformly (with
    replacement); batch_size must be divisible by 3.
    """
    if batch_size < 3 or batch_size % 3 != 0:
        raise ValueError(f"batch_size must be a positive multiple of 3, got {batch_size}")
    entries = corpus.split(split)
    positives = [e for e in entries if e.label is not None and e.label != BACKGROUND]
    background = [e for e in entries if e.label == BACKGROUND]
    if not positives:
        raise ValueError(f"no positive videos in split {split!r}")
    if not background:
        raise ValueError(f"no background videos in split {split!r}")
    n_pos = batch_size // 3
    batch = [positives[int(i)] for i in rng.integers(0, len(positives), size=n_pos)]
    batch += [background[int(i)] for i in rng.integers(0, len(background), size=2 * n_pos)]
    return batch


class FinetuneTrainer:
    """Cross-entropy fine-tuning of the encoder plus classifier head.

    The loss is applied only to the head output at the final encoder step.
    Encoder weights can be seeded from an unsupervised checkpoint (names are
    shared with the pretraining encoder).
    """

    def __init__(self, corpus: Corpus, config: RunConfig, num_classes: int,
                 init_values: dict | None = None, head_hidden: int = 1024):
        self.corpus = corpus
        self.config = config
        self.num_classes = num_classes
        self.rng = RngState(config.seed)
        labels = {e.label for e in corpus.split("train") if e.label is not None}
        bad = labels - set(range(num_classes + 1))
        if bad:
            raise ValueError(f"labels {sorted(bad)} out of range for "
                             f"{num_classes} classes plus background")
        self.store = ParamStore()
        self.encoder = MultirateGru(self.store, "enc", corpus.feature_dim(),
                                    config.mgru_config(), config.cell_size, self.rng)
        self.head = ClassifierHead(self.store, "head", config.cell_size,
                                   num_classes, self.rng, hidden=head_hidden,
                                   dropout_p=config.dropout)
        self.pretrained = False
        if init_values is not None:
            loaded = self.store.load_values(init_values, prefix="enc.")
            if not loaded:
                raise ValueError("checkpoint contains no encoder weights "
                                 "matching this configuration")
            self.pretrained = True

    def _example_loss(self, frames: np.ndarray, label: int, training: bool) -> T.Tensor:
        cfg = self.config
        window = sample_window(frames, cfg.K, self.rng)
        xs = [T.dropout(T.constant(window.present[i]), cfg.dropout, training, self.rng)
              for i in range(window.present.shape[0])]
        _, _, h_last = self.encoder.run(xs)
        logp = T.log_softmax(self.head.logits(h_last, training, self.rng))
        return -T.pick(logp, label)

    def step(self) -> float:
        cfg = self.config
        batch = biased_batch(self.corpus, cfg.batch_size, self.rng)
        self.store.zero_grads()
        losses = [self._example_loss(self.corpus.features(e.id), e.label, True)
                  for e in batch]
        loss = T.add_n(losses) * (1.0 / len(losses))
        loss.backward()
        self.store.clip_global_norm(cfg.clip_norm)
        self.store.adam_step(cfg.lr, weight_decay=cfg.weight_decay)
        return loss.item()

    def train(self, steps: int | None = None, log=None, out_path=None,
              target_loss: float | None = None) -> list:
        """Train for ``steps`` batches (early-stop when ``target_loss`` is hit).

        Returns the per-step loss history.
        """
        steps = steps if steps is not None else self.config.steps
        history = []
        for n in range(1, steps + 1):
            value = self.step()
            history.append(value)
            if log:
                log(f"step={n} loss={value:.6f}")
            if target_loss is not None and value <= target_loss:
                break
        if out_path:
            save_checkpoint(out_path, self.store, self.config.to_dict())
        return history

    def video_states(self, frames: np.ndarray) -> np.ndarray:
        return collect_states(self.encoder, frames, INFERENCE_STEPS)


# ---------------------------------------------------------------- linear SVM

@dataclass
class LinearSvm:
    """One-vs-rest linear classifiers: decision value per class is w.x + b."""

    classes: tuple
    weights: np.ndarray  # (num_classes, d)
    biases: np.ndarray   # (num_classes,)

    def decision_values(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) @ self.weights.T + self.biases


def svm_train(x: np.ndarray, y, c: float = 1.0, iters: int = 500,
              classes=None) -> LinearSvm:
    """Deterministic full-batch subgradient descent on the hinge objective.

    Objective per class: mean hinge loss + ||w||^2 / (2C). The schedule is
    fixed (Pegasos-style 1/(lambda t) rate), so retraining on the same data
    reproduces identical decision values, and duplicating the dataset leaves
    the iterates unchanged.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError(f"need an (N>=2, d) matrix, got shape {x.shape}")
    if c <= 0:
        raise ValueError(f"regularization C must be positive, got {c}")
    if classes is None:
        classes = tuple(sorted(int(v) for v in set(y.tolist()) if v != BACKGROUND))
    else:
        classes = tuple(int(v) for v in classes)
    if not classes:
        raise ValueError("no target classes to train on")
    lam = 1.0 / c
    n, d = x.shape
    weights = np.zeros((len(classes), d))
    biases = np.zeros(len(classes))
    for ci, cls in enumerate(classes):
        sign = np.where(y == cls, 1.0, -1.0)
        if np.all(sign > 0) or np.all(sign < 0):
            raise ValueError(f"class {cls}: need both positive and negative examples")
        w = np.zeros(d)
        b = 0.0
        for t in range(1, iters + 1):
            margins = sign * (x @ w + b)
            viol = margins < 1.0
            eta = 1.0 / (lam * t)
            gw = lam * w - (sign[viol, None] * x[viol]).sum(axis=0) / n
            gb = -sign[viol].sum() / n
            w -= eta * gw
            b -= eta * gb
        weights[ci] = w
        biases[ci] = b
    return LinearSvm(classes, weights, biases)


# ---------------------------------------------------------------- metrics

def average_precision(scores, labels) -> float:
    """AP from ranked decision scores; ties break by original index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be matching 1-D arrays")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise UndefinedMetricError("average precision is undefined with no positives")
    order = np.lexsort((np.arange(len(scores)), -scores))
    ranked = labels[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(scores) + 1)
    return float((hits[ranked] / ranks[ranked]).sum() / n_pos)


@dataclass
class EvalResult:
    per_class_ap: dict
    map: float


def mean_average_precision(decision_values: np.ndarray, labels,
                           classes) -> EvalResult:
    """Mean over target classes of per-class AP (background excluded)."""
    labels = np.asarray(labels)
    per_class = {}
    for ci, cls in enumerate(classes):
        per_class[int(cls)] = average_precision(decision_values[:, ci], labels == cls)
    return EvalResult(per_class, float(np.mean(list(per_class.values()))))
