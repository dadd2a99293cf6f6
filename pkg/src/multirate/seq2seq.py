"""Attention decoding and bidirectional context reconstruction.

A clip of K frames is encoded by the multirate GRU; two attention decoders
that share no parameters reconstruct the K frames before the clip and the K
frames after it. The past decoder sees its teacher-forced inputs and targets
in reversed order (nearest frame first). Each training batch picks exactly
one decoder with probability 0.5, so only that decoder and the encoder
receive gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Corpus, RunConfig, save_checkpoint
from .optim import ParamStore
from .recurrent import GruCell, MultirateGru, collect_states
from .rng import RngState

__all__ = [
    "EncoderTrace", "AttentionDecoder", "ReconWindow", "sample_window",
    "masked_huber_loss", "ReconstructionModel", "ReconstructionTrainer",
]

DIRECTIONS = ("past", "future")


@dataclass
class EncoderTrace:
    """Per-step encoder outputs plus the final state, as seen by a decoder."""

    outputs: list
    last_state: T.Tensor

    def __post_init__(self):
        if not self.outputs:
            raise ValueError("encoder trace needs at least one step")
        self._matrix = None

    @property
    def steps(self) -> int:
        return len(self.outputs)

    def matrix(self) -> T.Tensor:
        if self._matrix is None:
            self._matrix = T.stack_rows(self.outputs)
        return self._matrix


class AttentionDecoder:
    """GRU decoder attending over encoder outputs.

    Per step: combine the input frame with the previous context, run the GRU,
    score every encoder output against the new state through a shared tanh
    layer of ``attention_size`` units, softmax into weights, take the weighted
    average of encoder outputs as the new context, and combine the GRU output
    with the context into the prediction.
    """

    def __init__(self, store: ParamStore, prefix: str, input_dim: int,
                 enc_out_dim: int, state_dim: int, out_dim: int,
                 attention_size: int, rng: RngState):
        self.input_dim = input_dim
        self.enc_out_dim = enc_out_dim
        self.state_dim = state_dim
        self.out_dim = out_dim
        self.attention_size = attention_size
        p = prefix
        self.W_in_y = store.weight(f"{p}.W_in_y", input_dim, input_dim, rng)
        self.W_in_a = store.weight(f"{p}.W_in_a", enc_out_dim, input_dim, rng)
        self.b_in = store.zeros(f"{p}.b_in", (input_dim,))
        self.cell = GruCell(store, f"{p}.cell", input_dim, state_dim, state_dim, rng)
        self.W_he = store.weight(f"{p}.W_he", state_dim, attention_size, rng)
        self.W_oe = store.weight(f"{p}.W_oe", enc_out_dim, attention_size, rng)
        self.v = store.add(f"{p}.v",
                           rng.uniform((attention_size,),
                                       -math.sqrt(6.0 / (attention_size + 1)),
                                       math.sqrt(6.0 / (attention_size + 1))))
        self.W_out_o = store.weight(f"{p}.W_out_o", state_dim, out_dim, rng)
        self.W_out_a = store.weight(f"{p}.W_out_a", enc_out_dim, out_dim, rng)
        self.b_out = store.zeros(f"{p}.b_out", (out_dim,))

    def init_context(self) -> T.Tensor:
        return T.zeros((self.enc_out_dim,))

    def prepare(self, trace: EncoderTrace) -> dict:
        """Cache the per-sequence encoder projections for the score layer."""
        matrix = trace.matrix()
        return {"trace": trace,
                "matrix": matrix,
                "enc_proj": T.matmul(matrix, T.transpose(self.W_oe))}

    def step(self, y_t: T.Tensor, a_prev: T.Tensor, h_prev: T.Tensor, prepared: dict):
        """Returns (h_t, context_t, output_t, attention_weights_t)."""
        y_in = self.W_in_y @ y_t + self.W_in_a @ a_prev + self.b_in
        h_t, o_cell = self.cell.step(y_in, h_prev)
        scores = T.matmul(T.tanh(prepared["enc_proj"] + (self.W_he @ h_t)), self.v)
        weights = T.softmax(scores)
        context = T.matmul(weights, prepared["matrix"])
        output = self.W_out_o @ o_cell + self.W_out_a @ context + self.b_out
        return h_t, context, output, weights


# ------------------------------------------------------------- windows

@dataclass
class ReconWindow:
    """Three aligned K-frame segments; masks flag real (non-padded) rows."""

    past: np.ndarray
    present: np.ndarray
    future: np.ndarray
    past_mask: np.ndarray
    present_mask: np.ndarray
    future_mask: np.ndarray


def _pad_segment(rows: np.ndarray, k: int):
    n = rows.shape[0]
    seg = np.zeros((k, rows.shape[1]), dtype=rows.dtype)
    seg[:n] = rows
    mask = np.zeros(k, dtype=bool)
    mask[:n] = True
    return seg, mask


def sample_window(features: np.ndarray, k: int, rng: RngState) -> ReconWindow:
    """Pick past/present/future segments of k consecutive frames each.

    Videos with at least 3k frames contribute a uniformly random window of 3k
    consecutive frames. Shorter videos are split into consecutive thirds
    (ceil(T/3), ceil(T/3), rest), each zero-padded at the tail to k rows.
    """
    if k < 1:
        raise ValueError(f"segment length must be >= 1, got {k}")
    t = features.shape[0]
    if t < 1:
        raise ValueError("cannot sample a window from an empty feature sequence")
    if t >= 3 * k:
        start = int(rng.integers(0, t - 3 * k + 1))
        full = np.ones(k, dtype=bool)
        return ReconWindow(
            features[start:start + k].copy(),
            features[start + k:start + 2 * k].copy(),
            features[start + 2 * k:start + 3 * k].copy(),
            full.copy(), full.copy(), full.copy(),
        )
    n1 = math.ceil(t / 3)
    n2 = min(n1, t - n1)
    past, past_mask = _pad_segment(features[:n1], k)
    present, present_mask = _pad_segment(features[n1:n1 + n2], k)
    future, future_mask = _pad_segment(features[n1 + n2:], k)
    return ReconWindow(past, present, future, past_mask, present_mask, future_mask)


def masked_huber_loss(preds: list, targets: np.ndarray, mask: np.ndarray,
                      delta: float):
    """Mean Huber over valid frames and feature dims.

    Returns (loss tensor, valid frame count); all-masked input gives a zero
    loss with count 0 so padding can never contribute loss or gradient.
    """
    d = targets.shape[1]
    terms = [T.sum_all(T.huber(pred, T.constant(targets[i]), delta))
             for i, pred in enumerate(preds) if mask[i]]
    n_valid = len(terms)
    if n_valid == 0:
        return T.zeros(()), 0
    return T.add_n(terms) * (1.0 / (d * n_valid)), n_valid


# ------------------------------------------------------------- model

class ReconstructionModel:
    """Multirate encoder with past and future attention decoders."""

    def __init__(self, store: ParamStore, feature_dim: int, config: RunConfig,
                 rng: RngState):
        self.config = config
        self.feature_dim = feature_dim
        cell = config.cell_size
        self.encoder = MultirateGru(store, "enc", feature_dim,
                                    config.mgru_config(), cell, rng)
        self.decoders = {
            name: AttentionDecoder(store, f"dec_{name}", feature_dim, cell,
                                   cell, feature_dim, config.attention_size, rng)
            for name in DIRECTIONS
        }

    def encode(self, frames: np.ndarray, training: bool = False,
               rng: RngState | None = None) -> EncoderTrace:
        """Run the encoder over a (K, D) frame block, with input/output dropout
        when training."""
        p = self.config.dropout
        xs = [T.dropout(T.constant(frames[i]), p, training, rng)
              for i in range(frames.shape[0])]
        states, outputs, h_last = self.encoder.run(xs)
        outputs = [T.dropout(o, p, training, rng) for o in outputs]
        return EncoderTrace(outputs, h_last)

    def encode_states(self, frames: np.ndarray, max_steps: int | None = None) -> np.ndarray:
        """Eval-mode per-step hidden states (S, state_dim)."""
        return collect_states(self.encoder, frames, max_steps)

    def reconstruct(self, trace: EncoderTrace, window: ReconWindow,
                    direction: str, training: bool = False,
                    rng: RngState | None = None):
        """Teacher-forced reconstruction loss for one direction.

        Decoder state starts from the (dropout-regularized) encoder state; the
        step-0 input is an all-zero frame; later inputs are the ground-truth
        previous target frames. Past direction reverses inputs and targets.
        Returns (loss tensor, valid frame count).
        """
        if direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
        if direction == "past":
            targets = window.past[::-1].copy()
            mask = window.past_mask[::-1].copy()
        else:
            targets = window.future
            mask = window.future_mask
        decoder = self.decoders[direction]
        prepared = decoder.prepare(trace)
        h = T.dropout(trace.last_state, self.config.dropout, training, rng)
        a = decoder.init_context()
        k = targets.shape[0]
        preds = []
        y = T.zeros((self.feature_dim,))
        for i in range(k):
            h, a, out, _ = decoder.step(y, a, h, prepared)
            preds.append(out)
            y = T.constant(targets[i])
        return masked_huber_loss(preds, targets, mask, self.config.huber_delta)


# ------------------------------------------------------------- trainer

class ReconstructionTrainer:
    """Unsupervised pretraining loop over a feature corpus."""

    def __init__(self, corpus: Corpus, config: RunConfig):
        self.corpus = corpus
        self.config = config
        self.rng = RngState(config.seed)
        self.train_ids = [e.id for e in corpus.split("train")]
        if not self.train_ids:
            raise ValueError("corpus has no training videos")
        self.store = ParamStore()
        self.model = ReconstructionModel(self.store, corpus.feature_dim(),
                                         config, self.rng)

    def pick_direction(self) -> str:
        """The per-batch decoder drop: each decoder trains with probability 0.5."""
        return "past" if self.rng.random() < 0.5 else "future"

    def step(self) -> dict:
        cfg = self.config
        direction = self.pick_direction()
        self.store.zero_grads()
        losses = []
        valid_total = 0
        for _ in range(cfg.batch_size):
            vid = self.train_ids[int(self.rng.integers(0, len(self.train_ids)))]
            window = sample_window(self.corpus.features(vid), cfg.K, self.rng)
            trace = self.model.encode(window.present, training=True, rng=self.rng)
            loss_b, n_valid = self.model.reconstruct(trace, window, direction,
                                                     training=True, rng=self.rng)
            losses.append(loss_b)
            valid_total += n_valid
        loss = T.add_n(losses) * (1.0 / cfg.batch_size)
        loss.backward()
        self.store.clip_global_norm(cfg.clip_norm)
        self.store.adam_step(cfg.lr, weight_decay=cfg.weight_decay)
        return {"loss": loss.item(), "direction": direction,
                "valid_frames": valid_total}

    def train(self, steps: int | None = None, log=None, out_path=None,
              checkpoint_every: int = 0) -> list:
        steps = steps if steps is not None else self.config.steps
        history = []
        for n in range(1, steps + 1):
            stats = self.step()
            history.append(stats["loss"])
            if log:
                log(f"step={n} loss={stats['loss']:.6f} dir={stats['direction']}")
            if out_path and checkpoint_every and n % checkpoint_every == 0 and n < steps:
                save_checkpoint(out_path, self.store, self.config.to_dict())
        if out_path:
            save_checkpoint(out_path, self.store, self.config.to_dict())
        return history
