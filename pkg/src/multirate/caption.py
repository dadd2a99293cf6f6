"""Caption generation: vocabulary, embedding attention decoder, beam search,
and BLEU scoring.

Captions are lowercased whitespace tokens wrapped as <GO> w_1..w_N <EOS> and
padded with <PAD>; training minimizes the masked negative log-likelihood of
the next token. Decoding is beam search over accumulated log-probabilities
with finished hypotheses retiring into a pool (no length normalization).
"""

from __future__ import annotations

import math
import warnings
from collections import Counter
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import Corpus, RunConfig, save_checkpoint
from .optim import ParamStore
from .recurrent import MultirateGru
from .rng import RngState
from .seq2seq import AttentionDecoder, EncoderTrace

__all__ = [
    "GO", "PAD", "EOS", "UNK", "Vocab", "CaptionModel", "CaptionTrainer",
    "BeamHyp", "beam_decode", "greedy_decode", "bleu", "corpus_bleu",
    "tokenize",
]

GO, PAD, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<GO>", "<PAD>", "<EOS>", "<UNK>")


def tokenize(text: str) -> list:
    return text.lower().split()


class Vocab:
    """Token-index mapping with fixed reserved slots."""

    def __init__(self, tokens):
        self.index = {tok: i for i, tok in enumerate(RESERVED)}
        for tok in tokens:
            if tok in self.index:
                raise ValueError(f"token {tok!r} collides with a reserved token")
            self.index[tok] = len(self.index)
        self.tokens = list(self.index)

    @classmethod
    def build(cls, texts, min_count: int = 1) -> "Vocab":
        counts = Counter(tok for text in texts for tok in tokenize(text))
        kept = sorted(tok for tok, c in counts.items() if c >= min_count
                      and tok not in RESERVED)
        return cls(kept)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def encode(self, text: str) -> list:
        return [self.index.get(tok, UNK) for tok in tokenize(text)]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids if i >= len(RESERVED))


def wrap_caption(token_ids, max_len: int) -> np.ndarray:
    """Target sequence w_1..w_N <EOS>, truncated and <PAD>-padded to max_len."""
    ids = list(token_ids)
    if len(ids) + 1 > max_len:
        warnings.warn(f"caption of {len(ids)} tokens truncated to {max_len - 1}")
        ids = ids[:max_len - 1]
    targets = ids + [EOS] + [PAD] * (max_len - len(ids) - 1)
    return np.asarray(targets, dtype=np.int64)


class CaptionModel:
    """Multirate encoder plus a word-embedding attention decoder over the
    vocabulary."""

    def __init__(self, store: ParamStore, feature_dim: int, config: RunConfig,
                 vocab_size: int, rng: RngState, embed_dim: int | None = None):
        if vocab_size < len(RESERVED) + 1:
            raise ValueError(f"vocabulary too small ({vocab_size}); need at "
                             f"least one real token beyond {RESERVED}")
        self.config = config
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim or config.cell_size
        cell = config.cell_size
        self.encoder = MultirateGru(store, "enc", feature_dim,
                                    config.mgru_config(), cell, rng)
        bound = math.sqrt(6.0 / (vocab_size + self.embed_dim))
        self.embed = store.add("cap.embed",
                               rng.uniform((vocab_size, self.embed_dim), -bound, bound))
        self.decoder = AttentionDecoder(store, "cap.dec", self.embed_dim, cell,
                                        cell, cell, config.attention_size, rng)
        self.W_vocab = store.weight("cap.W_vocab", cell, vocab_size, rng)
        self.b_vocab = store.zeros("cap.b_vocab", (vocab_size,))

    def encode(self, frames: np.ndarray, training: bool = False,
               rng: RngState | None = None, frozen: bool = False) -> EncoderTrace:
        p = self.config.dropout
        xs = [T.dropout(T.constant(frames[i]), p, training, rng)
              for i in range(frames.shape[0])]
        states, outputs, h_last = self.encoder.run(xs)
        if frozen:
            outputs = [T.detach(o) for o in outputs]
            h_last = T.detach(h_last)
        outputs = [T.dropout(o, p, training, rng) for o in outputs]
        return EncoderTrace(outputs, h_last)

    def step_logits(self, token: int, a_prev, h_prev, prepared):
        """Decode one step from an input token; returns (logits, h, context)."""
        y = T.reshape(T.embedding(self.embed, [token]), (self.embed_dim,))
        h, a, out, _ = self.decoder.step(y, a_prev, h_prev, prepared)
        return self.W_vocab @ out + self.b_vocab, h, a

    def sequence_nll(self, trace: EncoderTrace, targets: np.ndarray,
                     training: bool = False, rng: RngState | None = None):
        """Teacher-forced mean NLL per non-<PAD> token.

        Inputs are <GO> then the ground-truth targets shifted by one.
        Returns (loss tensor, token count); an all-<PAD> target gives 0.
        """
        prepared = self.decoder.prepare(trace)
        h = T.dropout(trace.last_state, self.config.dropout, training, rng)
        a = self.decoder.init_context()
        token = GO
        terms = []
        for t in range(len(targets)):
            tgt = int(targets[t])
            logits, h, a = self.step_logits(token, a, h, prepared)
            if tgt != PAD:
                terms.append(-T.pick(T.log_softmax(logits), tgt))
            token = tgt
        if not terms:
            return T.zeros(()), 0
        return T.add_n(terms) * (1.0 / len(terms)), len(terms)


@dataclass
class BeamHyp:
    tokens: tuple
    logprob: float
    finished: bool


def beam_decode(model: CaptionModel, trace: EncoderTrace, beam: int = 5,
                max_len: int = 20) -> BeamHyp:
    """Beam search over accumulated log-probabilities.

    Hypotheses emitting <EOS> retire into a finished pool; the best finished
    hypothesis wins (no length normalization). If nothing finishes within
    max_len the best unfinished hypothesis is returned with finished=False.
    """
    if beam < 1:
        raise ValueError(f"beam size must be >= 1, got {beam}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    prepared = model.decoder.prepare(trace)
    live = [((), 0.0, GO, model.decoder.init_context(), trace.last_state)]
    finished: list[tuple] = []
    for _ in range(max_len):
        candidates = []
        for tokens, logp, last, a, h in live:
            logits, h_new, a_new = model.step_logits(last, a, h, prepared)
            logprobs = T.log_softmax(logits).data
            for tok in range(model.vocab_size):
                candidates.append((logp + float(logprobs[tok]), tok, tokens, a_new, h_new))
        candidates.sort(key=lambda c: (-c[0], c[1], c[2]))
        new_live = []
        for score, tok, tokens, a_new, h_new in candidates[:beam]:
            seq = tokens + (tok,)
            if tok == EOS:
                finished.append((score, seq))
            else:
                new_live.append((seq, score, tok, a_new, h_new))
        live = new_live
        if not live:
            break
    if finished:
        finished.sort(key=lambda f: (-f[0], f[1]))
        score, seq = finished[0]
        return BeamHyp(seq[:-1], score, True)
    live.sort(key=lambda c: (-c[1], c[0]))
    tokens, score = live[0][0], live[0][1]
    return BeamHyp(tokens, score, False)


def greedy_decode(model: CaptionModel, trace: EncoderTrace,
                  max_len: int = 20) -> BeamHyp:
    return beam_decode(model, trace, beam=1, max_len=max_len)


class CaptionTrainer:
    """Log-likelihood caption training with optional pretrained encoder init.

    Model selection, when a validation split exists, keeps the parameters
    with the best validation NLL seen at each evaluation point.
    """

    def __init__(self, corpus: Corpus, config: RunConfig, vocab: Vocab | None = None,
                 init_values: dict | None = None, freeze_encoder: bool = False,
                 max_caption_len: int = 20, embed_dim: int | None = None):
        if not corpus.captions:
            raise ValueError("caption training needs a captions file")
        self.corpus = corpus
        self.config = config
        self.rng = RngState(config.seed)
        self.max_caption_len = max_caption_len
        train_entries = corpus.split("train")
        self.pairs = [(e.id, cap) for e in train_entries
                      for cap in corpus.captions.get(e.id, [])]
        if not self.pairs:
            raise ValueError("no training captions found")
        self.vocab = vocab or Vocab.build([cap for _, cap in self.pairs])
        self.store = ParamStore()
        self.model = CaptionModel(self.store, corpus.feature_dim(), config,
                                  self.vocab.size, self.rng, embed_dim=embed_dim)
        self.freeze_encoder = freeze_encoder
        if init_values is not None:
            loaded = self.store.load_values(init_values, prefix="enc.")
            if not loaded:
                raise ValueError("checkpoint contains no encoder weights "
                                 "matching this configuration")
        if freeze_encoder:
            self.store.freeze("enc.")
        self.val_pairs = [(e.id, cap) for e in corpus.split("val")
                          for cap in corpus.captions.get(e.id, [])]

    def _targets(self, caption: str) -> np.ndarray:
        return wrap_caption(self.vocab.encode(caption), self.max_caption_len)

    def _clip_frames(self, video_id: str) -> np.ndarray:
        frames = self.corpus.features(video_id)
        return frames[:self.config.K]

    def step(self) -> float:
        cfg = self.config
        self.store.zero_grads()
        losses = []
        for _ in range(cfg.batch_size):
            vid, cap = self.pairs[int(self.rng.integers(0, len(self.pairs)))]
            trace = self.model.encode(self._clip_frames(vid), training=True,
                                      rng=self.rng, frozen=self.freeze_encoder)
            loss_b, _ = self.model.sequence_nll(trace, self._targets(cap),
                                                training=True, rng=self.rng)
            losses.append(loss_b)
        loss = T.add_n(losses) * (1.0 / cfg.batch_size)
        loss.backward()
        self.store.clip_global_norm(cfg.clip_norm)
        self.store.adam_step(cfg.lr, weight_decay=cfg.weight_decay)
        return loss.item()

    def evaluate_nll(self, pairs) -> float:
        total, count = 0.0, 0
        for vid, cap in pairs:
            trace = self.model.encode(self._clip_frames(vid))
            loss, n = self.model.sequence_nll(trace, self._targets(cap))
            total += loss.item() * n
            count += n
        return total / max(count, 1)

    def train(self, steps: int | None = None, log=None, out_path=None,
              eval_every: int = 0) -> list:
        steps = steps if steps is not None else self.config.steps
        history = []
        best_nll = math.inf
        best_values = None
        for n in range(1, steps + 1):
            value = self.step()
            history.append(value)
            if log:
                log(f"step={n} loss={value:.6f}")
            if self.val_pairs and eval_every and n % eval_every == 0:
                val_nll = self.evaluate_nll(self.val_pairs)
                if log:
                    log(f"step={n} val_nll={val_nll:.6f}")
                if val_nll < best_nll:
                    best_nll = val_nll
                    best_values = self.store.values()
        if best_values is not None:
            self.store.load_values(best_values)
        if out_path:
            config = self.config.to_dict()
            config["_vocab_tokens"] = self.vocab.tokens[len(RESERVED):]
            config["_embed_dim"] = self.model.embed_dim
            config["_max_caption_len"] = self.max_caption_len
            save_checkpoint(out_path, self.store, config)
        return history

    def decode(self, video_id: str, beam: int = 5, max_len: int | None = None) -> BeamHyp:
        trace = self.model.encode(self._clip_frames(video_id))
        return beam_decode(self.model, trace, beam,
                           max_len or self.max_caption_len)


# ---------------------------------------------------------------- BLEU

def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _clipped_counts(candidate, references, n: int):
    cand = _ngrams(candidate, n)
    if not cand:
        return 0, max(len(candidate) - n + 1, 0)
    best = Counter()
    for ref in references:
        for gram, count in _ngrams(ref, n).items():
            best[gram] = max(best[gram], count)
    clipped = sum(min(count, best[gram]) for gram, count in cand.items())
    return clipped, sum(cand.values())


def _closest_ref_len(candidate, references) -> int:
    c = len(candidate)
    return min((abs(len(r) - c), len(r)) for r in references)[1]


def bleu(candidate, references, max_n: int = 4) -> list:
    """Modified n-gram precision BLEU@1..max_n with brevity penalty."""
    if max_n < 1 or max_n > 4:
        raise ValueError(f"max_n must be in 1..4, got {max_n}")
    if not references:
        raise ValueError("need at least one reference")
    candidate = list(candidate)
    if not candidate:
        return [0.0] * max_n
    precisions = []
    for n in range(1, max_n + 1):
        clipped, total = _clipped_counts(candidate, references, n)
        precisions.append(clipped / total if total > 0 else 0.0)
    r = _closest_ref_len(candidate, references)
    c = len(candidate)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    scores = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if any(p == 0.0 for p in ps):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return scores


def corpus_bleu(pairs, max_n: int = 4) -> list:
    """Aggregate BLEU over (candidate, references) pairs."""
    clipped = [0] * max_n
    totals = [0] * max_n
    c_len = r_len = 0
    for candidate, references in pairs:
        candidate = list(candidate)
        if not candidate:
            r_len += min(len(r) for r in references)
            continue
        for n in range(1, max_n + 1):
            cl, tot = _clipped_counts(candidate, references, n)
            clipped[n - 1] += cl
            totals[n - 1] += tot
        c_len += len(candidate)
        r_len += _closest_ref_len(candidate, references)
    precisions = [clipped[i] / totals[i] if totals[i] > 0 else 0.0
                  for i in range(max_n)]
    bp = 1.0 if c_len > r_len else (math.exp(1.0 - r_len / max(c_len, 1))
                                    if c_len > 0 else 0.0)
    scores = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        if any(p == 0.0 for p in ps):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(math.log(p) for p in ps) / n))
    return scores
