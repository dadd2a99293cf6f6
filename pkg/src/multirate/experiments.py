"""Experiment drivers: evaluation pipelines and comparison studies.

These compose the trainers and encoders into the runnable studies: pooled and
VLAD event-detection evaluation, the multirate-vs-plain-GRU reconstruction
comparison (matched total state size, paired seeds), and the
pretrained-vs-random initialization race.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .classify import (FinetuneTrainer, mean_average_precision, pool_average,
                       svm_train)
from .data import Corpus, RunConfig
from .encoding import encode_groups, kmeans_fit, late_fuse
from .recurrent import MgruConfig, collect_states
from .rng import RngState
from .seq2seq import DIRECTIONS, ReconstructionTrainer, sample_window

__all__ = [
    "final_loss", "steps_to_target", "reconstruction_eval",
    "MultirateComparison", "compare_multirate", "comparison_markdown",
    "comparison_csv", "PairedInitResult", "paired_init_comparison",
    "collect_corpus_states", "fit_group_codebooks", "group_vlad_features",
    "evaluate_event_detection",
]


def final_loss(history, fraction: float = 0.1) -> float:
    """Mean loss over the trailing fraction of a training run."""
    if not history:
        raise ValueError("empty loss history")
    tail = max(1, int(len(history) * fraction))
    return float(np.mean(history[-tail:]))


def steps_to_target(history, target: float) -> float:
    """1-based step at which the loss first reached target (inf if never)."""
    for i, value in enumerate(history, 1):
        if value <= target:
            return i
    return math.inf


def reconstruction_eval(model, corpus: Corpus, ids, k: int, seed: int = 0) -> float:
    """Deterministic eval-mode reconstruction loss.

    One window per video from a fixed stream, decoded in both directions
    without dropout; the same windows are used for every model under
    comparison, so differences reflect the weights alone.
    """
    rng = RngState(seed)
    losses = []
    for vid in ids:
        window = sample_window(corpus.features(vid), k, rng)
        trace = model.encode(window.present)
        for direction in DIRECTIONS:
            loss, n_valid = model.reconstruct(trace, window, direction)
            if n_valid:
                losses.append(loss.item())
    if not losses:
        raise ValueError("no valid frames to evaluate on")
    return float(np.mean(losses))


# ---------------------------------------------------------- multirate study

@dataclass
class MultirateComparison:
    rows: list            # (model, seed, final_loss)
    gru_mean: float
    mgru_mean: float

    @property
    def ratio(self) -> float:
        return self.mgru_mean / self.gru_mean


def compare_multirate(corpus: Corpus, base_config: RunConfig, seeds,
                      steps: int | None = None, log=None,
                      eval_seed: int = 12345) -> MultirateComparison:
    """Paired-seed reconstruction comparison: multirate groups vs one plain
    GRU group with the same total state size.

    The reported final loss is the deterministic shared-window eval, not the
    (noisier) trailing training loss.
    """
    eval_ids = [e.id for e in corpus.split("train")]
    rows = []
    for seed in seeds:
        for model_name, overrides in (
                ("gru", {"groups": 1, "periods": (1,)}),
                ("mgru", {})):
            config = dataclasses.replace(base_config, seed=seed, **overrides)
            trainer = ReconstructionTrainer(corpus, config)
            trainer.train(steps=steps)
            loss = reconstruction_eval(trainer.model, corpus, eval_ids,
                                       config.K, eval_seed)
            rows.append((model_name, seed, loss))
            if log:
                log(f"model={model_name} seed={seed} final_loss={loss:.6f}")
    gru_mean = float(np.mean([r[2] for r in rows if r[0] == "gru"]))
    mgru_mean = float(np.mean([r[2] for r in rows if r[0] == "mgru"]))
    return MultirateComparison(rows, gru_mean, mgru_mean)


def comparison_markdown(result: MultirateComparison) -> str:
    lines = ["| model | seed | final loss |", "|---|---|---|"]
    for model, seed, loss in result.rows:
        lines.append(f"| {model} | {seed} | {loss:.6f} |")
    lines.append("")
    lines.append(f"| gru mean | {result.gru_mean:.6f} |")
    lines.append(f"| mgru mean | {result.mgru_mean:.6f} |")
    lines.append(f"| mgru/gru ratio | {result.ratio:.4f} |")
    return "\n".join(lines) + "\n"


def comparison_csv(result: MultirateComparison) -> str:
    lines = ["model,seed,final_loss"]
    for model, seed, loss in result.rows:
        lines.append(f"{model},{seed},{loss:.6f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------- init study

@dataclass
class PairedInitResult:
    rows: list   # (seed, steps_pretrained, steps_random)

    @property
    def wins(self) -> int:
        """Seeds where the pretrained run needed no more steps than random."""
        return sum(1 for _, sp, sr in self.rows if sp <= sr)


def paired_init_comparison(corpus: Corpus, config: RunConfig, num_classes: int,
                           pretrained_values: dict, target_loss: float,
                           seeds, max_steps: int, head_hidden: int = 1024,
                           log=None) -> PairedInitResult:
    rows = []
    for seed in seeds:
        cfg = dataclasses.replace(config, seed=seed)
        counts = {}
        for name, init in (("pretrained", pretrained_values), ("random", None)):
            trainer = FinetuneTrainer(corpus, cfg, num_classes, init_values=init,
                                      head_hidden=head_hidden)
            history = trainer.train(steps=max_steps, target_loss=target_loss)
            counts[name] = steps_to_target(history, target_loss)
        rows.append((seed, counts["pretrained"], counts["random"]))
        if log:
            log(f"seed={seed} steps_pretrained={counts['pretrained']} "
                f"steps_random={counts['random']}")
    return PairedInitResult(rows)


# ---------------------------------------------------------- evaluation

def collect_corpus_states(encoder, corpus: Corpus, entries,
                          max_steps: int = 150) -> dict:
    return {e.id: collect_states(encoder, corpus.features(e.id), max_steps)
            for e in entries}


def fit_group_codebooks(states_by_id: dict, train_ids, cfg: MgruConfig,
                        centers: int, rng: RngState, sample_cap: int = 20000,
                        pca_dim: int | None = None) -> list:
    """Per-group k-means codebooks fit on training-video states only."""
    stacked = np.concatenate([states_by_id[i] for i in train_ids], axis=0)
    if stacked.shape[0] > sample_cap:
        keep = rng.permutation(stacked.shape[0])[:sample_cap]
        stacked = stacked[np.sort(keep)]
    books = []
    for off, size in zip(cfg.offsets, cfg.group_sizes):
        books.append(kmeans_fit(stacked[:, off:off + size], centers,
                                rng=rng, pca_dim=pca_dim))
    return books


def group_vlad_features(states_by_id: dict, ids, cfg: MgruConfig,
                        codebooks) -> list:
    """Per-group feature matrices (one row per id, in order)."""
    per_group = [[] for _ in range(cfg.k)]
    for vid in ids:
        encoded = encode_groups(states_by_id[vid], cfg, codebooks)
        for g, vec in enumerate(encoded):
            per_group[g].append(vec.values)
    return [np.stack(rows, axis=0) for rows in per_group]


def evaluate_event_detection(trainer: FinetuneTrainer, corpus: Corpus,
                             centers: int = 8, svm_c: float = 1.0,
                             svm_iters: int = 500) -> dict:
    """mAP of the pooled-state path and the per-group VLAD path.

    Both paths consume the identical state matrices; SVMs are fit on the
    train split and scored on the test split.
    """
    cfg = trainer.config.mgru_config()
    train_entries = [e for e in corpus.split("train") if e.label is not None]
    test_entries = [e for e in corpus.split("test") if e.label is not None]
    states = collect_corpus_states(trainer.encoder, corpus,
                                   train_entries + test_entries)
    train_ids = [e.id for e in train_entries]
    test_ids = [e.id for e in test_entries]
    y_train = np.array([e.label for e in train_entries])
    y_test = np.array([e.label for e in test_entries])
    classes = tuple(sorted(set(int(v) for v in y_train) - {0}))

    # average pooling path
    x_train = np.stack([pool_average(states[i]) for i in train_ids])
    x_test = np.stack([pool_average(states[i]) for i in test_ids])
    svm = svm_train(x_train, y_train, c=svm_c, iters=svm_iters, classes=classes)
    pool_scores = svm.decision_values(x_test)
    pool_eval = mean_average_precision(pool_scores, y_test, classes)

    # per-group VLAD path with average late fusion
    rng = RngState(trainer.config.seed)
    codebooks = fit_group_codebooks(states, train_ids, cfg, centers, rng)
    train_groups = group_vlad_features(states, train_ids, cfg, codebooks)
    test_groups = group_vlad_features(states, test_ids, cfg, codebooks)
    group_scores = []
    for g in range(cfg.k):
        svm_g = svm_train(train_groups[g], y_train, c=svm_c, iters=svm_iters,
                          classes=classes)
        group_scores.append(svm_g.decision_values(test_groups[g]))
    fused = late_fuse(group_scores)
    vlad_eval = mean_average_precision(fused, y_test, classes)

    return {"classes": classes, "test_ids": test_ids,
            "pool": pool_eval, "pool_scores": pool_scores,
            "vlad": vlad_eval, "vlad_scores": fused}
