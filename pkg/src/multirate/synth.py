"""Synthetic feature corpora for desk-scale experiments.

Three kinds:

* ``multirate``: trajectories alternating between a slow regime (smooth
  directional drift) and a fast regime (large frame-to-frame motion around a
  slowly moving anchor), for unsupervised reconstruction training. Fast
  regimes move well over 5x faster per step than slow ones; a sidecar
  ``regimes.jsonl`` records the segment boundaries.
* ``events``: each class is a fixed smooth closed loop through feature
  space, sampled at a shared pace with a random starting phase, so the
  classes share their spatial distribution and differ in temporal structure;
  background videos follow a fresh one-off loop each. Labels are 1..C with
  background 0, split into train/test.
* ``captions``: videos whose latent (noun, motion) pair drives the dynamics
  and deterministically templates a caption.

All randomness flows through one RngState, so a fixed seed reproduces the
corpus byte for byte.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .data import ManifestEntry, write_captions, write_feature_file, write_manifest
from .rng import RngState

__all__ = ["generate_multirate", "generate_events", "generate_captions", "generate"]

SLOW_RATE = 0.03
FAST_JITTER = 0.18


def _unit(rng: RngState, dim: int) -> np.ndarray:
    v = rng.normal((dim,))
    return v / max(np.linalg.norm(v), 1e-9)


def _multirate_sequence(rng: RngState, frames: int, dim: int):
    """Alternating slow-drift / fast-jitter trajectory plus regime spans."""
    x = rng.uniform((dim,), -0.5, 0.5)
    fast = rng.random() < 0.5
    out = np.empty((frames, dim), dtype=np.float64)
    spans = []
    t = 0
    while t < frames:
        seg_len = min(int(rng.integers(5, 11)), frames - t)
        direction = _unit(rng, dim)
        start = t
        for _ in range(seg_len):
            if fast:
                x = x + 0.01 * direction
                out[t] = x + FAST_JITTER * rng.normal((dim,))
            else:
                x = x + SLOW_RATE * direction + 0.004 * rng.normal((dim,))
                out[t] = x
            # bounce off the walls of the feature box
            direction = np.where(np.abs(x) > 2.5, -np.sign(x) * np.abs(direction),
                                 direction)
            x = np.clip(x, -2.6, 2.6)
            t += 1
        spans.append([start, t, "fast" if fast else "slow"])
        fast = not fast
    return out, spans


def generate_multirate(out_dir, seed: int, videos: int = 200, dim: int = 8,
                       frames_min: int = 30, frames_max: int = 50) -> Path:
    """Unlabeled corpus of alternating slow/fast trajectories."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = RngState(seed)
    entries = []
    regime_records = []
    for i in range(videos):
        frames = int(rng.integers(frames_min, frames_max + 1))
        seq, spans = _multirate_sequence(rng, frames, dim)
        vid = f"mr{i:04d}"
        rel = f"features/{vid}.fvec"
        write_feature_file(out_dir / rel, seq)
        entries.append(ManifestEntry(vid, rel, None, "train"))
        regime_records.append({"id": vid, "segments": spans})
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    with open(out_dir / "regimes.jsonl", "w") as f:
        for rec in regime_records:
            f.write(json.dumps(rec) + "\n")
    return manifest


def _loop_fn(rng: RngState, dim: int, harmonics: int = 3):
    """A smooth random closed curve u in [0,1) -> feature space."""
    a = rng.normal((harmonics, dim))
    b = rng.normal((harmonics, dim))
    scale = 1.0 / np.sqrt(harmonics)

    def loop(u: float) -> np.ndarray:
        angles = 2 * np.pi * np.arange(1, harmonics + 1) * u
        return scale * (np.cos(angles) @ a + np.sin(angles) @ b)

    return loop


LOOP_PERIOD = 12.0
EVENT_NOISE = 0.15


def _loop_sequence(rng: RngState, loop, frames: int, dim: int) -> np.ndarray:
    u0 = rng.random()
    seq = np.stack([loop(u0 + t / LOOP_PERIOD) for t in range(frames)])
    return seq + EVENT_NOISE * rng.normal((frames, dim))


def generate_events(out_dir, seed: int, classes: int = 3, train: int = 60,
                    test: int = 30, dim: int = 8, frames_min: int = 36,
                    frames_max: int = 56) -> Path:
    """Labeled event corpus: class-conditional loop dynamics plus background.

    Positives take up one third of each split (spread over the classes); the
    rest is background, mirroring the positive-scarce setting the 1:2 batch
    sampling is for.
    """
    if classes < 1:
        raise ValueError(f"need at least one class, got {classes}")
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = RngState(seed)
    class_loops = [_loop_fn(rng, dim) for _ in range(classes)]
    entries = []

    def emit(split: str, count: int):
        n_pos = count // 3
        per_class = [n_pos // classes + (1 if c < n_pos % classes else 0)
                     for c in range(classes)]
        idx = 0

        def write(seq, label):
            nonlocal idx
            vid = f"ev_{split}_{idx:03d}"
            rel = f"features/{vid}.fvec"
            write_feature_file(out_dir / rel, seq)
            entries.append(ManifestEntry(vid, rel, label, split))
            idx += 1

        for c, n in enumerate(per_class):
            for _ in range(n):
                frames = int(rng.integers(frames_min, frames_max + 1))
                write(_loop_sequence(rng, class_loops[c], frames, dim), c + 1)
        for _ in range(count - n_pos):
            frames = int(rng.integers(frames_min, frames_max + 1))
            write(_loop_sequence(rng, _loop_fn(rng, dim), frames, dim), 0)

    emit("train", train)
    emit("test", test)
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    return manifest


CAPTION_NOUNS = ("dot", "line", "wave", "pulse", "spiral")
CAPTION_MOTIONS = (("drifts", "slowly", 0.4), ("spins", "quickly", 1.6))


def generate_captions(out_dir, seed: int, videos: int = 10, dim: int = 8,
                      frames_min: int = 24, frames_max: int = 36) -> Path:
    """Caption corpus: latent (noun, motion) pairs drive both the dynamics and
    a deterministic template caption.

    The noun selects a fixed offset and loop shape; the motion selects the
    pace the loop is traversed at.
    """
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    rng = RngState(seed)
    noun_protos = {noun: {"offset": 1.2 * _unit(rng, dim),
                          "loop": _loop_fn(rng, dim)}
                   for noun in CAPTION_NOUNS}
    entries, captions = [], []
    for i in range(videos):
        noun = CAPTION_NOUNS[i % len(CAPTION_NOUNS)]
        verb, adverb, pace = CAPTION_MOTIONS[(i // len(CAPTION_NOUNS)) % len(CAPTION_MOTIONS)]
        proto = noun_protos[noun]
        frames = int(rng.integers(frames_min, frames_max + 1))
        u0 = rng.random()
        seq = np.stack([proto["loop"](u0 + pace * t / LOOP_PERIOD)
                        for t in range(frames)])
        seq = proto["offset"] + seq + 0.05 * rng.normal((frames, dim))
        vid = f"cap{i:03d}"
        rel = f"features/{vid}.fvec"
        write_feature_file(out_dir / rel, seq)
        entries.append(ManifestEntry(vid, rel, None, "train"))
        captions.append((vid, f"the {noun} {verb} {adverb}"))
    manifest = out_dir / "manifest.jsonl"
    write_manifest(manifest, entries)
    write_captions(out_dir / "captions.jsonl", captions)
    return manifest


def generate(kind: str, out_dir, seed: int, **kwargs) -> Path:
    makers = {"multirate": generate_multirate, "events": generate_events,
              "captions": generate_captions}
    if kind not in makers:
        raise ValueError(f"unknown corpus kind {kind!r}; expected one of {sorted(makers)}")
    return makers[kind](out_dir, seed, **kwargs)
