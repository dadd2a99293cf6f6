"""VLAD aggregation of per-step representations.

A k-means codebook (optionally behind a PCA projection) quantizes the input
vectors; per-center residual sums are concatenated, then normalized by signed
square rooting, per-center l2 (intra), and a final global l2. The multirate
state is encoded per group with an independent codebook per group and fused
late by averaging classifier scores.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .recurrent import MgruConfig
from .rng import RngState

__all__ = [
    "Codebook", "VladVector", "pca_fit", "kmeans_fit", "vlad_encode",
    "encode_groups", "late_fuse", "save_codebook", "load_codebook",
]

VCBK_MAGIC = b"VCBK"


@dataclass
class Codebook:
    centers: np.ndarray
    pca_mean: np.ndarray | None = None
    pca_proj: np.ndarray | None = None  # rows orthonormal, shape (dim, in_dim)

    @property
    def k(self) -> int:
        return self.centers.shape[0]

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def project(self, x: np.ndarray) -> np.ndarray:
        if self.pca_proj is None:
            return x
        return (x - self.pca_mean) @ self.pca_proj.T


@dataclass
class VladVector:
    values: np.ndarray
    normalizations: tuple = ()
    empty: bool = False


def pca_fit(x: np.ndarray, out_dim: int):
    """Plain PCA (no whitening): returns (mean, projection with orthonormal rows)."""
    mean = x.mean(axis=0)
    centered = x - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = vt[:out_dim]
    # fix component signs so the fit is deterministic across equivalent inputs
    signs = np.sign(proj[np.arange(proj.shape[0]), np.argmax(np.abs(proj), axis=1)])
    signs[signs == 0] = 1.0
    return mean, proj * signs[:, None]


def _nearest(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Index of the nearest center per row; ties break to the lowest index."""
    d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def kmeans_fit(x: np.ndarray, k: int, iters: int = 25,
               rng: RngState | None = None, pca_dim: int | None = None) -> Codebook:
    """Lloyd's algorithm with kmeans++ style seeding.

    Empty clusters are reseeded to the point farthest from its assigned
    center. PCA (when requested and strictly dimension-reducing) is fitted on
    the same sample first.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"kmeans expects an (N, D) matrix, got shape {x.shape}")
    if k < 1:
        raise ValueError(f"need at least one center, got k={k}")
    if x.shape[0] < k:
        raise ValueError(f"need at least k={k} points, got {x.shape[0]}")
    rng = rng or RngState(0)

    pca_mean = pca_proj = None
    if pca_dim is not None and pca_dim < x.shape[1]:
        pca_mean, pca_proj = pca_fit(x, pca_dim)
        x = (x - pca_mean) @ pca_proj.T

    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float64)
    centers[0] = x[int(rng.integers(0, n))]
    for c in range(1, k):
        d2 = ((x[:, None, :] - centers[None, :c, :]) ** 2).sum(axis=2).min(axis=1)
        total = d2.sum()
        if total <= 0:
            centers[c] = x[int(rng.integers(0, n))]
            continue
        r = rng.random() * total
        centers[c] = x[min(int(np.searchsorted(np.cumsum(d2), r)), n - 1)]

    assign = _nearest(x, centers)
    for _ in range(iters):
        for c in range(k):
            members = assign == c
            if members.any():
                centers[c] = x[members].mean(axis=0)
            else:
                dist = ((x - centers[assign]) ** 2).sum(axis=1)
                far = int(dist.argmax())
                centers[c] = x[far]
                assign[far] = c
        new_assign = _nearest(x, centers)
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign

    return Codebook(centers, pca_mean, pca_proj)


def vlad_encode(x: np.ndarray, cb: Codebook) -> VladVector:
    """Residual aggregation with SSR, intra (per-center l2), then global l2."""
    k, d = cb.k, cb.dim
    if x.size == 0:
        return VladVector(np.zeros(k * d), (), empty=True)
    x = cb.project(np.asarray(x, dtype=np.float64))
    if x.shape[1] != d:
        raise ValueError(f"descriptor dim {x.shape[1]} does not match codebook dim {d}")
    assign = _nearest(x, cb.centers)
    u = np.zeros((k, d), dtype=np.float64)
    np.add.at(u, assign, x - cb.centers[assign])

    flat = u.reshape(-1)
    flat = np.sign(flat) * np.sqrt(np.abs(flat))
    blocks = flat.reshape(k, d)
    norms = np.linalg.norm(blocks, axis=1)
    nonzero = norms > 0
    blocks[nonzero] /= norms[nonzero, None]
    flat = blocks.reshape(-1)
    g = np.linalg.norm(flat)
    if g > 0:
        flat = flat / g
    return VladVector(flat, ("ssr", "intra", "l2"))


def encode_groups(states: np.ndarray, cfg: MgruConfig, codebooks) -> list:
    """VLAD-encode each state group's per-step slices with its own codebook."""
    if len(codebooks) != cfg.k:
        raise ValueError(f"expected {cfg.k} codebooks, got {len(codebooks)}")
    if states.ndim != 2 or states.shape[1] != cfg.state_dim:
        raise ValueError(f"states must be (S, {cfg.state_dim}), got {states.shape}")
    out = []
    for (off, size), cb in zip(zip(cfg.offsets, cfg.group_sizes), codebooks):
        out.append(vlad_encode(states[:, off:off + size], cb))
    return out


def late_fuse(scores) -> np.ndarray:
    """Elementwise mean of per-group classifier decision values."""
    if len(scores) == 0:
        raise ValueError("late_fuse needs at least one score vector")
    arrs = [np.asarray(s, dtype=np.float64) for s in scores]
    if any(a.shape != arrs[0].shape for a in arrs):
        raise ValueError("score vectors must all have the same shape")
    return np.mean(arrs, axis=0)


# ---------------------------------------------------------------- codebook io

def save_codebook(path, cb: Codebook) -> None:
    with open(path, "wb") as f:
        f.write(VCBK_MAGIC)
        f.write(struct.pack("<III", 1, cb.k, cb.dim))
        if cb.pca_proj is not None:
            f.write(struct.pack("<BI", 1, cb.pca_proj.shape[1]))
            f.write(np.ascontiguousarray(cb.pca_mean, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(cb.pca_proj, dtype="<f4").tobytes())
        else:
            f.write(struct.pack("<B", 0))
        f.write(np.ascontiguousarray(cb.centers, dtype="<f4").tobytes())


def load_codebook(path) -> Codebook:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read codebook {path}: {e}") from e
    if len(raw) < 17 or raw[:4] != VCBK_MAGIC:
        raise DataError(f"{path}: not a codebook file (bad magic)")
    version, k, d = struct.unpack("<III", raw[4:16])
    if version != 1:
        raise DataError(f"{path}: unsupported codebook version {version}")
    offset = 16
    has_pca = raw[offset]
    offset += 1
    pca_mean = pca_proj = None
    if has_pca:
        (in_dim,) = struct.unpack("<I", raw[offset:offset + 4])
        offset += 4
        pca_mean = np.frombuffer(raw, dtype="<f4", count=in_dim, offset=offset).astype(np.float64)
        offset += 4 * in_dim
        pca_proj = np.frombuffer(raw, dtype="<f4", count=d * in_dim,
                                 offset=offset).reshape(d, in_dim).astype(np.float64)
        offset += 4 * d * in_dim
    expected = offset + 4 * k * d
    if len(raw) != expected:
        raise DataError(f"{path}: size {len(raw)} does not match header (expected {expected})")
    centers = np.frombuffer(raw, dtype="<f4", count=k * d,
                            offset=offset).reshape(k, d).astype(np.float64)
    return Codebook(centers, pca_mean, pca_proj)
