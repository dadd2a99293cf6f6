"""On-disk formats: feature files, manifests, captions, run configs, checkpoints.

Everything is little-endian and byte-deterministic so reruns with the same
seed produce identical artifacts.

Feature file (FVEC): magic ``FVEC``, u32 version=1, u32 T frames, u32 D dims,
then T*D float32 row-major. File size is exactly 16 + 4*T*D bytes.

Checkpoint: magic ``CKPT``, u32 version=1, u32 header length, JSON header
(config, parameter names/shapes/dtype, step counter), then raw little-endian
parameter payloads in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .recurrent import MgruConfig, MODES

__all__ = [
    "write_feature_file", "read_feature_file",
    "ManifestEntry", "read_manifest", "write_manifest",
    "read_captions", "write_captions",
    "RunConfig", "Corpus",
    "save_checkpoint", "load_checkpoint",
]

FVEC_MAGIC = b"FVEC"
CKPT_MAGIC = b"CKPT"


# ---------------------------------------------------------------- features

def write_feature_file(path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"feature array must be 2-D (frames x dims), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("feature array contains non-finite values")
    t, d = arr.shape
    with open(path, "wb") as f:
        f.write(FVEC_MAGIC)
        f.write(struct.pack("<III", 1, t, d))
        f.write(arr.tobytes())


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read feature file {path}: {e}") from e
    if len(raw) < 16 or raw[:4] != FVEC_MAGIC:
        raise DataError(f"{path}: not a feature file (bad magic)")
    version, t, d = struct.unpack("<III", raw[4:16])
    if version != 1:
        raise DataError(f"{path}: unsupported feature file version {version}")
    if len(raw) != 16 + 4 * t * d:
        raise DataError(f"{path}: size {len(raw)} does not match header "
                        f"(expected {16 + 4 * t * d})")
    arr = np.frombuffer(raw, dtype="<f4", offset=16).reshape(t, d)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: payload contains non-finite values")
    return np.array(arr)


# ---------------------------------------------------------------- manifest

SPLITS = ("train", "val", "test")


@dataclass
class ManifestEntry:
    id: str
    path: str
    label: int | None
    split: str


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    entries, seen = [], set()
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{ln}: invalid JSON: {e}") from e
        missing = {"id", "path", "label", "split"} - rec.keys()
        if missing:
            raise DataError(f"{path}:{ln}: missing fields {sorted(missing)}")
        if rec["split"] not in SPLITS:
            raise DataError(f"{path}:{ln}: split must be one of {SPLITS}, "
                            f"got {rec['split']!r}")
        if rec["id"] in seen:
            raise DataError(f"{path}:{ln}: duplicate id {rec['id']!r}")
        label = rec["label"]
        if label is not None and not isinstance(label, int):
            raise DataError(f"{path}:{ln}: label must be an integer or null")
        seen.add(rec["id"])
        entries.append(ManifestEntry(rec["id"], rec["path"], label, rec["split"]))
    if not entries:
        raise DataError(f"{path}: manifest is empty")
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w") as f:
        for e in entries:
            f.write(json.dumps({"id": e.id, "path": e.path, "label": e.label,
                                "split": e.split}) + "\n")


def read_captions(path) -> dict:
    """JSON-lines {"id", "caption"} -> id -> list of caption strings."""
    path = Path(path)
    out: dict[str, list] = {}
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DataError(f"cannot read captions {path}: {e}") from e
    for ln, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}:{ln}: invalid JSON: {e}") from e
        if "id" not in rec or "caption" not in rec:
            raise DataError(f"{path}:{ln}: records need 'id' and 'caption'")
        out.setdefault(rec["id"], []).append(str(rec["caption"]))
    if not out:
        raise DataError(f"{path}: captions file is empty")
    return out


def write_captions(path, pairs) -> None:
    with open(path, "w") as f:
        for vid, caption in pairs:
            f.write(json.dumps({"id": vid, "caption": caption}) + "\n")


# ---------------------------------------------------------------- config

@dataclass
class RunConfig:
    """Run settings. Defaults are desk scale; the full-scale reference
    configuration (cell 1024, K 30, 256 k-means centers) is one config file
    away and documented in the README."""

    K: int = 30
    cell_size: int = 64
    groups: int = 3
    periods: tuple = (1, 3, 6)
    mode: str = "fast_to_slow"
    attention_size: int = 50
    lr: float = 1e-4
    clip_norm: float = 10.0
    dropout: float = 0.5
    weight_decay: float = 1e-4
    huber_delta: float = 0.5
    batch_size: int = 12
    seed: int = 0
    steps: int = 1000

    def __post_init__(self):
        self.periods = tuple(self.periods)
        self.validate()

    def validate(self) -> None:
        def positive_int(name, value, minimum=1):
            if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
                raise ConfigError(f"config key {name!r} must be an integer >= {minimum}, "
                                  f"got {value!r}")

        positive_int("K", self.K)
        positive_int("cell_size", self.cell_size)
        positive_int("groups", self.groups)
        positive_int("attention_size", self.attention_size)
        positive_int("batch_size", self.batch_size)
        positive_int("steps", self.steps)
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise ConfigError(f"config key 'seed' must be an integer, got {self.seed!r}")
        if len(self.periods) != self.groups:
            raise ConfigError(f"'periods' must list one clock per group "
                              f"({self.groups}), got {list(self.periods)}")
        for p in self.periods:
            if not isinstance(p, int) or isinstance(p, bool) or p < 1:
                raise ConfigError(f"'periods' entries must be positive integers, "
                                  f"got {list(self.periods)}")
        if any(self.periods[i] > self.periods[i + 1] for i in range(len(self.periods) - 1)):
            raise ConfigError(f"'periods' must be non-decreasing, got {list(self.periods)}")
        if self.mode not in MODES:
            raise ConfigError(f"'mode' must be one of {MODES}, got {self.mode!r}")
        if self.cell_size < self.groups:
            raise ConfigError(f"'cell_size' ({self.cell_size}) must be at least "
                              f"'groups' ({self.groups})")
        if not (isinstance(self.lr, (int, float)) and self.lr > 0):
            raise ConfigError(f"'lr' must be positive, got {self.lr!r}")
        if not (isinstance(self.clip_norm, (int, float)) and self.clip_norm > 0):
            raise ConfigError(f"'clip_norm' must be positive, got {self.clip_norm!r}")
        if not (isinstance(self.dropout, (int, float)) and 0.0 <= self.dropout < 1.0):
            raise ConfigError(f"'dropout' must be in [0, 1), got {self.dropout!r}")
        if not (isinstance(self.weight_decay, (int, float)) and self.weight_decay >= 0):
            raise ConfigError(f"'weight_decay' must be >= 0, got {self.weight_decay!r}")
        if not (isinstance(self.huber_delta, (int, float)) and self.huber_delta > 0):
            raise ConfigError(f"'huber_delta' must be positive, got {self.huber_delta!r}")

    def group_sizes(self) -> tuple:
        base, rem = divmod(self.cell_size, self.groups)
        return tuple(base + (1 if i < rem else 0) for i in range(self.groups))

    def mgru_config(self) -> MgruConfig:
        return MgruConfig(self.group_sizes(), self.periods, self.mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["periods"] = list(self.periods)
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; "
                              f"valid keys are {sorted(known)}")
        kwargs = dict(raw)
        if "periods" in kwargs:
            if not isinstance(kwargs["periods"], (list, tuple)):
                raise ConfigError(f"'periods' must be a list, got {kwargs['periods']!r}")
            kwargs["periods"] = tuple(kwargs["periods"])
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a JSON object")
        return cls.from_dict(raw)


# ---------------------------------------------------------------- corpus

class Corpus:
    """A manifest plus cached feature arrays and optional captions."""

    def __init__(self, entries, root, captions: dict | None = None):
        self.entries = list(entries)
        self.root = Path(root)
        self.captions = captions or {}
        self.by_id = {e.id: e for e in self.entries}
        self._cache: dict[str, np.ndarray] = {}

    @classmethod
    def load(cls, manifest_path, captions_path=None) -> "Corpus":
        manifest_path = Path(manifest_path)
        entries = read_manifest(manifest_path)
        captions = read_captions(captions_path) if captions_path else None
        return cls(entries, manifest_path.parent, captions)

    def split(self, name: str) -> list:
        return [e for e in self.entries if e.split == name]

    def features(self, video_id: str) -> np.ndarray:
        if video_id not in self._cache:
            entry = self.by_id[video_id]
            path = Path(entry.path)
            if not path.is_absolute():
                path = self.root / path
            self._cache[video_id] = read_feature_file(path)
        return self._cache[video_id]

    def feature_dim(self) -> int:
        return self.features(self.entries[0].id).shape[1]


# ---------------------------------------------------------------- checkpoint

def save_checkpoint(path, store, config: dict) -> None:
    """ParamStore -> names/shapes plus raw little-endian values, with config."""
    names = store.names()
    header = {
        "config": config,
        "step": store.step,
        "params": [{"name": n,
                    "shape": list(store[n].data.shape),
                    "dtype": "<f8" if store[n].data.dtype == np.float64 else "<f4"}
                   for n in names],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<II", 1, len(blob)))
        f.write(blob)
        for meta in header["params"]:
            f.write(np.ascontiguousarray(store[meta["name"]].data,
                                         dtype=meta["dtype"]).tobytes())


def load_checkpoint(path):
    """Returns (values dict name -> ndarray, config dict, step)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read checkpoint {path}: {e}") from e
    if len(raw) < 12 or raw[:4] != CKPT_MAGIC:
        raise DataError(f"{path}: not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != 1:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: corrupt checkpoint header: {e}") from e
    values = {}
    offset = 12 + hlen
    for meta in header["params"]:
        shape = tuple(meta["shape"])
        dtype = np.dtype(meta["dtype"])
        nbytes = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise DataError(f"{path}: truncated payload for {meta['name']!r}")
        values[meta["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise DataError(f"{path}: {len(raw) - offset} trailing bytes")
    return values, header.get("config", {}), header.get("step", 0)
