"""GRU cell and its clocked multi-group extension.

The multirate cell partitions the hidden state into k groups. Group i owns a
clock period T_i and only updates at steps t with t mod T_i == 0 (steps are
1-based); otherwise its slice of the state is passed through untouched. The
recurrent weight matrix is block-masked by the coupling mode:

* fast_to_slow: group i reads groups j <= i (block lower-triangular), so a
  slow group sees what the faster groups already encoded.
* slow_to_fast: group i reads groups j >= i (block upper-triangular), so fast
  groups also see the coarse slow context.

Cross-group blocks are stored only for the pairs the mode permits, which is
where the parameter saving over a plain GRU comes from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .optim import ParamStore
from .rng import RngState

__all__ = [
    "MgruConfig", "active_groups", "recurrent_param_count",
    "GruCell", "MultirateGru", "collect_states",
]

MODES = ("fast_to_slow", "slow_to_fast")


@dataclass(frozen=True)
class MgruConfig:
    """Group layout of a multirate GRU state vector.

    ``group_sizes`` sum to the state dim; ``periods`` are the per-group
    clocks, non-decreasing so lower indices are the faster groups (pass
    ``allow_unsorted_periods=True`` only when deliberately building a
    mirrored layout).
    """

    group_sizes: tuple
    periods: tuple
    mode: str = "fast_to_slow"
    allow_unsorted_periods: bool = field(default=False, repr=False, compare=False)

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.group_sizes)
        periods = tuple(int(p) for p in self.periods)
        object.__setattr__(self, "group_sizes", sizes)
        object.__setattr__(self, "periods", periods)
        if len(sizes) < 1:
            raise ValueError("at least one group is required")
        if len(sizes) != len(periods):
            raise ValueError(f"{len(sizes)} groups but {len(periods)} periods")
        if any(s < 1 for s in sizes):
            raise ValueError(f"group sizes must be positive, got {sizes}")
        if any(p < 1 for p in periods):
            raise ValueError(f"clock periods must be positive, got {periods}")
        if not self.allow_unsorted_periods and any(
                periods[i] > periods[i + 1] for i in range(len(periods) - 1)):
            raise ValueError(f"clock periods must be non-decreasing, got {periods}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def k(self) -> int:
        return len(self.group_sizes)

    @property
    def state_dim(self) -> int:
        return sum(self.group_sizes)

    @property
    def offsets(self) -> tuple:
        off, acc = [], 0
        for s in self.group_sizes:
            off.append(acc)
            acc += s
        return tuple(off)

    def allowed_pairs(self) -> list:
        """(i, j) block coordinates stored for this coupling mode."""
        k = self.k
        if self.mode == "fast_to_slow":
            return [(i, j) for i in range(k) for j in range(k) if j <= i]
        return [(i, j) for i in range(k) for j in range(k) if j >= i]


def active_groups(t: int, cfg: MgruConfig) -> set:
    """Indices (0-based) of groups whose clock fires at 1-based step t."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    return {i for i, period in enumerate(cfg.periods) if t % period == 0}


def recurrent_param_count(cfg: MgruConfig) -> int:
    """Scalars in the stored recurrent blocks across the three gates."""
    per_gate = sum(cfg.group_sizes[i] * cfg.group_sizes[j] for i, j in cfg.allowed_pairs())
    return 3 * per_gate


GATES = ("r", "z", "h")


class GruCell:
    """Plain GRU with a linear output projection.

    r = sigmoid(Ur x + Vr h + br); z likewise; candidate
    hbar = tanh(Uh x + Vh (r * h) + bh); h' = (1-z) * h + z * hbar;
    o = Wo h' + bo.
    """

    def __init__(self, store: ParamStore, prefix: str, input_dim: int,
                 state_dim: int, out_dim: int, rng: RngState):
        self.input_dim = input_dim
        self.state_dim = state_dim
        self.out_dim = out_dim
        p = prefix
        self.U = {g: store.weight(f"{p}.U{g}", input_dim, state_dim, rng) for g in GATES}
        self.V = {g: store.weight(f"{p}.V{g}", state_dim, state_dim, rng) for g in GATES}
        self.b = {g: store.zeros(f"{p}.b{g}", (state_dim,)) for g in GATES}
        self.Wo = store.weight(f"{p}.Wo", state_dim, out_dim, rng)
        self.bo = store.zeros(f"{p}.bo", (out_dim,))

    def init_state(self) -> T.Tensor:
        return T.zeros((self.state_dim,))

    def step(self, x: T.Tensor, h: T.Tensor):
        if x.shape != (self.input_dim,) or h.shape != (self.state_dim,):
            raise ValueError(f"gru step expects x {(self.input_dim,)} and h "
                             f"{(self.state_dim,)}, got {x.shape} and {h.shape}")
        r = T.sigmoid(self.U["r"] @ x + self.V["r"] @ h + self.b["r"])
        z = T.sigmoid(self.U["z"] @ x + self.V["z"] @ h + self.b["z"])
        hbar = T.tanh(self.U["h"] @ x + self.V["h"] @ (r * h) + self.b["h"])
        h_new = (1.0 - z) * h + z * hbar
        o = self.Wo @ h_new + self.bo
        return h_new, o

    def run(self, xs, h0=None):
        h = h0 if h0 is not None else self.init_state()
        states, outputs = [], []
        for x in xs:
            h, o = self.step(x, h)
            states.append(h)
            outputs.append(o)
        return states, outputs, h


class MultirateGru:
    """Clocked multi-group GRU.

    Stores per-group input blocks and only the mode-permitted recurrent
    blocks; a full state-sized matrix with structural zeros is assembled once
    per sequence so each step is three masked matmuls. Inactive groups copy
    their previous slice bitwise, and gradients flow through the copy.
    """

    def __init__(self, store: ParamStore, prefix: str, input_dim: int,
                 cfg: MgruConfig, out_dim: int, rng: RngState):
        self.cfg = cfg
        self.input_dim = input_dim
        self.out_dim = out_dim
        p = prefix
        sizes = cfg.group_sizes
        state = cfg.state_dim
        # blocks are initialized with the fans of the full assembled matrices,
        # matching a masked-full-matrix implementation (and the plain GRU's
        # init scale at k=1)
        in_bound = math.sqrt(6.0 / (input_dim + state))
        rec_bound = math.sqrt(6.0 / (state + state))
        self.U = {g: [store.add(f"{p}.U{g}{i}",
                                rng.uniform((sizes[i], input_dim), -in_bound, in_bound))
                      for i in range(cfg.k)] for g in GATES}
        pairs = cfg.allowed_pairs()
        self.V = {g: {(i, j): store.add(f"{p}.V{g}{i}_{j}",
                                        rng.uniform((sizes[i], sizes[j]),
                                                    -rec_bound, rec_bound))
                      for (i, j) in pairs} for g in GATES}
        self.b = {g: store.zeros(f"{p}.b{g}", (cfg.state_dim,)) for g in GATES}
        self.Wo = store.weight(f"{p}.Wo", cfg.state_dim, out_dim, rng)
        self.bo = store.zeros(f"{p}.bo", (out_dim,))

    @property
    def state_dim(self) -> int:
        return self.cfg.state_dim

    def init_state(self) -> T.Tensor:
        return T.zeros((self.cfg.state_dim,))

    def _assemble(self):
        """Concatenate stored blocks into full gate matrices (zeros where the
        mode stores no block). Done once per sequence; gradients reach the
        blocks through the concat."""
        cfg = self.cfg
        sizes = cfg.group_sizes
        full = {}
        for g in GATES:
            rows = []
            for i in range(cfg.k):
                cols = []
                for j in range(cfg.k):
                    blk = self.V[g].get((i, j))
                    if blk is None:
                        blk = T.zeros((sizes[i], sizes[j]))
                    cols.append(blk)
                rows.append(T.concat(cols, axis=1) if cfg.k > 1 else cols[0])
            full[f"V{g}"] = T.concat(rows, axis=0) if cfg.k > 1 else rows[0]
            ug = self.U[g]
            full[f"U{g}"] = T.concat(ug, axis=0) if cfg.k > 1 else ug[0]
        return full

    def step(self, x: T.Tensor, h: T.Tensor, t: int, assembled=None):
        """One clocked update at 1-based step t."""
        if assembled is None:
            assembled = self._assemble()
        cfg = self.cfg
        if x.shape != (self.input_dim,) or h.shape != (cfg.state_dim,):
            raise ValueError(f"mgru step expects x {(self.input_dim,)} and h "
                             f"{(cfg.state_dim,)}, got {x.shape} and {h.shape}")
        act = active_groups(t, cfg)
        r = T.sigmoid(assembled["Ur"] @ x + assembled["Vr"] @ h + self.b["r"])
        z = T.sigmoid(assembled["Uz"] @ x + assembled["Vz"] @ h + self.b["z"])
        hbar = T.tanh(assembled["Uh"] @ x + assembled["Vh"] @ (r * h) + self.b["h"])
        h_upd = (1.0 - z) * h + z * hbar
        if len(act) == cfg.k:
            parts = [h_upd]
        else:
            parts = []
            for i, (off, size) in enumerate(zip(cfg.offsets, cfg.group_sizes)):
                src = h_upd if i in act else h
                parts.append(T.narrow(src, 0, off, size))
        h_new = T.concat(parts) if len(parts) > 1 else parts[0]
        o = self.Wo @ h_new + self.bo
        return h_new, o

    def run(self, xs, h0=None, start_t: int = 1):
        """Iterate over a sequence; step indices count from ``start_t``."""
        assembled = self._assemble()
        h = h0 if h0 is not None else self.init_state()
        states, outputs = [], []
        for offset, x in enumerate(xs):
            h, o = self.step(x, h, start_t + offset, assembled)
            states.append(h)
            outputs.append(o)
        return states, outputs, h


def collect_states(encoder, frames, max_steps: int | None = None):
    """Eval-mode per-step hidden states as an (S, state_dim) array.

    Every downstream feature path (average pooling, per-group VLAD) consumes
    exactly this matrix, so the paths cannot drift apart.
    """
    if max_steps is not None:
        frames = frames[:max_steps]
    if frames.shape[0] < 1:
        raise ValueError("cannot encode an empty frame sequence")
    xs = [T.constant(frames[i]) for i in range(frames.shape[0])]
    states, _, _ = encoder.run(xs)
    return np.stack([s.data for s in states], axis=0)
