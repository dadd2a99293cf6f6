"""Finite-difference verification of analytic gradients.

The numeric side perturbs every parameter coordinate by +/-eps and takes
central differences of the re-evaluated loss, so it is independent of the
reverse-mode path it checks. Suites run in float64 with fixed seeds; the
pass bar is a max relative error below 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .classify import ClassifierHead
from .data import RunConfig
from .caption import CaptionModel
from .optim import ParamStore
from .recurrent import GruCell, MgruConfig, MultirateGru
from .rng import RngState
from .seq2seq import AttentionDecoder, EncoderTrace, masked_huber_loss

__all__ = ["finite_difference_gradients", "analytic_gradients", "check_loss",
           "OpCheck", "run_suite", "SUITE_MODULES", "TOLERANCE"]

TOLERANCE = 1e-4
EPS = 1e-5


def finite_difference_gradients(loss_fn, store: ParamStore, eps: float = EPS) -> dict:
    grads = {}
    for name in store.names():
        flat = store[name].data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            g[i] = (f_plus - f_minus) / (2.0 * eps)
        grads[name] = g.reshape(store[name].data.shape)
    return grads


def analytic_gradients(loss_fn, store: ParamStore) -> dict:
    store.zero_grads()
    loss_fn().backward()
    return {name: store[name].grad.copy() for name in store.names()}


def check_loss(loss_fn, store: ParamStore, eps: float = EPS) -> float:
    """Max relative error between analytic and central-difference gradients."""
    analytic = analytic_gradients(loss_fn, store)
    numeric = finite_difference_gradients(loss_fn, store, eps)
    worst = 0.0
    for name in store.names():
        a, n = analytic[name], numeric[name]
        scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))
        err = np.abs(a - n) / scale
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


# ------------------------------------------------------------------ builders
# Each builder returns (store, loss_fn); run under precision("float64").

def _mix(rng: RngState, shape) -> T.Tensor:
    return T.constant(rng.uniform(shape, -1.0, 1.0))


def _scalarize(out: T.Tensor, rng: RngState) -> T.Tensor:
    return T.sum_all(out * _mix(rng, out.shape))


def _b_matmul(rng):
    store = ParamStore()
    a = store.add("a", rng.uniform((3, 4), -1, 1))
    b = store.add("b", rng.uniform((4, 2), -1, 1))
    v = store.add("v", rng.uniform((4,), -1, 1))
    w = store.add("w", rng.uniform((3,), -1, 1))
    m1, m2, m3 = _mix(rng, (3, 2)), _mix(rng, (3,)), _mix(rng, (4,))

    def loss():
        return (T.sum_all(T.matmul(a, b) * m1)
                + T.sum_all(T.matmul(a, v) * m2)
                + T.sum_all(T.matmul(w, a) * m3))

    return store, loss


def _b_add_mul(rng):
    store = ParamStore()
    a = store.add("a", rng.uniform((3, 4), -1, 1))
    b = store.add("b", rng.uniform((3, 4), -1, 1))
    bias = store.add("bias", rng.uniform((4,), -1, 1))
    s = store.add("s", rng.uniform((), -1, 1))
    m = _mix(rng, (3, 4))

    def loss():
        return T.sum_all(((a + b) * b + (a + bias) + a * s - b) * m)

    return store, loss


def _b_unary(fn, low=-2.0, high=2.0):
    def build(rng):
        store = ParamStore()
        x = store.add("x", rng.uniform((3, 4), low, high))
        m = _mix(rng, (3, 4))

        def loss():
            return T.sum_all(fn(x) * m)

        return store, loss

    return build


def _b_relu(rng):
    store = ParamStore()
    signs = np.where(rng.uniform((3, 4)) > 0.5, 1.0, -1.0)
    x = store.add("x", rng.uniform((3, 4), 0.3, 1.5) * signs)  # keep clear of the kink
    m = _mix(rng, (3, 4))

    def loss():
        return T.sum_all(T.relu(x) * m)

    return store, loss


def _b_softmax(rng):
    store = ParamStore()
    x = store.add("x", rng.uniform((3, 5), -2, 2))
    m1, m2 = _mix(rng, (3, 5)), _mix(rng, (3, 5))

    def loss():
        return T.sum_all(T.softmax(x) * m1) + T.sum_all(T.log_softmax(x) * m2)

    return store, loss


def _b_slicing(rng):
    store = ParamStore()
    a = store.add("a", rng.uniform((2, 3), -1, 1))
    b = store.add("b", rng.uniform((2, 3), -1, 1))
    v = store.add("v", rng.uniform((4,), -1, 1))
    m = _mix(rng, (3, 2))

    def loss():
        stacked = T.concat([a, b], axis=0)          # (4, 3)
        cut = T.narrow(stacked, 0, 1, 2)            # (2, 3)
        flipped = T.transpose(cut)                  # (3, 2)
        flat = T.reshape(flipped, (6,))
        return (T.sum_all(flipped * m) + T.pick(flat, 2)
                + T.pick(v, 1) + T.mean(v) + T.sum_all(v))

    return store, loss


def _b_huber(rng):
    store = ParamStore()
    base = rng.uniform((4, 3), -1, 1)
    rows = [store.add(f"p{i}", base[i]) for i in range(4)]
    # offsets keep |pred - target| away from the delta=0.5 knee
    offsets = np.array([0.1, -0.3, 0.9, -1.5])
    targets = base + offsets[:, None]
    mask = np.array([True, True, False, True])

    def loss():
        loss_t, _ = masked_huber_loss(rows, targets, mask, delta=0.5)
        return loss_t

    return store, loss


def _b_dropout(rng):
    store = ParamStore()
    x = store.add("x", rng.uniform((4, 5), -1, 1))
    m = _mix(rng, (4, 5))
    mask_seed = int(rng.integers(0, 2**31))

    def loss():
        return T.sum_all(T.dropout(x, 0.4, True, RngState(mask_seed)) * m)

    return store, loss


def _b_embedding(rng):
    store = ParamStore()
    table = store.add("table", rng.uniform((5, 3), -1, 1))
    m = _mix(rng, (4, 3))

    def loss():
        return T.sum_all(T.embedding(table, [0, 2, 2, 4]) * m)

    return store, loss


def _b_gru(rng):
    store = ParamStore()
    cell = GruCell(store, "g", 3, 4, 3, rng)
    store.add("x1", rng.uniform((3,), -1, 1))
    store.add("x2", rng.uniform((3,), -1, 1))
    store.add("h0", rng.uniform((4,), -0.5, 0.5))
    mh, mo1, mo2 = _mix(rng, (4,)), _mix(rng, (3,)), _mix(rng, (3,))

    def loss():
        h1, o1 = cell.step(store["x1"], store["h0"])
        h2, o2 = cell.step(store["x2"], h1)
        return T.sum_all(h2 * mh) + T.sum_all(o1 * mo1) + T.sum_all(o2 * mo2)

    return store, loss


def _b_mgru(mode):
    def build(rng):
        store = ParamStore()
        cfg = MgruConfig((3, 2, 2), (1, 3, 6), mode)
        net = MultirateGru(store, "m", 2, cfg, 3, rng)
        steps = 7  # covers passthrough-only, partial, and all-active steps
        for i in range(steps):
            store.add(f"x{i}", rng.uniform((2,), -1, 1))
        mh = _mix(rng, (7,))
        mo = _mix(rng, (3,))
        mh2 = _mix(rng, (7,))

        def loss():
            xs = [store[f"x{i}"] for i in range(steps)]
            states, outputs, h_last = net.run(xs)
            picked = T.concat([T.narrow(states[1], 0, 3, 2),   # passthrough slice
                               T.narrow(states[5], 0, 0, 3),
                               T.narrow(h_last, 0, 5, 2)])
            return (T.sum_all(picked * mh) + T.sum_all(outputs[2] * mo)
                    + T.sum_all(h_last * mh2))

        return store, loss

    return build


def _b_attention(rng):
    store = ParamStore()
    dec = AttentionDecoder(store, "d", 3, 4, 4, 3, 3, rng)
    for i in range(3):
        store.add(f"enc{i}", rng.uniform((4,), -1, 1))
    store.add("h_last", rng.uniform((4,), -0.5, 0.5))
    y1 = T.constant(rng.uniform((3,), -1, 1))
    y2 = T.constant(rng.uniform((3,), -1, 1))
    mo1, mo2, mh, ma = (_mix(rng, (3,)), _mix(rng, (3,)),
                        _mix(rng, (4,)), _mix(rng, (4,)))

    def loss():
        trace = EncoderTrace([store[f"enc{i}"] for i in range(3)], store["h_last"])
        prepared = dec.prepare(trace)
        h, a, out1, _ = dec.step(y1, dec.init_context(), trace.last_state, prepared)
        h, a, out2, _ = dec.step(y2, a, h, prepared)
        return (T.sum_all(out1 * mo1) + T.sum_all(out2 * mo2)
                + T.sum_all(h * mh) + T.sum_all(a * ma))

    return store, loss


def _b_classifier_head(rng):
    store = ParamStore()
    head = ClassifierHead(store, "head", 5, 3, rng, hidden=6, dropout_p=0.5)
    store.add("x", rng.uniform((5,), -1, 1))

    def loss():
        return -T.pick(T.log_softmax(head.logits(store["x"])), 2)

    return store, loss


def _b_caption_decoder(rng):
    store = ParamStore()
    config = RunConfig(K=3, cell_size=4, groups=2, periods=(1, 2),
                       attention_size=3, dropout=0.0, batch_size=3, steps=1)
    model = CaptionModel(store, 2, config, vocab_size=6, rng=rng, embed_dim=3)
    frames = rng.uniform((3, 2), -1, 1)
    targets = np.array([4, 5, 2, 1])  # real tokens, <EOS>, then <PAD> (masked)

    def loss():
        trace = model.encode(frames)
        nll, _ = model.sequence_nll(trace, targets)
        return nll

    return store, loss


# ------------------------------------------------------------------ suites

SUITE_MODULES = {
    "numeric": {
        "matmul": _b_matmul,
        "add_mul": _b_add_mul,
        "tanh": _b_unary(T.tanh),
        "sigmoid": _b_unary(T.sigmoid),
        "relu": _b_relu,
        "softmax": _b_softmax,
        "slicing": _b_slicing,
        "dropout": _b_dropout,
        "embedding": _b_embedding,
    },
    "recurrent": {
        "gru_step": _b_gru,
        "mgru_step.fast_to_slow": _b_mgru("fast_to_slow"),
        "mgru_step.slow_to_fast": _b_mgru("slow_to_fast"),
    },
    "seq2seq": {
        "attention_step": _b_attention,
        "huber": _b_huber,
    },
    "classify": {
        "classifier_head": _b_classifier_head,
    },
    "caption": {
        "caption_decoder": _b_caption_decoder,
    },
}


@dataclass
class OpCheck:
    name: str
    max_rel_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < TOLERANCE


def run_suite(module: str = "all", seeds: int = 10, eps: float = EPS) -> list:
    """Gradient-check every op of a module over fixed seeds."""
    if module == "all":
        names = list(SUITE_MODULES)
    elif module in SUITE_MODULES:
        names = [module]
    else:
        raise ValueError(f"unknown gradcheck module {module!r}; expected one of "
                         f"{sorted(SUITE_MODULES)} or 'all'")
    results = []
    with T.precision("float64"):
        for mod in names:
            for op, builder in SUITE_MODULES[mod].items():
                worst = 0.0
                for seed in range(seeds):
                    store, loss_fn = builder(RngState(1000 * seed + 17))
                    worst = max(worst, check_loss(loss_fn, store, eps))
                results.append(OpCheck(f"{mod}.{op}", worst))
    return results
