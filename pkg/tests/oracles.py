"""Independent oracles the tests check the implementation against.

Everything here is deliberately naive: plain loops, no shared code with the
package's compute paths.
"""

import numpy as np


def brute_force_vlad(points, centers, pca_mean=None, pca_proj=None):
    """Loop over every point and center: residual sums, SSR, per-center l2,
    global l2."""
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    k, d = centers.shape
    if pca_proj is not None:
        projected = []
        for p in points:
            projected.append(pca_proj @ (p - pca_mean))
        points = np.array(projected).reshape(-1, d)
    acc = np.zeros((k, d))
    for p in points:
        best, best_dist = 0, None
        for ci in range(k):
            dist = float(((p - centers[ci]) ** 2).sum())
            if best_dist is None or dist < best_dist:
                best, best_dist = ci, dist
        acc[best] += p - centers[best]
    flat = acc.reshape(-1)
    out = np.empty_like(flat)
    for i, v in enumerate(flat):
        out[i] = np.sign(v) * np.sqrt(abs(v))
    for ci in range(k):
        block = out[ci * d:(ci + 1) * d]
        norm = np.sqrt((block ** 2).sum())
        if norm > 0:
            out[ci * d:(ci + 1) * d] = block / norm
    norm = np.sqrt((out ** 2).sum())
    if norm > 0:
        out = out / norm
    return out


def naive_average_precision(scores, labels):
    """AP by the definition: walk the ranking, average precision at hits."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    hits = 0
    precisions = []
    for rank, idx in enumerate(order, start=1):
        if labels[idx]:
            hits += 1
            precisions.append(hits / rank)
    return sum(precisions) / len(precisions)


def enumerate_sequences(step_logprobs, vocab_size, max_len, eos):
    """All decodable sequences of length <= max_len and their log-probs.

    ``step_logprobs(prefix)`` returns the next-token log-probability vector
    for a prefix tuple (empty tuple = first step). Returns a list of
    (tokens_without_eos, logprob) for every sequence ending in EOS, plus
    every full-length unfinished sequence.
    """
    finished, unfinished = [], []

    def walk(prefix, logp):
        if len(prefix) == max_len:
            unfinished.append((prefix, logp))
            return
        vec = step_logprobs(prefix)
        for tok in range(vocab_size):
            total = logp + float(vec[tok])
            if tok == eos:
                finished.append((prefix, total))
            else:
                walk(prefix + (tok,), total)

    walk((), 0.0)
    return finished, unfinished


def greedy_argmax_decode(step_logprobs, vocab_size, max_len, eos):
    """Token-by-token argmax decoding (ties to the lowest token index)."""
    prefix = ()
    logp = 0.0
    for _ in range(max_len):
        vec = step_logprobs(prefix)
        tok = int(np.argmax(vec))
        logp += float(vec[tok])
        if tok == eos:
            return prefix, logp, True
        prefix = prefix + (tok,)
    return prefix, logp, False
