"""Independent reference implementations used to verify the fast paths.

Everything here is deliberately flat, loop-heavy numpy with no imports from
the package's compute graph: a second route to the same numbers.
"""
from __future__ import annotations

import math

import numpy as np


# -- primitive oracles --------------------------------------------------------


def naive_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def naive_softmax_rows(x: np.ndarray) -> np.ndarray:
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        row = x[i] - x[i].max()
        e = np.exp(row)
        out[i] = e / e.sum()
    return out


def naive_layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray,
                     eps: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(x)
    for i in range(x.shape[0]):
        mu = x[i].mean()
        var = ((x[i] - mu) ** 2).mean()
        out[i] = gamma * ((x[i] - mu) / math.sqrt(var + eps)) + beta
    return out


def naive_cross_entropy(logits: np.ndarray, targets: np.ndarray,
                        smoothing: float = 0.0, reduction: str = "mean") -> float:
    n, vocab = logits.shape
    total = 0.0
    for i in range(n):
        p = naive_softmax_rows(logits[i:i + 1])[0]
        q = np.full(vocab, smoothing / vocab)
        q[targets[i]] += 1.0 - smoothing
        total += -np.sum(q * np.log(p))
    return total / n if reduction == "mean" else total


def naive_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray,
                    mask: np.ndarray | None = None):
    """Per-query-row scaled dot attention."""
    n_q, d_k = q.shape
    probs = np.zeros((n_q, k.shape[0]))
    out = np.zeros((n_q, v.shape[1]))
    for i in range(n_q):
        scores = np.array([np.dot(q[i], k[j]) for j in range(k.shape[0])])
        scores = scores / math.sqrt(d_k)
        if mask is not None:
            scores = np.where(mask[i], scores, scores - 1e9)
        e = np.exp(scores - scores.max())
        p = e / e.sum()
        probs[i] = p
        out[i] = sum(p[j] * v[j] for j in range(v.shape[0]))
    return out, probs


def naive_fuse_attention(query: np.ndarray, prevs: list, params,
                         layer_mask: np.ndarray | None = None):
    """Position-at-a-time fuse attention: stack the history, attend, merge."""
    seq, d = query.shape
    n_hist = len(prevs)
    n_heads = len(params.w_q)
    d_k = params.w_q[0].data.shape[1]
    out = np.zeros((seq, d))
    probs = np.zeros((n_heads, seq, n_hist))
    for t in range(seq):
        hist = np.stack([p[t] for p in prevs])
        head_outs = []
        for i in range(n_heads):
            qv = query[t] @ params.w_q[i].data
            keys = hist @ params.w_k[i].data
            vals = hist @ params.w_v[i].data
            scores = keys @ qv / math.sqrt(d_k)
            if layer_mask is not None:
                scores = np.where(layer_mask, scores, scores - 1e9)
            e = np.exp(scores - scores.max())
            p = e / e.sum()
            probs[i, t] = p
            head_outs.append(p @ vals)
        out[t] = np.concatenate(head_outs) @ params.w_o.data
    return out, probs


# -- metric oracles -------------------------------------------------------------


_SEP = "\x1f"


def oracle_compound_ok(prediction, realizations) -> bool:
    """String containment with token boundaries, over stored realizations."""
    haystack = _SEP + _SEP.join(prediction) + _SEP
    for real in realizations:
        needle = _SEP + _SEP.join(real) + _SEP
        if needle in haystack:
            return True
    return False


def oracle_cter(predictions, examples) -> tuple[float, float]:
    """(instance_rate, aggregate_rate) recounted from example annotations."""
    errors = []
    for pred, ex in zip(predictions, examples):
        errors.append(not oracle_compound_ok(pred, ex.compound.realizations))
    instance = sum(errors) / len(errors)
    groups: dict = {}
    for ex, err in zip(examples, errors):
        key = ex.compound.compound_id
        if key is None:
            key = ex.compound.atoms
        groups.setdefault(key, []).append(err)
    aggregate = sum(any(v) for v in groups.values()) / len(groups)
    return instance, aggregate


def oracle_exact_match(predictions, references) -> float:
    hits = 0
    for p, r in zip(predictions, references):
        if len(p) == len(r) and all(a == b for a, b in zip(p, r)):
            hits += 1
    return hits / len(predictions)


# -- flat reference transformer (vanilla, eval mode) ----------------------------


def _ref_softmax(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=-1, keepdims=True)
    e = np.exp(x - m)
    return e / np.sum(e, axis=-1, keepdims=True)


def _ref_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = np.mean(x, axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + 1e-5)
    return gamma * (xc * inv) + beta


def _ref_mha(x_q, x_k, x_v, w, prefix, n_heads, mask=None):
    heads = []
    for i in range(n_heads):
        q = x_q @ w[f"{prefix}.h{i}.w_q"]
        k = x_k @ w[f"{prefix}.h{i}.w_k"]
        v = x_v @ w[f"{prefix}.h{i}.w_v"]
        scores = (q @ k.T) * (1.0 / math.sqrt(q.shape[1]))
        if mask is not None:
            scores = scores + np.where(mask, 0.0, -1e9)
        heads.append(_ref_softmax(scores) @ v)
    merged = np.concatenate(heads, axis=1) if n_heads > 1 else heads[0]
    return merged @ w[f"{prefix}.w_o"]


def _ref_ffn(x, w, prefix):
    hidden = np.maximum(x @ w[f"{prefix}.w1"] + w[f"{prefix}.b1"], 0.0)
    return hidden @ w[f"{prefix}.w2"] + w[f"{prefix}.b2"]


def reference_forward(weights: dict, n_heads: int, n_enc: int, n_dec: int,
                      src: np.ndarray, tgt_in: np.ndarray) -> np.ndarray:
    """Vanilla encoder-decoder forward over raw numpy weights (by name)."""
    w = weights
    d = w["src_embed"].shape[1]
    h = w["src_embed"][src] * math.sqrt(d) + w["src_pos"][np.arange(len(src))]
    for k in range(n_enc):
        p = f"enc.{k}"
        h = _ref_norm(h + _ref_mha(h, h, h, w, f"{p}.self", n_heads),
                      w[f"{p}.norm_self.gamma"], w[f"{p}.norm_self.beta"])
        h = _ref_norm(h + _ref_ffn(h, w, f"{p}.ffn"),
                      w[f"{p}.norm_ffn.gamma"], w[f"{p}.norm_ffn.beta"])
    enc_out = h

    t = len(tgt_in)
    causal = np.tril(np.ones((t, t), dtype=bool))
    g = w["tgt_embed"][tgt_in] * math.sqrt(d) + w["tgt_pos"][np.arange(t)]
    for k in range(n_dec):
        p = f"dec.{k}"
        g = _ref_norm(g + _ref_mha(g, g, g, w, f"{p}.self", n_heads, causal),
                      w[f"{p}.norm_self.gamma"], w[f"{p}.norm_self.beta"])
        g = _ref_norm(g + _ref_mha(g, enc_out, enc_out, w, f"{p}.cross", n_heads),
                      w[f"{p}.norm_cross.gamma"], w[f"{p}.norm_cross.beta"])
        g = _ref_norm(g + _ref_ffn(g, w, f"{p}.ffn"),
                      w[f"{p}.norm_ffn.gamma"], w[f"{p}.norm_ffn.beta"])
    return g @ w["out.w"]
