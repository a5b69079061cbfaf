"""Hot numeric kernels: synthetic-stream generation, cross-entropy loss with
gradient, and attention-mask construction.

Each kernel has a numba @njit implementation and a pure-numpy fallback.
Backend selection: TOYHARNESS_BACKEND=numba|numpy (default numba when the
package is importable). The sequential stream kernel consumes pre-drawn
randomness so both backends produce bit-identical token streams.
"""

from __future__ import annotations

import os

import numpy as np

_requested = os.environ.get("TOYHARNESS_BACKEND", "numba").lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"TOYHARNESS_BACKEND must be 'numba' or 'numpy', got {_requested!r}")

HAS_NUMBA = False
if _requested == "numba":
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        pass

BACKEND = "numba" if HAS_NUMBA else "numpy"


# -- synthetic token stream --------------------------------------------------
# Markov chain: with probability p_follow the next token is the affine map
# (mult*prev + inc) mod vocab, otherwise a uniformly pre-drawn alternative.


def _gen_stream_py(uniforms, alternatives, p_follow, mult, inc, vocab):
    n = uniforms.shape[0]
    out = np.empty(n, dtype=np.int64)
    token = 0
    for i in range(n):
        if uniforms[i] < p_follow:
            token = (mult * token + inc) % vocab
        else:
            token = alternatives[i]
        out[i] = token
    return out


# -- cross-entropy over flattened logits -------------------------------------


def _softmax_xent_py(logits, targets):
    n, v = logits.shape
    dlogits = np.empty_like(logits)
    loss = 0.0
    for i in range(n):
        row = logits[i]
        m = row.max()
        e = np.exp(row - m)
        z = e.sum()
        p = e / z
        loss -= np.log(p[targets[i]])
        dlogits[i] = p
        dlogits[i, targets[i]] -= 1.0
    return loss / n, dlogits / n


def _softmax_xent_np(logits, targets):
    n = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    p = e / e.sum(axis=1, keepdims=True)
    idx = np.arange(n)
    loss = -np.log(p[idx, targets]).sum() / n
    dlogits = p
    dlogits[idx, targets] -= 1.0
    return loss, dlogits / n


# -- causal + document attention mask ----------------------------------------


def _build_mask_py(positions, doc_len):
    b, t = positions.shape
    mask = np.zeros((b, t, t), dtype=np.float64)
    for i in range(b):
        for q in range(t):
            doc_q = positions[i, q] // doc_len
            for k in range(q + 1):
                if positions[i, k] // doc_len == doc_q:
                    mask[i, q, k] = 1.0
    return mask


def _build_mask_np(positions, doc_len):
    docs = positions // doc_len  # [B, T]
    same_doc = docs[:, :, None] == docs[:, None, :]
    t = positions.shape[1]
    causal = np.tril(np.ones((t, t), dtype=bool))
    return (same_doc & causal[None, :, :]).astype(np.float64)


if HAS_NUMBA:
    gen_stream = njit(cache=True)(_gen_stream_py)
    softmax_xent = njit(cache=True)(_softmax_xent_py)
    build_mask = njit(cache=True)(_build_mask_py)
else:
    gen_stream = _gen_stream_py
    softmax_xent = _softmax_xent_np
    build_mask = _build_mask_np
