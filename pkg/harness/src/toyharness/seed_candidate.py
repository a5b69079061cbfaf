"""Reference training program: a one-hidden-layer MLP language model trained
with Adam under the harness build-hook contract.

The harness owns the data slices, sequence lengths, masking, and the loss
function. This module only builds the model and takes optimization steps;
everything here is fair game for modification.
"""

import numpy as np

LEARNING_RATE = 0.02
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
HIDDEN_WIDTH = 64
EMBED_SCALE = 0.1


def init_model(rng, ctx):
    vocab = ctx.task.vocab_size
    width = ctx.task.model_width
    hidden = HIDDEN_WIDTH
    return {
        "embed": rng.standard_normal((vocab, width)) * EMBED_SCALE,
        "w1": rng.standard_normal((width, hidden)) / np.sqrt(width),
        "b1": np.zeros(hidden),
        "w2": rng.standard_normal((hidden, vocab)) / np.sqrt(hidden),
        "b2": np.zeros(vocab),
    }


def init_optimizer(params):
    return {
        "m": {key: np.zeros_like(value) for key, value in params.items()},
        "v": {key: np.zeros_like(value) for key, value in params.items()},
    }


def forward(params, tokens, mask):
    x = params["embed"][tokens]            # [B, T, width]
    pre = x @ params["w1"] + params["b1"]  # [B, T, hidden]
    hid = np.maximum(pre, 0.0)
    logits = hid @ params["w2"] + params["b2"]
    cache = {"tokens": tokens, "x": x, "pre": pre, "hid": hid}
    return logits, cache


def backward(params, cache, dlogits):
    dw2 = np.einsum("bth,btv->hv", cache["hid"], dlogits)
    db2 = dlogits.sum(axis=(0, 1))
    dhid = dlogits @ params["w2"].T
    dpre = dhid * (cache["pre"] > 0)
    dw1 = np.einsum("btd,bth->dh", cache["x"], dpre)
    db1 = dpre.sum(axis=(0, 1))
    dx = dpre @ params["w1"].T
    dembed = np.zeros_like(params["embed"])
    np.add.at(dembed, cache["tokens"], dx)
    return {"embed": dembed, "w1": dw1, "b1": db1, "w2": dw2, "b2": db2}


def optimizer_step(params, grads, state, step):
    for key, grad in grads.items():
        m = state["m"][key]
        v = state["v"][key]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad * grad
        m_hat = m / (1.0 - ADAM_BETA1 ** step)
        v_hat = v / (1.0 - ADAM_BETA2 ** step)
        params[key] -= LEARNING_RATE * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
