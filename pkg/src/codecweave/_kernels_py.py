"""Pure-numpy reference kernels. The compiled ``_kernels`` module mirrors these."""
from __future__ import annotations

import numpy as np

_GELU_C = float(np.sqrt(2.0 / np.pi))


def softmax_xent(logits, targets, weights):
    """Weighted cross-entropy over rows, gradient written into ``logits``.

    ``logits`` is ``(R, C)``; ``targets`` ``(R,)`` int64 with ``-1`` for
    ignored rows; ``weights`` ``(R,)``. Returns ``sum_r w_r * CE_r`` and
    overwrites ``logits`` with ``d(sum)/d(logits)``. Ignored rows get zeros.
    """
    live = targets >= 0
    loss = 0.0
    if not live.any():
        logits[...] = 0
        return 0.0
    idx = np.flatnonzero(live)
    x = logits[idx]
    x -= x.max(axis=1, keepdims=True)
    np.exp(x, out=x)
    s = x.sum(axis=1, keepdims=True)
    t = targets[idx]
    p_t = x[np.arange(len(idx)), t] / s[:, 0]
    w = weights[idx].astype(logits.dtype)
    loss = float(-(w.astype(np.float64) * np.log(p_t.astype(np.float64))).sum())
    x /= s
    x[np.arange(len(idx)), t] -= 1.0
    x *= w[:, None]
    logits[...] = 0
    logits[idx] = x
    return loss


def layernorm_fwd(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * g + b, xhat, rstd


def layernorm_bwd(dy, xhat, rstd, g):
    D = xhat.shape[-1]
    dg = (dy * xhat).reshape(-1, D).sum(axis=0)
    db = dy.reshape(-1, D).sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def gelu_fwd(x):
    """tanh-approximate GELU; returns (y, tanh term) for the backward pass."""
    th = np.tanh(_GELU_C * x * (1.0 + 0.044715 * x * x))
    return 0.5 * x * (1.0 + th), th


def gelu_bwd(dy, x, th):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def causal_softmax(scores):
    """In-place causal softmax over the last axis of ``(..., N, N)`` scores."""
    N = scores.shape[-1]
    upper = np.triu(np.ones((N, N), dtype=bool), 1)
    scores[..., upper] = -np.inf
    scores -= scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def softmax_bwd(att, datt):
    return att * (datt - (att * datt).sum(axis=-1, keepdims=True))


def scatter_add_rows(table, ids, rows):
    """``table[ids[i]] += rows[i]`` with repeated ids accumulated in order."""
    np.add.at(table, ids, rows)


def adamw_update(p, g, m, v, lr, b1, b2, c1, c2, eps, shrink):
    """One fused AdamW update, in place on ``p``, ``m`` and ``v``.

    ``c1``/``c2`` are the bias corrections ``1 - beta**t``; ``shrink`` is the
    decoupled decay factor ``1 - lr * wd`` (1 for undecayed tensors).
    """
    if shrink != 1.0:
        p *= p.dtype.type(shrink)
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)
