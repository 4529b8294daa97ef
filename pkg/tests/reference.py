"""Slow loop-based float64 transformer used as an independent oracle in tests."""

import numpy as np


def _rms(x, g, eps):
    return x / np.sqrt(np.mean(x * x) + eps) * g


def _rope(vec, pos, base):
    d = vec.size
    half = d // 2
    out = np.empty(d)
    for i in range(half):
        theta = pos * base ** (-2.0 * i / d)
        c, s = np.cos(theta), np.sin(theta)
        x1, x2 = vec[i], vec[i + half]
        out[i] = x1 * c - x2 * s
        out[i + half] = x2 * c + x1 * s
    return out


def reference_forward(weights, tokens, skip=None, erase=None):
    """Returns ``(h [L+1, n, d], probs [n, V])``.

    ``skip=(layer, cutoff)`` bypasses ``layer`` for positions ``<= cutoff``;
    ``erase=(layer, position, vector)`` overwrites the residual leaving ``layer``.
    """
    cfg = weights.config
    W = {k: v.astype(np.float64) for k, v in weights.tensors.items()}
    n, d, dh = len(tokens), cfg.d_model, cfg.d_head
    group = cfg.n_q_heads // cfg.n_kv_heads
    h = np.array([W["embed"][t] for t in tokens])
    hs = [h.copy()]
    for l in range(cfg.n_layers):
        P = lambda name: W[f"layers.{l}.{name}"]
        x = np.array([_rms(h[t], P("attn_norm"), cfg.eps) for t in range(n)])
        q, k, v = x @ P("wq"), x @ P("wk"), x @ P("wv")
        att = np.zeros((n, cfg.n_q_heads * dh))
        for head in range(cfg.n_q_heads):
            kvh = head // group
            qs = [_rope(q[t, head * dh : (head + 1) * dh], t, cfg.rope_base) for t in range(n)]
            ks = [_rope(k[t, kvh * dh : (kvh + 1) * dh], t, cfg.rope_base) for t in range(n)]
            for t in range(n):
                scores = np.array([qs[t] @ ks[u] / np.sqrt(dh) for u in range(t + 1)])
                w = np.exp(scores - scores.max())
                w /= w.sum()
                att[t, head * dh : (head + 1) * dh] = sum(w[u] * v[u, kvh * dh : (kvh + 1) * dh] for u in range(t + 1))
        hhat = h + att @ P("wo")
        x2 = np.array([_rms(hhat[t], P("mlp_norm"), cfg.eps) for t in range(n)])
        gate = x2 @ P("w_gate")
        mlp = ((gate / (1 + np.exp(-gate))) * (x2 @ P("w_up"))) @ P("w_down")
        new = hhat + mlp
        if skip is not None and skip[0] == l:
            new[: skip[1] + 1] = h[: skip[1] + 1]
        if erase is not None and erase[0] == l:
            new[erase[1]] = erase[2]
        h = new
        hs.append(h.copy())
    logits = np.array([_rms(h[t], W["final_norm"], cfg.eps) for t in range(n)]) @ W["w_out"]
    z = np.exp(logits - logits.max(-1, keepdims=True))
    return np.stack(hs), z / z.sum(-1, keepdims=True)
