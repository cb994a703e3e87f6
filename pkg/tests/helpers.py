"""Independent reference implementations used as test oracles.

Everything here is written with explicit loops and its own math, on purpose:
these functions re-derive the transformer forward pass and the pruned
attention semantics from first principles so the package code has something
genuinely independent to be checked against.
"""
import numpy as np


def ref_softmax(z):
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def ref_rope_vec(x, pos, base):
    """Rotate-half position encoding of a single head vector."""
    d = len(x)
    out = np.empty(d)
    for i in range(d // 2):
        theta = pos * base ** (-2.0 * i / d)
        c, s = np.cos(theta), np.sin(theta)
        out[i] = x[i] * c - x[i + d // 2] * s
        out[i + d // 2] = x[i] * s + x[i + d // 2] * c
    return out


def ref_rms(x, w, eps=1e-6):
    return x / np.sqrt(np.mean(x * x) + eps) * w


def ref_silu(x):
    return x / (1.0 + np.exp(-x))


def reference_forward(weights, config, tokens, prompt_len=None, bits=None,
                      sink=0, window=0, streaming=()):
    """Token-by-token stateless forward pass; returns logits (T, vocab).

    Rows below `prompt_len` attend with plain causal attention. Rows at or
    past it attend with region semantics: keys inside the sink or within
    `window` positions are used full-width, all other keys only through the
    head's kept channels (`bits` (L, n_kv, d)); heads in `streaming` (or with
    no kept channels) skip the middle keys and values entirely.
    """
    c = config
    tokens = np.asarray(tokens)
    t = len(tokens)
    if prompt_len is None:
        prompt_len = t
    d, g = c.head_dim, c.group_size
    streaming = set(streaming)
    x = np.stack([weights["tok_emb"][tok] for tok in tokens])
    for li in range(c.n_layers):
        h = np.stack([ref_rms(x[p], weights[f"l{li}.attn_norm"]) for p in range(t)])
        q = np.stack([[ref_rope_vec((h[p] @ weights[f"l{li}.wq"])[hd * d:(hd + 1) * d], p, c.rope_base)
                       for hd in range(c.n_q_heads)] for p in range(t)])
        k = np.stack([[ref_rope_vec((h[p] @ weights[f"l{li}.wk"])[hd * d:(hd + 1) * d], p, c.rope_base)
                       for hd in range(c.n_kv_heads)] for p in range(t)])
        v = np.stack([[(h[p] @ weights[f"l{li}.wv"])[hd * d:(hd + 1) * d]
                       for hd in range(c.n_kv_heads)] for p in range(t)])
        attn_out = np.zeros((t, c.n_q_heads * d))
        for p in range(t):
            key_pos = np.arange(p + 1)
            full_key = (key_pos < sink) | (p - key_pos < window)
            for qh in range(c.n_q_heads):
                kv = qh // g
                keys, vals = k[:p + 1, kv], v[:p + 1, kv]
                if p < prompt_len or bits is None:
                    scores = keys @ q[p, qh] / np.sqrt(d)
                else:
                    kept = np.where(bits[li, kv])[0]
                    if len(kept) == 0 or (li, kv) in streaming:
                        keys, vals = keys[full_key], vals[full_key]
                        scores = keys @ q[p, qh] / np.sqrt(d)
                    else:
                        scores = np.where(full_key,
                                          keys @ q[p, qh],
                                          keys[:, kept] @ q[p, qh][kept]) / np.sqrt(d)
                probs = ref_softmax(scores)
                attn_out[p, qh * d:(qh + 1) * d] = probs @ vals
        x = x + attn_out @ weights[f"l{li}.wo"]
        for p in range(t):
            h2 = ref_rms(x[p], weights[f"l{li}.ffn_norm"])
            x[p] = x[p] + (ref_silu(h2 @ weights[f"l{li}.w_gate"])
                           * (h2 @ weights[f"l{li}.w_up"])) @ weights[f"l{li}.w_down"]
    return np.stack([ref_rms(x[p], weights["final_norm"]) @ weights["lm_head"]
                     for p in range(t)])


def reference_greedy_decode(weights, config, prompt, n_new, bits, sink, window,
                            streaming=()):
    """Stateless pruned greedy decoding; returns (tokens, per-step logits)."""
    seq = np.asarray(prompt)
    out, logit_trace = [], []
    logits = reference_forward(weights, config, seq)[-1]
    for _ in range(n_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        seq = np.concatenate([seq, [nxt]])
        logits = reference_forward(weights, config, seq, prompt_len=len(prompt),
                                   bits=bits, sink=sink, window=window,
                                   streaming=streaming)[-1]
        logit_trace.append(logits)
    return np.array(out), logit_trace


def brute_force_select(scores, keep_ratio, r):
    """Oracle for global top-fraction + per-head alignment selection."""
    scores = np.asarray(scores, dtype=np.float64)
    n_layers, n_heads, d = scores.shape
    total = scores.size
    n_keep = int(np.floor(keep_ratio * total + 0.5))
    ranked = sorted(range(total), key=lambda i: (-scores.reshape(-1)[i], i))
    chosen = set(ranked[:n_keep])
    bits = np.zeros_like(scores, dtype=np.uint8)
    for i in range(n_layers):
        for j in range(n_heads):
            prov = sum(1 for ch in range(d) if i * n_heads * d + j * d + ch in chosen)
            n_aligned = int(np.floor(prov / r + 0.5)) * r
            n_aligned = min(n_aligned, (d // r) * r)
            head_rank = sorted(range(d), key=lambda ch: (-scores[i, j, ch], ch))
            for ch in head_rank[:n_aligned]:
                bits[i, j, ch] = 1
    return bits


def brute_force_channel_ratios(q, k, group_size):
    """Per-channel Frobenius share oracle; q (T, n_q, d), k (T, n_kv, d)."""
    t, n_kv, d = k.shape
    out = np.zeros((n_kv, d))
    for j in range(n_kv):
        qj = q[:, j * group_size:(j + 1) * group_size].reshape(-1, d)
        full = np.zeros((qj.shape[0], t))
        per_ch = []
        for ch in range(d):
            contrib = np.outer(qj[:, ch], k[:, j, ch])
            full += contrib
            per_ch.append(contrib)
        den = np.sqrt((full ** 2).sum())
        if den == 0.0:
            continue
        for ch in range(d):
            out[j, ch] = np.sqrt((per_ch[ch] ** 2).sum()) / den
    return out


def brute_force_pearson(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    am, bm = a.mean(), b.mean()
    num = ((a - am) * (b - bm)).sum()
    return num / np.sqrt(((a - am) ** 2).sum() * ((b - bm) ** 2).sum())
