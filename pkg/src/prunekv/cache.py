"""Deployment-path decoding with a partitioned, channel-pruned key cache.

After prefill, keys outside the sink and local window are stored pruned to
each head's kept channels; sink + window keys stay full width. Keys leaving
the window are migrated to the pruned store in batches, but attention always
treats a key as full-width while it is logically inside the sink or window
and pruned-width once outside, so migration timing is purely a storage event.
Heads with zero kept channels are streaming heads: their middle K and V are
dropped entirely and they attend only to sink + window.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .model import MASK_NEG, rope_angles

DEFAULT_MIGRATE_EVERY = 32
DEFAULT_BYTES_PER_ELEMENT = 2  # fp16 deployment accounting


def _rms(x, w, eps=1e-6):
    return x / np.sqrt((x * x).mean(axis=-1, keepdims=True) + eps) * w


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _softmax(z, axis=-1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def np_forward(weights, config, tokens, want_q=False):
    """Plain-numpy full-attention forward over a prompt.

    Returns (per-layer list, logits (T, vocab)). Each layer entry is
    (k, v) of shape (T, n_kv, d) post-RoPE, plus q (T, n_q, d) if requested.
    """
    c = config
    tokens = np.asarray(tokens)
    t = tokens.shape[0]
    if t > c.max_pos:
        raise ValueError(f"sequence length {t} exceeds max_pos {c.max_pos}")
    d, g = c.head_dim, c.group_size
    cos, sin = rope_angles(d, np.arange(t), c.rope_base)
    half = d // 2
    additive = np.where(np.tril(np.ones((t, t), dtype=bool)), 0.0, MASK_NEG)
    scale = 1.0 / np.sqrt(d)

    def rot(x):  # (T, H, d)
        x1, x2 = x[..., :half], x[..., half:]
        c_, s_ = cos[:, None, :], sin[:, None, :]
        return np.concatenate([x1 * c_ - x2 * s_, x1 * s_ + x2 * c_], axis=-1)

    x = weights["tok_emb"][tokens]
    layers = []
    for i in range(c.n_layers):
        h = _rms(x, weights[f"l{i}.attn_norm"])
        q = rot((h @ weights[f"l{i}.wq"]).reshape(t, c.n_q_heads, d))
        k = rot((h @ weights[f"l{i}.wk"]).reshape(t, c.n_kv_heads, d))
        v = (h @ weights[f"l{i}.wv"]).reshape(t, c.n_kv_heads, d)
        layers.append((q, k, v) if want_q else (k, v))
        qh = q.transpose(1, 0, 2).reshape(c.n_kv_heads, g, t, d)
        kh = k.transpose(1, 0, 2)[:, None]
        vh = v.transpose(1, 0, 2)[:, None]
        attn = _softmax(qh @ kh.swapaxes(-1, -2) * scale + additive)
        out = (attn @ vh).transpose(2, 0, 1, 3).reshape(t, c.n_q_heads * d)
        x = x + out @ weights[f"l{i}.wo"]
        h2 = _rms(x, weights[f"l{i}.ffn_norm"])
        x = x + (_silu(h2 @ weights[f"l{i}.w_gate"]) * (h2 @ weights[f"l{i}.w_up"])) @ weights[f"l{i}.w_down"]
    logits = _rms(x, weights["final_norm"]) @ weights["lm_head"]
    return layers, logits


@dataclass
class LayerCache:
    k_sink: list = field(default_factory=list)  # entries (n_kv, d)
    v_sink: list = field(default_factory=list)
    k_win: list = field(default_factory=list)
    v_win: list = field(default_factory=list)
    k_mid: list = field(default_factory=list)  # per head: (t_mid, kept) or None
    v_mid: list = field(default_factory=list)  # per head: (t_mid, d) or None


class PartitionedKVCache:
    """Per-layer sink+local full K/V plus channel-pruned middle K (and V)."""

    def __init__(self, config, beta, sink, window, migrate_every=DEFAULT_MIGRATE_EVERY,
                 forced_streaming=()):
        bits = np.asarray(beta.bits)
        if bits.shape != config.factor_shape:
            raise ValueError(f"mask shape {bits.shape} != model {config.factor_shape}")
        self.config = config
        self.beta = beta
        self.sink = sink
        self.window = window
        self.migrate_every = migrate_every
        forced = set(forced_streaming)
        self.kept_channels = []
        self.streaming = []
        for i in range(config.n_layers):
            kept_row, stream_row = [], []
            for j in range(config.n_kv_heads):
                kept = np.where(bits[i, j])[0]
                is_stream = len(kept) == 0 or (i, j) in forced
                kept_row.append(np.empty(0, dtype=np.int64) if is_stream else kept)
                stream_row.append(is_stream)
            self.kept_channels.append(kept_row)
            self.streaming.append(stream_row)
        self.layers = [LayerCache(
            k_mid=[None if self.streaming[i][j] else np.empty((0, len(self.kept_channels[i][j])))
                   for j in range(config.n_kv_heads)],
            v_mid=[None if self.streaming[i][j] else np.empty((0, config.head_dim))
                   for j in range(config.n_kv_heads)],
        ) for i in range(config.n_layers)]
        self.seq_len = 0

    @property
    def pending(self):
        """Tokens sitting in the window store beyond the logical window."""
        return max(0, len(self.layers[0].k_win) - self.window)

    def total_tokens(self):
        lc = self.layers[0]
        return len(lc.k_sink) + len(lc.k_win) + self.mid_tokens

    def stored_k_elements(self):
        n = 0
        for lc in self.layers:
            n += (len(lc.k_sink) + len(lc.k_win)) * self.config.n_kv_heads * self.config.head_dim
            for arr in lc.k_mid:
                if arr is not None:
                    n += arr.size
        return n

    def stored_v_elements(self):
        n = 0
        for lc in self.layers:
            n += (len(lc.v_sink) + len(lc.v_win)) * self.config.n_kv_heads * self.config.head_dim
            for arr in lc.v_mid:
                if arr is not None:
                    n += arr.size
        return n

    mid_tokens = 0  # tokens logically in the middle region


def prefill_and_partition(model, beta, tokens, sink, window,
                          migrate_every=DEFAULT_MIGRATE_EVERY, forced_streaming=()):
    """Full-attention prefill, then prune and partition the key cache.

    Returns (cache, logits of the last prompt position). A prompt shorter
    than sink + window simply leaves the pruned store empty.
    """
    cache = PartitionedKVCache(model.config, beta, sink, window, migrate_every, forced_streaming)
    weights = model.weights_numpy()
    layers, logits = np_forward(weights, model.config, tokens)
    t = len(tokens)
    sink_n = min(sink, t)
    win_start = max(t - window, sink_n)
    for i, (k, v) in enumerate(layers):
        lc = cache.layers[i]
        lc.k_sink = list(k[:sink_n])
        lc.v_sink = list(v[:sink_n])
        lc.k_win = list(k[win_start:])
        lc.v_win = list(v[win_start:])
        for j in range(model.config.n_kv_heads):
            if cache.streaming[i][j]:
                continue
            kept = cache.kept_channels[i][j]
            lc.k_mid[j] = k[sink_n:win_start, j][:, kept].copy()
            lc.v_mid[j] = v[sink_n:win_start, j].copy()
    cache.mid_tokens = win_start - sink_n
    cache.seq_len = t
    return cache, logits[-1]


def migrate_window(cache):
    """Move batches of window-exited keys into the pruned store.

    No-op while fewer than `migrate_every` tokens have left the window.
    """
    c = cache.config
    while cache.pending >= cache.migrate_every:
        m = cache.migrate_every
        for i in range(c.n_layers):
            lc = cache.layers[i]
            old_k = np.stack(lc.k_win[:m])  # (m, n_kv, d)
            old_v = np.stack(lc.v_win[:m])
            del lc.k_win[:m], lc.v_win[:m]
            for j in range(c.n_kv_heads):
                if cache.streaming[i][j]:
                    continue
                kept = cache.kept_channels[i][j]
                lc.k_mid[j] = np.concatenate([lc.k_mid[j], old_k[:, j][:, kept]])
                lc.v_mid[j] = np.concatenate([lc.v_mid[j], old_v[:, j]])
        cache.mid_tokens += m
    return cache


def decode_step(model, cache, token):
    """One decoding step through the partitioned cache; returns vocab logits."""
    c = model.config
    if cache.config is not c and cache.config != c:
        raise ValueError("cache was built for a different model config")
    w = model.weights_numpy()
    d, g = c.head_dim, c.group_size
    pos = cache.seq_len
    if pos >= c.max_pos:
        raise ValueError(f"position {pos} exceeds max_pos {c.max_pos}")
    cos, sin = rope_angles(d, [pos], c.rope_base)
    half = d // 2
    scale = 1.0 / np.sqrt(d)

    def rot(x):  # (H, d)
        x1, x2 = x[:, :half], x[:, half:]
        return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)

    x = w["tok_emb"][token]
    for i in range(c.n_layers):
        h = _rms(x, w[f"l{i}.attn_norm"])
        q = rot((h @ w[f"l{i}.wq"]).reshape(c.n_q_heads, d))
        k = rot((h @ w[f"l{i}.wk"]).reshape(c.n_kv_heads, d))
        v = (h @ w[f"l{i}.wv"]).reshape(c.n_kv_heads, d)
        lc = cache.layers[i]
        lc.k_win.append(k)
        lc.v_win.append(v)
        win_k = np.stack(lc.k_win)  # (m, n_kv, d)
        win_v = np.stack(lc.v_win)
        stale = max(0, len(lc.k_win) - cache.window)
        sink_k = np.stack(lc.k_sink) if lc.k_sink else np.empty((0, c.n_kv_heads, d))
        sink_v = np.stack(lc.v_sink) if lc.v_sink else np.empty((0, c.n_kv_heads, d))
        heads_out = np.empty((c.n_q_heads, d))
        for j in range(c.n_kv_heads):
            qg = q[j * g:(j + 1) * g]  # (g, d)
            full_k = np.concatenate([sink_k[:, j], win_k[stale:, j]])
            full_v = np.concatenate([sink_v[:, j], win_v[stale:, j]])
            logits_full = qg @ full_k.T * scale
            if cache.streaming[i][j]:
                p = _softmax(logits_full)
                heads_out[j * g:(j + 1) * g] = p @ full_v
            else:
                kept = cache.kept_channels[i][j]
                prun_k = np.concatenate([lc.k_mid[j], win_k[:stale, j][:, kept]])
                prun_v = np.concatenate([lc.v_mid[j], win_v[:stale, j]])
                logits_prun = qg[:, kept] @ prun_k.T * scale
                p = _softmax(np.concatenate([logits_prun, logits_full], axis=1))
                n_p = prun_k.shape[0]
                heads_out[j * g:(j + 1) * g] = p[:, :n_p] @ prun_v + p[:, n_p:] @ full_v
        x = x + heads_out.reshape(-1) @ w[f"l{i}.wo"]
        h2 = _rms(x, w[f"l{i}.ffn_norm"])
        x = x + (_silu(h2 @ w[f"l{i}.w_gate"]) * (h2 @ w[f"l{i}.w_up"])) @ w[f"l{i}.w_down"]
    cache.seq_len = pos + 1
    migrate_window(cache)
    return _rms(x, w["final_norm"]) @ w["lm_head"]


def greedy_decode(model, tokens, n_new, beta, sink, window,
                  migrate_every=DEFAULT_MIGRATE_EVERY, forced_streaming=(),
                  collect_logits=False, question=None):
    """Prefill then greedily decode `n_new` tokens through the engine.

    `question` tokens, if given, are fed through the decode path after the
    prefill (context cached first, the query arrives later), so even the
    first generated token attends the pruned cache.
    """
    cache, last_logits = prefill_and_partition(model, beta, tokens, sink, window,
                                               migrate_every, forced_streaming)
    out, logit_trace = [], []
    logits = last_logits
    if question is not None:
        for tok in np.asarray(question):
            logits = decode_step(model, cache, int(tok))
    for _ in range(n_new):
        nxt = int(np.argmax(logits))
        out.append(nxt)
        logits = decode_step(model, cache, nxt)
        if collect_logits:
            logit_trace.append(logits)
    return np.array(out, dtype=np.int64), logit_trace, cache


def greedy_decode_dense(model, tokens, n_new):
    """Baseline greedy decode recomputing full attention from scratch each step."""
    weights = model.weights_numpy()
    seq = np.asarray(tokens)
    out = []
    for _ in range(n_new):
        _, logits = np_forward(weights, model.config, seq)
        nxt = int(np.argmax(logits[-1]))
        out.append(nxt)
        seq = np.concatenate([seq, [nxt]])
    return np.array(out, dtype=np.int64)


@dataclass
class HeadGroup:
    retained_count: int
    members: list


def group_heads(beta):
    """Partition (layer, head) by retained channel count, largest first."""
    counts = beta.kept_counts()
    groups = {}
    for (i, j), n in np.ndenumerate(counts):
        groups.setdefault(int(n), []).append((int(i), int(j)))
    return [HeadGroup(retained_count=n, members=groups[n])
            for n in sorted(groups, reverse=True)]


@dataclass
class MemoryReport:
    bytes_k_baseline: int
    bytes_k_pruned: int
    bytes_v_baseline: int
    bytes_v_pruned: int
    k_reduction_fraction: float
    v_reduction_fraction: float

    def as_dict(self):
        return {k: getattr(self, k) for k in (
            "bytes_k_baseline", "bytes_k_pruned", "bytes_v_baseline", "bytes_v_pruned",
            "k_reduction_fraction", "v_reduction_fraction")}


def memory_report(beta, config, seq_len, sink, window,
                  bytes_per_element=DEFAULT_BYTES_PER_ELEMENT):
    """Cache footprint of the pruned layout vs a full-width baseline."""
    c = config
    d = c.head_dim
    counts = beta.kept_counts()
    mid = max(0, seq_len - sink - window)
    full_width_tokens = seq_len - mid
    baseline = c.n_layers * c.n_kv_heads * seq_len * d * bytes_per_element
    k_pruned = (c.n_layers * c.n_kv_heads * full_width_tokens * d
                + int(counts.sum()) * mid) * bytes_per_element
    n_streaming = int((counts == 0).sum())
    v_pruned = baseline - n_streaming * mid * d * bytes_per_element
    return MemoryReport(
        bytes_k_baseline=baseline,
        bytes_k_pruned=k_pruned,
        bytes_v_baseline=baseline,
        bytes_v_pruned=v_pruned,
        k_reduction_fraction=1.0 - k_pruned / baseline,
        v_reduction_fraction=1.0 - v_pruned / baseline,
    )


def decode_timing(model, beta, tokens, n_new, sink, window,
                  migrate_every=DEFAULT_MIGRATE_EVERY):
    """Wall-time per decoded token for the pruned path vs the dense baseline.

    CPU proxy for relative cache-traffic trends; absolute numbers are not
    meaningful.
    """
    start = time.perf_counter()
    greedy_decode(model, tokens, n_new, beta, sink, window, migrate_every)
    pruned = (time.perf_counter() - start) / n_new
    start = time.perf_counter()
    greedy_decode_dense(model, tokens, n_new)
    dense = (time.perf_counter() - start) / n_new
    return {"pruned_s_per_token": pruned, "dense_s_per_token": dense}
