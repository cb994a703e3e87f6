"""Measurement toolkit for channel and head importance.

Channel-norm importance ratios and their cross-task staticity, norm-based
static/dynamic pruning baselines, channel-pair frequency profiles, and
high-frequency-ratio head classification.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cache import np_forward
from .masking import BinaryChannelMask, round_half_up, select_mask

DEFAULT_OBS_WINDOW = 64


@dataclass
class ChannelNormVector:
    """Per-channel share of the query-key logit norm, flattened (L, n_kv, d)."""

    values: np.ndarray
    provenance: str
    obs_window: int
    zero_denominator: bool = False


@dataclass
class HeadFreqProfile:
    """Per-head share of logit norm carried by high-frequency channels."""

    w_hf: np.ndarray  # (L, n_kv)
    high_boundary: int  # channel pairs counted as high frequency


def record_qk(model, sample):
    """Post-RoPE (q (T, n_q, d), k (T, n_kv, d)) per layer for one sample."""
    layers, _ = np_forward(model.weights_numpy(), model.config, sample.tokens, want_q=True)
    return [(q, k) for q, k, _ in layers]


def channel_norm_ratios(model, sample, obs_window=DEFAULT_OBS_WINDOW):
    """Frobenius-norm share of each key channel's logit contribution.

    Queries are restricted to the last `obs_window` positions; each KV head
    pools the queries of all its group members.
    """
    c = model.config
    layers = record_qk(model, sample)
    t = layers[0][0].shape[0]
    if obs_window > t:
        raise ValueError(f"obs_window {obs_window} exceeds sequence length {t}")
    values = np.zeros(c.factor_shape)
    zero_den = False
    for i, (q, k) in enumerate(layers):
        qw = q[t - obs_window:]  # (w, n_q, d)
        for j in range(c.n_kv_heads):
            qj = qw[:, j * c.group_size:(j + 1) * c.group_size].reshape(-1, c.head_dim)
            kj = k[:, j]  # (T, d)
            den = np.linalg.norm(qj @ kj.T)
            if den == 0.0:
                zero_den = True
                continue
            # ||q_[ch] k_[ch]^T||_F = ||q_[ch]|| * ||k_[ch]|| for rank-1 outer products
            values[i, j] = np.linalg.norm(qj, axis=0) * np.linalg.norm(kj, axis=0) / den
    return ChannelNormVector(values=values.reshape(-1), provenance=f"len={t}",
                             obs_window=obs_window, zero_denominator=zero_den)


def pearson(a, b):
    """Sample Pearson correlation coefficient."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape or a.size < 2:
        raise ValueError(f"need two equal-length vectors of size >= 2, got {a.size} and {b.size}")
    da, db = a - a.mean(), b - b.mean()
    va, vb = (da * da).sum(), (db * db).sum()
    if va == 0.0 or vb == 0.0:
        raise ValueError("pearson undefined for zero-variance input")
    return float((da * db).sum() / np.sqrt(va * vb))


def staticity_matrix(model, samples_by_label, obs_window=DEFAULT_OBS_WINDOW):
    """Pairwise Pearson matrix of channel-norm vectors across task variants.

    `samples_by_label` maps a label to a list of samples whose ratio vectors
    are averaged before correlating.
    """
    labels = list(samples_by_label)
    vectors = []
    for label in labels:
        vs = [channel_norm_ratios(model, s, obs_window).values for s in samples_by_label[label]]
        vectors.append(np.mean(vs, axis=0))
    n = len(labels)
    mat = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = pearson(vectors[i], vectors[j])
    return labels, mat, vectors


def static_norm_mask(model, samples, keep_ratio, r, obs_window=DEFAULT_OBS_WINDOW):
    """Offline mask from channel norms averaged over calibration samples."""
    if not samples:
        raise ValueError("need at least one calibration sample")
    shape = model.config.factor_shape
    mean = np.mean([channel_norm_ratios(model, s, obs_window).values for s in samples], axis=0)
    return select_mask(mean.reshape(shape), keep_ratio, r)


def dynamic_norm_mask(model, sample, keep_ratio, q_window, r=1, budgets=None):
    """Per-sample norm-based mask from the last `q_window` queries only.

    Uniform variant (budgets None) keeps round(keep_ratio * d) channels in
    every head; the per-head variant keeps `budgets[l, h]` channels instead.
    """
    if q_window < 1:
        raise ValueError("q_window must be >= 1")
    c = model.config
    scores = channel_norm_ratios(model, sample, q_window).values.reshape(c.factor_shape)
    d = c.head_dim
    if budgets is None:
        budgets = np.full((c.n_layers, c.n_kv_heads), int(round_half_up(keep_ratio * d)), dtype=int)
    else:
        budgets = np.asarray(budgets, dtype=int)
    bits = np.zeros(c.factor_shape, dtype=np.uint8)
    for i in range(c.n_layers):
        for j in range(c.n_kv_heads):
            order = np.lexsort((np.arange(d), -scores[i, j]))
            bits[i, j, order[:budgets[i, j]]] = 1
    return BinaryChannelMask(bits=bits, r=r if budgets is None else 1, keep_ratio=keep_ratio)


def freq_profile(mask_or_values):
    """Mean retained ratio (or importance) per RoPE channel-pair index.

    Channel i pairs with i + d/2; pair index j aggregates both members
    across all layers and heads.
    """
    if isinstance(mask_or_values, BinaryChannelMask):
        values = mask_or_values.bits.astype(np.float64)
    else:
        values = np.asarray(mask_or_values, dtype=np.float64)
    d = values.shape[-1]
    if d % 2 != 0:
        raise ValueError(f"head dimension must be even, got {d}")
    half = d // 2
    flat = values.reshape(-1, d)
    return (flat[:, :half] + flat[:, half:]).mean(axis=0) / 2.0


def high_freq_ratio(model, sample, high_boundary=None, q_window=1):
    """Per-head ratio of logit norm carried by the high-frequency channels.

    High frequency means the lowest `high_boundary` pair indices (both pair
    members). Defaults to half the pairs. `q_window` controls how many of
    the last query rows are pooled (1 = single query vector).
    """
    c = model.config
    d = c.head_dim
    if high_boundary is None:
        high_boundary = d // 4  # half of the d/2 pairs
    if not 0 < high_boundary < d // 2 + 1:
        raise ValueError(f"high_boundary must be in (0, {d // 2}], got {high_boundary}")
    high = np.concatenate([np.arange(high_boundary), d // 2 + np.arange(high_boundary)])
    layers = record_qk(model, sample)
    t = layers[0][0].shape[0]
    w_hf = np.zeros((c.n_layers, c.n_kv_heads))
    for i, (q, k) in enumerate(layers):
        qw = q[t - q_window:]
        for j in range(c.n_kv_heads):
            qj = qw[:, j * c.group_size:(j + 1) * c.group_size].reshape(-1, d)
            kj = k[:, j]
            den = np.linalg.norm(qj @ kj.T)
            if den == 0.0:
                continue
            w_hf[i, j] = np.linalg.norm(qj[:, high] @ kj[:, high].T) / den
    return HeadFreqProfile(w_hf=w_hf, high_boundary=high_boundary)


def convert_streaming_by_whf(profile, fraction, mode="highest", seed=0):
    """Pick a fraction of all heads to force into streaming mode.

    Ordering by w_hf descending (`highest`), ascending (`lowest`), or a
    seeded shuffle (`random`); ties break by (layer, head) index.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    flat = profile.w_hf.reshape(-1)
    n = flat.size
    count = int(round_half_up(fraction * n))
    idx = np.arange(n)
    if mode == "highest":
        order = np.lexsort((idx, -flat))
    elif mode == "lowest":
        order = np.lexsort((idx, flat))
    elif mode == "random":
        order = np.random.default_rng(seed).permutation(n)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    n_heads = profile.w_hf.shape[1]
    return [(int(i // n_heads), int(i % n_heads)) for i in order[:count]]
