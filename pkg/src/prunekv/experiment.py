"""Experiment configuration and end-to-end pipeline commands.

Everything here is deterministic given the config: reports embed a hash of
the exact config that produced them and contain no wall-clock data (timing
goes to a sidecar file on request).
"""
from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import analysis, cache, masking, model as model_mod, storage, tasks

MODE_FULL = "full"
MODE_LEARNED = "learned"
MODE_STATIC_NORM = "static_norm"
MODE_DYNAMIC_NORM = "dynamic_norm"
MODE_WHF_STREAMING = "whf_streaming"
EVAL_MODES = (MODE_FULL, MODE_LEARNED, MODE_STATIC_NORM, MODE_DYNAMIC_NORM, MODE_WHF_STREAMING)

OUT_ROOT_ENV = "PRUNEKV_OUT"


@dataclass(frozen=True)
class ExperimentConfig:
    model: dict = field(default_factory=dict)  # ModelConfig overrides
    train: dict = field(default_factory=dict)  # TrainSpec overrides
    prune_ratio: float = 0.5
    align: int = 4
    migrate_every: int = 32
    seed: int = 0
    out_dir: str = "runs/default"
    # pretraining: a copying phase that induces content-based lookup, then
    # fine-tuning on the retrieval tasks themselves
    pretrain_repeat_steps: int = 5000
    pretrain_steps: int = 1500
    pretrain_lr: float = 1e-3
    pretrain_batch: int = 8
    repeat_len_range: tuple = (24, 96)
    pretrain_seq_lens: tuple = (48, 64, 96, 128)
    # evaluation
    eval_kind: str = tasks.DENSE_RETRIEVAL
    eval_seq_len: int = 256
    eval_samples: int = 200
    eval_seed: int = 10_000
    calib_samples: int = 12
    q_window: int = 16
    whf_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.prune_ratio < 1.0:
            raise ValueError(f"prune_ratio must be in [0, 1), got {self.prune_ratio}")
        object.__setattr__(self, "pretrain_seq_lens", tuple(self.pretrain_seq_lens))
        object.__setattr__(self, "repeat_len_range", tuple(self.repeat_len_range))
        if "seq_len_range" in self.train:
            train = {**self.train, "seq_len_range": tuple(self.train["seq_len_range"])}
            object.__setattr__(self, "train", train)

    @property
    def keep_ratio(self):
        return 1.0 - self.prune_ratio

    def model_config(self):
        return model_mod.ModelConfig(**self.model)

    def train_spec(self):
        return masking.TrainSpec(**self.train)

    def resolve_out(self):
        root = os.environ.get(OUT_ROOT_ENV, "")
        return os.path.join(root, self.out_dir) if root else self.out_dir

    def to_dict(self):
        d = asdict(self)
        d["pretrain_seq_lens"] = list(self.pretrain_seq_lens)
        d["repeat_len_range"] = list(self.repeat_len_range)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**dict(d))

    def hash(self):
        return storage.config_hash(self.to_dict())


def _task_spec(cfg, kind, seq_len, seed):
    return tasks.TaskSpec(kind=kind, seq_len=seq_len, seed=seed,
                          vocab_size=cfg.model_config().vocab_size)


def make_pretrain_stream(cfg):
    """Two-phase stream: copying batches first, then mixed retrieval tasks."""
    lens = list(cfg.pretrain_seq_lens)
    kinds = [tasks.DENSE_RETRIEVAL, tasks.DENSE_RETRIEVAL, tasks.MULTI_VALUE]
    counter = {"i": 0}

    def stream(rng):
        step = counter["i"]
        counter["i"] += 1
        if step < cfg.pretrain_repeat_steps:
            lo, hi = cfg.repeat_len_range
            seq_len = 2 * int(rng.integers(lo // 2, hi // 2 + 1))
            kind = tasks.COPY_REPEAT
        else:
            seq_len = lens[int(rng.integers(len(lens)))]
            kind = kinds[step % len(kinds)]
        return [tasks.generate(_task_spec(cfg, kind, seq_len, int(rng.integers(2 ** 31))))
                for _ in range(cfg.pretrain_batch)]

    return stream


def make_mask_stream(cfg):
    """task_stream(rng, seq_len) for the two mask-learning stages."""
    kinds = [tasks.DENSE_RETRIEVAL, tasks.MULTI_VALUE]
    spec = cfg.train_spec()
    counter = {"i": 0}

    def stream(rng, seq_len):
        kind = kinds[counter["i"] % len(kinds)]
        counter["i"] += 1
        return [tasks.generate(_task_spec(cfg, kind, seq_len, int(rng.integers(2 ** 31))))
                for _ in range(spec.batch)]

    return stream


def eval_samples(cfg, n=None, seed=None, kind=None):
    n = cfg.eval_samples if n is None else n
    seed = cfg.eval_seed if seed is None else seed
    kind = kind or cfg.eval_kind
    return [tasks.generate(_task_spec(cfg, kind, cfg.eval_seq_len, seed + i)) for i in range(n)]


def calib_samples(cfg):
    return eval_samples(cfg, n=cfg.calib_samples, seed=cfg.eval_seed + 500_000)


def cmd_pretrain(cfg, out_dir=None):
    """Pretrain the toy model; writes checkpoint + a seed/loss log."""
    out = out_dir or cfg.resolve_out()
    os.makedirs(out, exist_ok=True)
    toy = model_mod.ToyTransformer.create(cfg.model_config(), seed=cfg.seed)
    curves = []
    total_steps = cfg.pretrain_repeat_steps + cfg.pretrain_steps
    toy, losses = model_mod.pretrain(toy, make_pretrain_stream(cfg), total_steps,
                                     cfg.pretrain_lr, seed=cfg.seed,
                                     log=lambda s, l: curves.append((s, l)))
    ckpt = os.path.join(out, "model.pkv")
    storage.save_checkpoint(ckpt, toy)
    probe = eval_samples(cfg, n=16, seed=cfg.eval_seed + 900_000)
    final_eval_loss = probe_loss(toy, probe)
    storage.save_json(os.path.join(out, "pretrain.json"), {
        "config_hash": cfg.hash(), "seed": cfg.seed, "steps": total_steps,
        "final_train_loss": losses[-1] if losses else None,
        "probe_seed": cfg.eval_seed + 900_000, "probe_n": 16,
        "final_eval_loss": final_eval_loss,
    })
    storage.save_csv(os.path.join(out, "pretrain_curve.csv"), ["step", "loss"], curves)
    return ckpt


def probe_loss(toy, samples):
    """Mean answer-token cross-entropy on a fixed probe set."""
    import prunekv.autodiff as ad
    total = 0.0
    for s in samples:
        rec = model_mod.forward_full(toy, s.tokens, len(s.ans_tokens))
        n_ctx = len(s.ctx_tokens)
        rows = rec.logits[n_ctx - 1:len(s.tokens) - 1, :]
        total += float(ad.cross_entropy(rows, s.ans_tokens).data)
    return total / len(samples)


def cmd_learn_mask(cfg, checkpoint, out_dir=None, alpha_in=None):
    """Run both training stages; persists alpha, beta, and loss curves."""
    out = out_dir or cfg.resolve_out()
    os.makedirs(out, exist_ok=True)
    toy = storage.load_checkpoint(checkpoint)
    spec = cfg.train_spec()
    stream = make_mask_stream(cfg)
    curves = []
    if alpha_in is not None:
        alpha, _ = storage.load_alpha(alpha_in, toy.config)
        spec = replace(spec, steps_stage1=0)
        losses1 = []
    else:
        alpha, losses1 = masking.stage1_train(toy, stream, spec)
    curves += [("stage1", i, l) for i, l in enumerate(losses1)]
    beta, alpha2, losses2 = masking.stage2_train(toy, stream, alpha, cfg.keep_ratio,
                                                 cfg.align, spec)
    curves += [("stage2", i, l) for i, l in enumerate(losses2)]
    alpha_path = os.path.join(out, "alpha.pkv")
    beta_path = os.path.join(out, "beta.pkv")
    storage.save_alpha(alpha_path, alpha2, toy.config,
                       extra={"stage1_alpha": False, "config_hash": cfg.hash()})
    storage.save_beta(beta_path, beta, toy.config)
    storage.save_csv(os.path.join(out, "mask_curves.csv"), ["stage", "step", "loss"], curves)
    return alpha_path, beta_path


QUESTION_LEN = 2  # the [SEP, probe-key] suffix decoded through the cache


def _decode_accuracy(toy, sample, beta, cfg, spec, forced_streaming=()):
    # cache the body first, then decode the probe so the answer is produced
    # through the pruned cache rather than from full-attention prefill logits
    body = sample.ctx_tokens[:-QUESTION_LEN]
    question = sample.ctx_tokens[-QUESTION_LEN:]
    pred, _, _ = cache.greedy_decode(toy, body, len(sample.ans_tokens), beta,
                                     spec.sink, spec.window, cfg.migrate_every,
                                     forced_streaming=forced_streaming,
                                     question=question)
    return tasks.score(pred, sample)


def evaluate_mode(cfg, toy, mode, samples, beta=None):
    """Greedy-decode accuracy of one cache policy over a sample list."""
    c = toy.config
    spec = cfg.train_spec()
    forced = ()
    per_sample_mask = None
    if mode == MODE_FULL:
        beta = masking.BinaryChannelMask.all_ones(c.factor_shape)
    elif mode == MODE_LEARNED:
        if beta is None:
            raise ValueError("learned mode needs a mask")
    elif mode == MODE_STATIC_NORM:
        beta = analysis.static_norm_mask(toy, calib_samples(cfg), cfg.keep_ratio, cfg.align)
    elif mode == MODE_DYNAMIC_NORM:
        def per_sample_mask(s):
            # score on the context only; the answer is never visible
            ctx_only = tasks.TaskSample(ctx_tokens=s.ctx_tokens,
                                        ans_tokens=np.empty(0, dtype=np.int64),
                                        query_key=s.query_key)
            return analysis.dynamic_norm_mask(toy, ctx_only, cfg.keep_ratio, cfg.q_window)
        beta = None
    elif mode == MODE_WHF_STREAMING:
        profile = analysis.high_freq_ratio(toy, calib_samples(cfg)[0])
        forced = tuple(analysis.convert_streaming_by_whf(profile, cfg.whf_fraction, "highest"))
        beta = masking.BinaryChannelMask.all_ones(c.factor_shape)
    else:
        raise ValueError(f"unknown eval mode {mode!r}")
    scores = []
    for s in samples:
        b = per_sample_mask(s) if per_sample_mask else beta
        scores.append(_decode_accuracy(toy, s, b, cfg, spec, forced))
    return float(np.mean(scores)), beta


def cmd_eval(cfg, checkpoint, mode, mask_path=None, out_dir=None, samples=None):
    """Evaluate one cache policy and write a RunReport."""
    out = out_dir or cfg.resolve_out()
    os.makedirs(out, exist_ok=True)
    toy = storage.load_checkpoint(checkpoint)
    beta = storage.load_beta(mask_path, toy.config)[0] if mask_path else None
    if samples is None:
        samples = eval_samples(cfg)
    accuracy, eff_beta = evaluate_mode(cfg, toy, mode, samples, beta)
    spec = cfg.train_spec()
    report = {"mode": mode, "accuracy": accuracy, "n_samples": len(samples),
              "config_hash": cfg.hash(), "eval_kind": cfg.eval_kind,
              "eval_seq_len": cfg.eval_seq_len}
    if eff_beta is not None:
        stats = masking.mask_stats(eff_beta)
        mem = cache.memory_report(eff_beta, toy.config, cfg.eval_seq_len,
                                  spec.sink, spec.window)
        report["mask"] = {"keep_fraction": stats.keep_fraction,
                          "streaming_heads": stats.streaming_heads,
                          "kept_counts": stats.kept_counts.tolist()}
        report["memory"] = mem.as_dict()
    path = os.path.join(out, f"report_{mode}.json")
    storage.save_json(path, report)
    return report


def cmd_memory_report(cfg, mask_path, seq_len, bytes_per_element=2):
    beta, meta = storage.load_beta(mask_path)
    c = model_mod.ModelConfig(n_layers=meta["n_layers"], n_kv_heads=meta["n_kv_heads"],
                              n_q_heads=meta["n_kv_heads"], head_dim=meta["head_dim"])
    spec = cfg.train_spec()
    return cache.memory_report(beta, c, seq_len, spec.sink, spec.window, bytes_per_element)
