"""Float reference model: the correctness oracle for the integer pipeline.

Structurally identical to the integer model (pre-norm blocks, mean-pool
head, no final norm) but computed in float64.  A `record` dict can be passed
to capture intermediate activations for range calibration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from .config import ModelConfig

LN_EPS = 1e-5


def gelu_f(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


def layernorm_f(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gamma + beta


def softmax_f(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class FloatBlockParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    wq: np.ndarray          # (heads, head_dim, CI)
    wk: np.ndarray
    wv: np.ndarray
    bq: np.ndarray          # (heads, head_dim)
    bk: np.ndarray
    bv: np.ndarray
    wo: np.ndarray          # (CI, CI)
    bo: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    w1: np.ndarray          # (mlp_hidden, CI)
    b1: np.ndarray
    w2: np.ndarray          # (CI, mlp_hidden)
    b2: np.ndarray


@dataclass
class FloatViT:
    cfg: ModelConfig
    patch_w: np.ndarray     # (CI, img_channels, patch, patch)
    patch_b: np.ndarray
    blocks: list[FloatBlockParams]
    head_w: np.ndarray      # (classes, CI)
    head_b: np.ndarray

    def patch_embed(self, img: np.ndarray) -> np.ndarray:
        c, h, w = img.shape
        p = self.cfg.patch
        tokens = []
        for i in range(0, h - p + 1, p):
            for j in range(0, w - p + 1, p):
                patch = img[:, i:i + p, j:j + p].reshape(-1)
                tokens.append(self.patch_w.reshape(self.cfg.ci, -1) @ patch)
        return np.stack(tokens) + self.patch_b

    def attention(self, x: np.ndarray, p: FloatBlockParams, record=None, tag="") -> np.ndarray:
        heads = []
        scale = 1.0 / np.sqrt(self.cfg.head_dim)
        for h in range(self.cfg.heads):
            q = x @ p.wq[h].T + p.bq[h]
            k = x @ p.wk[h].T + p.bk[h]
            v = x @ p.wv[h].T + p.bv[h]
            scores = (q @ k.T) * scale
            probs = softmax_f(scores)
            heads.append(probs @ v)
            if record is not None:
                record.setdefault(tag + ".q", []).append(q)
                record.setdefault(tag + ".k", []).append(k)
                record.setdefault(tag + ".v", []).append(v)
                record.setdefault(tag + ".scores", []).append(scores)
                record.setdefault(tag + ".attn", []).append(probs @ v)
        out = np.concatenate(heads, axis=-1) @ p.wo.T + p.bo
        if record is not None:
            record.setdefault(tag + ".proj", []).append(out)
        return out

    def forward(self, img: np.ndarray, record=None) -> np.ndarray:
        x = self.patch_embed(img)
        if record is not None:
            record.setdefault("patch", []).append(x)
        for b, p in enumerate(self.blocks):
            tag = f"block{b}"
            if record is not None:
                record.setdefault(tag + ".in", []).append(x)
                record.setdefault(tag + ".var1", []).append(x.var(axis=-1))
            ln1 = layernorm_f(x, p.ln1_gamma, p.ln1_beta)
            if record is not None:
                record.setdefault(tag + ".ln1", []).append(ln1)
            x = x + self.attention(ln1, p, record, tag)
            ln2 = layernorm_f(x, p.ln2_gamma, p.ln2_beta)
            hidden = gelu_f(ln2 @ p.w1.T + p.b1)
            if record is not None:
                record.setdefault(tag + ".in2", []).append(x)
                record.setdefault(tag + ".var2", []).append(x.var(axis=-1))
                record.setdefault(tag + ".ln2", []).append(ln2)
                record.setdefault(tag + ".mm1", []).append(ln2 @ p.w1.T + p.b1)
                record.setdefault(tag + ".gelu", []).append(hidden)
            x = x + hidden @ p.w2.T + p.b2
            if record is not None:
                record.setdefault(tag + ".mm2", []).append(hidden @ p.w2.T + p.b2)
                record.setdefault(tag + ".out", []).append(x)
        pooled = x.mean(axis=0)
        if record is not None:
            record.setdefault("pooled", []).append(pooled)
        return self.head_w @ pooled + self.head_b


def random_float_model(cfg: ModelConfig, seed: int = 0) -> FloatViT:
    """Random weights at transformer-typical magnitudes (1/sqrt(fan_in))."""
    rng = np.random.default_rng(seed)

    def w(*shape):
        fan_in = shape[-1] if len(shape) == 2 else int(np.prod(shape[1:]))
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    def bias(n):
        return rng.normal(0.0, 0.02, size=n)

    blocks = []
    for _ in range(cfg.blocks):
        blocks.append(FloatBlockParams(
            ln1_gamma=np.ones(cfg.ci), ln1_beta=np.zeros(cfg.ci),
            wq=w(cfg.heads, cfg.head_dim, cfg.ci),
            wk=w(cfg.heads, cfg.head_dim, cfg.ci),
            wv=w(cfg.heads, cfg.head_dim, cfg.ci),
            bq=bias((cfg.heads, cfg.head_dim)),
            bk=bias((cfg.heads, cfg.head_dim)),
            bv=bias((cfg.heads, cfg.head_dim)),
            wo=w(cfg.ci, cfg.ci), bo=bias(cfg.ci),
            ln2_gamma=np.ones(cfg.ci), ln2_beta=np.zeros(cfg.ci),
            w1=w(cfg.mlp_hidden, cfg.ci), b1=bias(cfg.mlp_hidden),
            w2=w(cfg.ci, cfg.mlp_hidden), b2=bias(cfg.ci),
        ))
    return FloatViT(
        cfg,
        patch_w=w(cfg.ci, cfg.img_channels, cfg.patch, cfg.patch),
        patch_b=bias(cfg.ci),
        blocks=blocks,
        head_w=w(cfg.classes, cfg.ci),
        head_b=bias(cfg.classes),
    )
