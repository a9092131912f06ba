"""Bit-exact integer ViT forward pass.

All activations are integers on per-site grids; non-linearities go through
lookup tables; requantization between matmuls is either a 64-entry identity
table or an exact fixed-point multiply.  Residual streams carry two extra
bits of headroom over the matmul activation width.

The matching float model lives in `reference`; it is the oracle, not a
runtime dependency of this module.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .kernels import ACC_LIMIT, ConvTileSpec, TiledMatmulSpec, tiled_conv2d, tiled_matmul_os
from .luts import LutTable, SegmentedLutTable
from .quant import (FixedPointScale, QuantTensor, pot_round_up, qrange, requant,
                    shift_round_half_even)

LN_EPS = 1e-5


def div_round_half_even(x, d: int):
    """Exact round-half-even of x / d for integer x (scalar or array), d > 0."""
    q = x // d
    r = x - q * d
    two_r = 2 * r
    if isinstance(x, np.ndarray):
        up = (two_r > d) | ((two_r == d) & (q & 1 == 1))
        return q + up.astype(q.dtype)
    return q + (1 if (two_r > d or (two_r == d and q & 1)) else 0)


def shift_signed_round(x, k: int):
    """x * 2**-k with round-half-even; negative k is an exact left shift."""
    if k >= 0:
        return shift_round_half_even(x, k)
    return x << (-k)


def fxp_round(x, fx: FixedPointScale):
    """round_half_even(x * fx) without clamping (residual rescale step)."""
    return shift_round_half_even(x * fx.mantissa, fx.shift)


@dataclass
class OpCounter:
    """Counts operations with the MAC = 2 ops convention."""

    macs: int = 0
    elementwise: int = 0

    def add_matmul(self, t: int, ci: int, co: int):
        self.macs += t * ci * co

    def add_conv(self, co: int, ho: int, wo: int, ci: int, kh: int, kw: int):
        self.macs += co * ho * wo * ci * kh * kw

    def add_elementwise(self, n: int, passes: int = 1):
        self.elementwise += n * passes

    @property
    def total(self) -> int:
        return 2 * self.macs + self.elementwise


def layernorm_int(x: QuantTensor, rsqrt_table: LutTable, out_bits: int,
                  out_shift: int, counter: OpCounter | None = None) -> QuantTensor:
    """Three-pass integer LayerNorm.

    Pass 1 computes the token mean, pass 2 the variance (E[x^2] - E[x]^2,
    64-bit intermediates), pass 3 applies (x - mean) * rsqrt(var) via table
    lookup and a power-of-two output shift.  Output scale is
    x.scale * table.out_scale * 2**out_shift, exactly.
    """
    data = x.data
    t, ci = data.shape
    mean = div_round_half_even(data.sum(axis=1), ci)
    sq = div_round_half_even((data * data).sum(axis=1), ci)
    var = np.maximum(sq - mean * mean, 0)
    r = rsqrt_table.lookup(var)                       # one value per token
    centered = data - mean[:, None]
    out = shift_signed_round(centered * r[:, None], out_shift)
    qmin, qmax = qrange(out_bits)
    out = np.clip(out, qmin, qmax)
    if counter is not None:
        counter.add_elementwise(t * ci, passes=3)
    scale = x.scale * rsqrt_table.out_scale * 2.0 ** out_shift
    return QuantTensor(out, out_bits, scale)


@dataclass
class SoftmaxIntResult:
    probs: QuantTensor          # requantized attention weights
    raw: np.ndarray             # exp * recip products before requant
    raw_scale: float            # real value of one raw unit


def softmax_int(scores: QuantTensor, exp_table: LutTable,
                recip_table: SegmentedLutTable, out_bits: int,
                counter: OpCounter | None = None) -> SoftmaxIntResult:
    """Three-pass integer softmax over the last axis.

    Pass 1 max-reduces; pass 2 looks up exp of (x - max) in the inverted
    table and accumulates the denominator; pass 3 looks up the reciprocal in
    the segmented table and multiplies through.  The row maximum lands on
    index 0 of the inverted table by construction.
    """
    data = scores.data
    m = data.max(axis=-1, keepdims=True)
    diff = data - m                                      # <= 0
    e = exp_table.lookup(diff)
    denom = e.sum(axis=-1, keepdims=True)                # >= one exp(0) entry
    low = recip_table.low
    high = recip_table.high
    # align both segments on the finer quantum; the ratio of the two
    # power-of-two scales is an exact shift
    k = pot_round_up(low.out_scale / high.out_scale)
    use_high = denom > recip_table.pivot
    if k >= 0:
        r = np.where(use_high, high.lookup(denom), low.lookup(denom) << k)
        raw_scale = exp_table.out_scale * high.out_scale
    else:
        r = np.where(use_high, high.lookup(denom) << (-k), low.lookup(denom))
        raw_scale = exp_table.out_scale * low.out_scale
    raw = e * r
    qmin, qmax = qrange(out_bits)
    s_p = 1.0 / qmax
    fx = FixedPointScale.from_real(raw_scale / s_p)
    probs = requant(raw, 0, fx, out_bits)
    if counter is not None:
        counter.add_elementwise(data.size, passes=3)
    return SoftmaxIntResult(QuantTensor(probs, out_bits, s_p), raw, raw_scale)


@dataclass
class IntBlockParams:
    """Frozen integer constants and tables of one MHA + MLP block pair."""

    wq: np.ndarray              # (heads, head_dim, CI)
    wk: np.ndarray
    wv: np.ndarray
    bq: np.ndarray
    bk: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    rsqrt1: LutTable
    ln1_shift: int
    rq_q: LutTable
    rq_k: LutTable
    rq_v: LutTable
    rq_score: LutTable
    exp: LutTable
    recip: SegmentedLutTable
    rq_attn: LutTable
    rq_proj: LutTable
    r1: FixedPointScale
    rsqrt2: LutTable
    ln2_shift: int
    gelu: LutTable
    rq_mm2: LutTable
    r2: FixedPointScale
    s_ln1: float = 0.0
    s_ln2: float = 0.0
    weight_scales: dict = field(default_factory=dict)


@dataclass
class IntViT:
    cfg: ModelConfig
    s_img: float
    patch_w: np.ndarray
    patch_b: np.ndarray
    rq_patch: LutTable
    blocks: list[IntBlockParams]
    head_w: np.ndarray
    head_b: np.ndarray
    s_head_w: float
    s_patch_w: float = 0.0

    def _matmul(self, x: np.ndarray, w: np.ndarray, bias, table: LutTable,
                counter: OpCounter | None, spec: TiledMatmulSpec | None = None) -> np.ndarray:
        if spec is not None:
            y = tiled_matmul_os(x, w, spec, bias=bias, post=table.lookup)
        else:
            acc = x @ w.T
            if bias is not None:
                acc = acc + bias
            if np.abs(acc).max(initial=0) >= ACC_LIMIT:
                raise OverflowError("accumulator exceeded 32-bit budget")
            y = table.lookup(acc)
        if counter is not None:
            counter.add_matmul(x.shape[0], x.shape[1], w.shape[0])
        return y

    def mha_block(self, x: QuantTensor, p: IntBlockParams,
                  counter: OpCounter | None = None, use_tiled: bool = False) -> QuantTensor:
        cfg = self.cfg
        ln = layernorm_int(x, p.rsqrt1, cfg.act_bits, p.ln1_shift, counter)
        spec = None
        if use_tiled:
            spec = TiledMatmulSpec(cfg.t, cfg.ci, cfg.head_dim,
                                   weight_source="static")
        heads = []
        for h in range(cfg.heads):
            q = self._matmul(ln.data, p.wq[h], p.bq[h], p.rq_q, counter, spec)
            k = self._matmul(ln.data, p.wk[h], p.bk[h], p.rq_k, counter, spec)
            v = self._matmul(ln.data, p.wv[h], p.bv[h], p.rq_v, counter, spec)
            dyn = TiledMatmulSpec(cfg.t, cfg.head_dim, cfg.t,
                                  weight_source="dynamic") if use_tiled else None
            scores = self._matmul(q, k, None, p.rq_score, counter, dyn)
            s_sc = p.rq_score.out_scale
            sm = softmax_int(QuantTensor(scores, cfg.score_bits, s_sc),
                             p.exp, p.recip, cfg.act_bits, counter)
            # probs @ v needs V row-wise: hand the matmul the transposed
            # tensor, which is what the transpose buffer provides on-chip
            dyn2 = TiledMatmulSpec(cfg.t, cfg.t, cfg.head_dim,
                                   weight_source="dynamic") if use_tiled else None
            a = self._matmul(sm.probs.data, v.T, None, p.rq_attn, counter, dyn2)
            heads.append(a)
        cat = np.concatenate(heads, axis=1)
        pspec = TiledMatmulSpec(cfg.t, cfg.ci, cfg.ci) if use_tiled else None
        proj = self._matmul(cat, p.wo, p.bo, p.rq_proj, counter, pspec)
        res = fxp_round(x.data, p.r1)
        qmin, qmax = qrange(cfg.resid_bits)
        out = np.clip(proj + res, qmin, qmax)
        if counter is not None:
            counter.add_elementwise(out.size)
        return QuantTensor(out, cfg.resid_bits, p.rq_proj.out_scale)

    def mlp_block(self, x: QuantTensor, p: IntBlockParams,
                  counter: OpCounter | None = None, use_tiled: bool = False) -> QuantTensor:
        cfg = self.cfg
        ln = layernorm_int(x, p.rsqrt2, cfg.act_bits, p.ln2_shift, counter)
        spec1 = TiledMatmulSpec(cfg.t, cfg.ci, cfg.mlp_hidden) if use_tiled else None
        hidden = self._matmul(ln.data, p.w1, p.b1, p.gelu, counter, spec1)
        if counter is not None:
            counter.add_elementwise(hidden.size)       # fused gelu lookup
        spec2 = TiledMatmulSpec(cfg.t, cfg.mlp_hidden, cfg.ci) if use_tiled else None
        mm2 = self._matmul(hidden, p.w2, p.b2, p.rq_mm2, counter, spec2)
        res = fxp_round(x.data, p.r2)
        qmin, qmax = qrange(cfg.resid_bits)
        out = np.clip(mm2 + res, qmin, qmax)
        if counter is not None:
            counter.add_elementwise(out.size)
        return QuantTensor(out, cfg.resid_bits, p.rq_mm2.out_scale)

    def patch_embed(self, img: QuantTensor, counter: OpCounter | None = None,
                    use_tiled: bool = False) -> QuantTensor:
        cfg = self.cfg
        stride = (cfg.patch, cfg.patch)
        spec = ConvTileSpec(cop=cfg.ci, cip=cfg.img_channels)
        y = tiled_conv2d(img.data, self.patch_w, stride, spec,
                         bias=self.patch_b, post=self.rq_patch.lookup)
        co, ho, wo = y.shape
        if counter is not None:
            counter.add_conv(co, ho, wo, img.data.shape[0], cfg.patch, cfg.patch)
        tokens = y.reshape(co, ho * wo).T               # (T, CI)
        return QuantTensor(tokens, cfg.resid_bits, self.rq_patch.out_scale)

    def forward(self, img: np.ndarray | QuantTensor,
                counter: OpCounter | None = None,
                use_tiled: bool = False) -> np.ndarray:
        """Integer forward pass to float logits.  Deterministic."""
        cfg = self.cfg
        if not isinstance(img, QuantTensor):
            img = QuantTensor.quantize(img, 8, self.s_img)
        x = self.patch_embed(img, counter, use_tiled)
        for p in self.blocks:
            x = self.mha_block(x, p, counter, use_tiled)
            x = self.mlp_block(x, p, counter, use_tiled)
        pooled = div_round_half_even(x.data.sum(axis=0), cfg.t)
        acc = self.head_w @ pooled
        if counter is not None:
            counter.add_elementwise(x.data.size)        # pooling pass
            counter.add_matmul(1, cfg.ci, cfg.classes)
        logits = acc * (x.scale * self.s_head_w) + self.head_b
        return logits
