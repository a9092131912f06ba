"""Tiled integer matmul and convolution kernels.

The matmul walks tiles in token -> output-channel -> input-channel order and
keeps the partial sums of one output tile resident until its input-channel
trips finish (output-stationary schedule).  Integer addition is associative,
so results are bit-identical to a flat triple loop for every legal tiling;
the tests pin that down against naive oracles.

Accumulators are 64-bit internally and asserted to stay inside the 32-bit
budget a MAC array would provide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ACC_LIMIT = 1 << 31


class ShapeError(ValueError):
    pass


def _check_div(total: int, par: int, label: str) -> int:
    if par <= 0 or total % par:
        raise ShapeError(f"{label}: {total} not divisible by parallelism {par}")
    return total // par


@dataclass(frozen=True)
class TiledMatmulSpec:
    """Tiling of y[T, CO] = x[T, CI] @ w[CO, CI].T.

    tp/cip/cop are the per-trip parallel sizes; trip counts follow from the
    tensor shape.  weights are 'static' (frozen on chip) or 'dynamic'
    (streamed from the previous stage).
    """

    t: int
    ci: int
    co: int | None
    tp: int = 1
    cip: int = 1
    cop: int = 1
    weight_source: str = "static"

    def __post_init__(self):
        _check_div(self.t, self.tp, "T")
        _check_div(self.ci, self.cip, "CI")
        if self.co is not None:
            _check_div(self.co, self.cop, "CO")
        if self.weight_source not in ("static", "dynamic"):
            raise ValueError(f"bad weight_source {self.weight_source!r}")

    @property
    def tt(self) -> int:
        return self.t // self.tp

    @property
    def cit(self) -> int:
        return self.ci // self.cip

    @property
    def cot(self) -> int:
        return 1 if self.co is None else self.co // self.cop


def tiled_matmul_os(x: np.ndarray, w: np.ndarray, spec: TiledMatmulSpec,
                    bias: np.ndarray | None = None, post=None,
                    check_overflow: bool = True) -> np.ndarray:
    """Output-stationary tiled y = x @ w.T (+ bias), post hook per output tile.

    post receives the int64 accumulator tile (tp, cop) and returns the
    integer output tile; identity when None.
    """
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    t, ci = x.shape
    co, ci_w = w.shape
    if ci != ci_w or t != spec.t or ci != spec.ci or co != (spec.co or co):
        raise ShapeError(f"shape mismatch: x{x.shape} w{w.shape} vs spec {spec}")
    y = np.empty((t, co), dtype=np.int64)
    tp, cip, cop = spec.tp, spec.cip, spec.cop
    for tt in range(spec.tt):
        t0 = tt * tp
        for cot in range(spec.cot):
            c0 = cot * cop
            acc = np.zeros((tp, cop), dtype=np.int64)
            for cit in range(spec.cit):
                k0 = cit * cip
                acc += x[t0:t0 + tp, k0:k0 + cip] @ w[c0:c0 + cop, k0:k0 + cip].T
            if bias is not None:
                acc += bias[c0:c0 + cop]
            if check_overflow and np.abs(acc).max(initial=0) >= ACC_LIMIT:
                raise OverflowError(f"accumulator exceeded 32-bit budget at tile ({tt},{cot})")
            y[t0:t0 + tp, c0:c0 + cop] = post(acc) if post is not None else acc
    return y


@dataclass(frozen=True)
class ConvTileSpec:
    """Tiling of a strided convolution y[CO, HO, WO] from x[CI, H, W].

    hop/wop/cop/cip are the unrolled (parallel) extents; the surrounding tile
    loops walk output-spatial tiles, then output-channel trips, then
    input-channel trips, initializing the output tile on the first
    input-channel trip and flushing it after the last.
    """

    hop: int = 1
    wop: int = 1
    cop: int = 1
    cip: int = 1


def tiled_conv2d(x: np.ndarray, w: np.ndarray, stride: tuple[int, int],
                 spec: ConvTileSpec = ConvTileSpec(),
                 bias: np.ndarray | None = None, post=None,
                 check_overflow: bool = True) -> np.ndarray:
    """Strided conv in tile/unroll order: spatial tiles, CO trips, CI trips."""
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    ci, h, wd = x.shape
    co, ci_w, kh, kw = w.shape
    hs, ws = stride
    if ci != ci_w:
        raise ShapeError(f"channel mismatch x{x.shape} w{w.shape}")
    if (h - kh) % hs or (wd - kw) % ws:
        raise ShapeError("input extent does not tile with kernel and stride")
    ho = (h - kh) // hs + 1
    wo = (wd - kw) // ws + 1
    hot = _check_div(ho, spec.hop, "HO")
    wot = _check_div(wo, spec.wop, "WO")
    cot = _check_div(co, spec.cop, "CO")
    cit = _check_div(ci, spec.cip, "CI")
    y = np.empty((co, ho, wo), dtype=np.int64)
    for hit in range(hot):
        for wit in range(wot):
            h0 = hit * spec.hop
            w0 = wit * spec.wop
            for ct in range(cot):
                c0 = ct * spec.cop
                acc = None
                for kt in range(cit):
                    k0 = kt * spec.cip
                    if kt == 0:
                        acc = np.zeros((spec.cop, spec.hop, spec.wop), dtype=np.int64)
                    # gather the receptive field of this output tile
                    rows = (h0 + np.arange(spec.hop)[:, None] ) * hs + np.arange(kh)[None, :]
                    cols = (w0 + np.arange(spec.wop)[:, None]) * ws + np.arange(kw)[None, :]
                    patch = x[k0:k0 + spec.cip][:, rows][:, :, :, cols]
                    # patch: (cip, hop, kh, wop, kw); weights: (cop, cip, kh, kw)
                    acc += np.einsum("ihkwl,oikl->ohw", patch,
                                     w[c0:c0 + spec.cop, k0:k0 + spec.cip])
                if bias is not None:
                    acc = acc + bias[c0:c0 + spec.cop, None, None]
                if check_overflow and np.abs(acc).max(initial=0) >= ACC_LIMIT:
                    raise OverflowError(f"accumulator exceeded 32-bit budget at tile ({hit},{wit},{ct})")
                y[c0:c0 + spec.cop, h0:h0 + spec.hop, w0:w0 + spec.wop] = \
                    post(acc) if post is not None else acc
    return y
