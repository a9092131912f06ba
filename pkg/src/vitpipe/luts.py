"""Lookup-table non-linear operators.

A table covers an integer input domain [alpha, beta].  Indexing avoids the
multiply of the classic rescale by shifting with a power-of-two estimate of
the bin width; the shift amount is the ceiling of log2 so an in-domain input
can never overflow the address space (it can leave the top bins unused).

Two addressing modes exist:
  forward    index = (data - alpha) >> s_pot          (alpha anchored to 0)
  inverted   index = (beta - data) >> s_pot           (beta anchored to 0)

Inverted mode keeps the domain's most sensitive point (the maximum, e.g.
exp(0) after max-subtraction) exact: index 0 is sampled at beta itself.
Forward tables sample each bin at its center.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .quant import pot_round_up, qrange, round_half_even


def out_range(bits: int, signed: bool) -> tuple[int, int]:
    if signed:
        return qrange(bits)
    return 0, (1 << bits) - 1


def index_reference(data, alpha: float, beta: float, n: int):
    """Exact (multiplier-based) index: round((data-alpha)*(2^n-1)/(beta-alpha))."""
    if beta <= alpha:
        raise ValueError("beta must exceed alpha")
    top = (1 << n) - 1
    idx = np.rint((np.asarray(data, dtype=np.float64) - alpha) * top / (beta - alpha))
    return np.clip(idx, 0, top).astype(np.int64)


def _shift(values, s_pot: int):
    if s_pot >= 0:
        return values >> s_pot
    return values << (-s_pot)


def index_pot(data, alpha: int, s_pot: int):
    """Shift-based index, zero point at alpha.  Pre: data >= alpha."""
    return _shift(np.asarray(data, dtype=np.int64) - alpha, s_pot)


def index_pot_inverted(data, beta: int, s_pot: int):
    """Shift-based index, zero point at beta.  Pre: data <= beta."""
    return _shift(beta - np.asarray(data, dtype=np.int64), s_pot)


def table_shift(alpha: int, beta: int, n: int) -> int:
    """Bin-width exponent: ceil(log2((beta - alpha) / (2^n - 1)))."""
    if beta < alpha:
        raise ValueError("beta must be >= alpha")
    if beta == alpha:
        return 0
    return pot_round_up((beta - alpha) / ((1 << n) - 1))


@dataclass
class LutTable:
    """Sampled function over an integer input domain."""

    entries: np.ndarray
    n: int
    alpha: int
    beta: int
    s_pot: int
    inverted: bool
    out_bits: int
    out_signed: bool
    out_scale: float
    in_scale: float = 1.0
    name: str = ""

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.int64)
        if len(self.entries) != 1 << self.n:
            raise ValueError(f"need {1 << self.n} entries, got {len(self.entries)}")
        lo, hi = out_range(self.out_bits, self.out_signed)
        if self.entries.min() < lo or self.entries.max() > hi:
            raise ValueError("entries outside output bit-width range")

    def index_of(self, data):
        data = np.clip(np.asarray(data, dtype=np.int64), self.alpha, self.beta)
        if self.inverted:
            return index_pot_inverted(data, self.beta, self.s_pot)
        return index_pot(data, self.alpha, self.s_pot)

    def lookup(self, data):
        """Total lookup: out-of-domain inputs clamp to the boundary bins."""
        return self.entries[self.index_of(data)]

    def dequant_lookup(self, data):
        return self.lookup(data) * self.out_scale


def lookup(table: LutTable, data):
    return table.lookup(data)


def pot_out_scale(max_abs: float, out_bits: int, out_signed: bool) -> float:
    """Power-of-two output scale covering max_abs with the available codes."""
    _, hi = out_range(out_bits, out_signed)
    if max_abs <= 0:
        return 1.0
    return 2.0 ** pot_round_up(max_abs / hi)


def build_table(f: Callable[[float], float], alpha: int, beta: int, n: int,
                out_bits: int, out_scale: float | None = None, *,
                inverted: bool = False, in_scale: float = 1.0,
                out_signed: bool = True, name: str = "") -> LutTable:
    """Sample clamp(round(f(x * in_scale) / out_scale)) per address bin.

    out_scale=None picks a power-of-two scale from the sampled maximum, so
    downstream rescaling stays a pure shift.
    """
    if beta < alpha:
        raise ValueError("beta must be >= alpha")
    s = table_shift(alpha, beta, n)
    width = 2.0 ** s
    size = 1 << n
    reps = np.empty(size, dtype=np.float64)
    for i in range(size):
        if inverted:
            rep = beta - i * width          # anchor-side edge; bin 0 hits beta
        else:
            rep = alpha + (i + 0.5) * width  # bin center
        reps[i] = min(max(rep, alpha), beta)
    samples = np.array([f(r * in_scale) for r in reps], dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise ValueError(f"non-finite sample in table {name or f!r}")
    if out_scale is None:
        out_scale = pot_out_scale(float(np.abs(samples).max()), out_bits, out_signed)
    lo, hi = out_range(out_bits, out_signed)
    entries = np.clip(np.array([round_half_even(v / out_scale) for v in samples]), lo, hi)
    return LutTable(entries, n, alpha, beta, s, inverted, out_bits, out_signed,
                    out_scale, in_scale, name)


def gelu(x: float) -> float:
    """Exact GeLU: x/2 * (1 + erf(x / sqrt(2)))."""
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def fuse_gelu_requant(in_scale: float, out_scale: float, out_bits: int,
                      alpha: int, beta: int, n: int, name: str = "gelu") -> LutTable:
    """One table for GeLU followed by requantization to the next grid.

    The entry for accumulator value a is clamp(round(GeLU(a*in_scale)/out_scale)),
    i.e. the combined transfer curve sampled once.
    """
    return build_table(gelu, alpha, beta, n, out_bits, out_scale,
                       in_scale=in_scale, out_signed=True, name=name)


def count_repeated(table: LutTable) -> int:
    """Redundant clamp-plateau bins: duplicates of the first and last entry."""
    e = table.entries
    lead, trail = _plateau_lengths(e)
    if lead >= len(e):                 # constant table
        return len(e) - 1
    return (lead - 1) + (trail - 1)


def _plateau_lengths(entries: np.ndarray) -> tuple[int, int]:
    lead = 1
    while lead < len(entries) and entries[lead] == entries[0]:
        lead += 1
    trail = 1
    while trail < len(entries) and entries[-1 - trail] == entries[-1]:
        trail += 1
    return lead, trail


def _active_span(entries: np.ndarray) -> tuple[int, int] | None:
    """First and last non-repeated index.

    An index is repeated when its entry duplicates the clamp value at its
    end of the table; a single occurrence is not a plateau.  Returns None
    for a constant table.
    """
    size = len(entries)
    lead, trail = _plateau_lengths(entries)
    if lead >= size:
        return None
    lo = lead if lead >= 2 else 0
    hi = size - 1 - trail if trail >= 2 else size - 1
    if lo > hi:
        return None
    return lo, hi


def joint_range_calibration(samples, build: Callable[[int, int], LutTable],
                            max_iters: int = 16) -> tuple[int, int, LutTable]:
    """Shrink [alpha, beta] until the clamp plateaus stop wasting bins.

    Each round builds a table on the current range, finds the first and last
    indices whose entries differ from the end plateaus, and narrows the range
    to the inputs mapping onto that span.  A trim is kept only while it
    strictly reduces the repeated-entry count; ordinary quantization steps
    (short runs of equal codes on a fine table) would otherwise keep eating
    real range one step per round.  Stops when the range moves by less than
    one bin, when redundancy stops dropping, or after max_iters.
    """
    samples = np.asarray(samples, dtype=np.int64)
    if samples.size == 0:
        raise ValueError("samples must be non-empty")
    if max_iters < 1:
        raise ValueError("max_iters must be >= 1")
    alpha = int(samples.min())
    beta = int(samples.max())
    table = build(alpha, beta)
    if alpha == beta:
        return alpha, beta, table
    for _ in range(max_iters):
        span = _active_span(table.entries)
        if span is None:               # constant curve: nothing to calibrate
            return alpha, beta, table
        lo_idx, hi_idx = span
        if lo_idx == 0 and hi_idx == len(table.entries) - 1:
            break                      # no plateau left to trim
        width = 2.0 ** table.s_pot
        new_alpha = alpha + int(math.floor(lo_idx * width))
        new_beta = min(beta, alpha + int(math.ceil((hi_idx + 1) * width)) - 1)
        new_alpha = min(new_alpha, new_beta)
        if abs(new_alpha - alpha) < width and abs(new_beta - beta) < width:
            break
        if new_alpha == new_beta:
            alpha = beta = new_alpha
            table = build(alpha, beta)
            break
        candidate = build(new_alpha, new_beta)
        if count_repeated(candidate) >= count_repeated(table):
            break                      # no redundancy gained: keep current
        alpha, beta, table = new_alpha, new_beta, candidate
    return alpha, beta, table


@dataclass
class SegmentedLutTable:
    """Two tables splitting a high-dynamic-range domain at `pivot`.

    The low segment (steep part of the curve) owns (alpha, pivot]; the high
    segment owns (pivot, beta].  Each keeps an independent output scale.
    """

    low: LutTable
    high: LutTable
    pivot: int

    def segment_for(self, data):
        return np.asarray(data, dtype=np.int64) > self.pivot

    def lookup(self, data):
        data = np.asarray(data, dtype=np.int64)
        hi = self.segment_for(data)
        out = np.where(hi, self.high.lookup(data), self.low.lookup(data))
        return out if out.shape else int(out)

    def dequant_lookup(self, data):
        data = np.asarray(data, dtype=np.int64)
        hi = self.segment_for(data)
        out = np.where(hi, self.high.lookup(data) * self.high.out_scale,
                       self.low.lookup(data) * self.low.out_scale)
        return out if out.shape else float(out)


def build_segmented_recip(beta: int, n_per_segment: int = 6, out_bits: int = 8,
                          in_scale: float = 1.0, pivot_frac: float = 0.125,
                          name: str = "recip") -> SegmentedLutTable:
    """Reciprocal split at the first eighth of the domain.

    Inputs are positive integers (beta in the same units); x -> 1/(x*in_scale).
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    pivot = max(1, int(beta * pivot_frac))
    recip = lambda x: 1.0 / max(x, in_scale)   # domain floor: one input quantum
    low = build_table(recip, 1, pivot, n_per_segment, out_bits,
                      in_scale=in_scale, out_signed=False, name=name + ".low")
    high = build_table(recip, pivot + 1, beta, n_per_segment, out_bits,
                       in_scale=in_scale, out_signed=False, name=name + ".high")
    return SegmentedLutTable(low, high, pivot)


def table_error(table: LutTable | SegmentedLutTable, f: Callable[[float], float],
                samples) -> dict:
    """Max-abs error and MSE of the dequantized table against f on samples."""
    samples = np.asarray(samples, dtype=np.int64)
    if isinstance(table, SegmentedLutTable):
        approx = table.dequant_lookup(samples)
        in_scale = table.low.in_scale
    else:
        approx = table.dequant_lookup(samples)
        in_scale = table.in_scale
    exact = np.array([f(x * in_scale) for x in samples], dtype=np.float64)
    err = approx - exact
    return {"max_abs": float(np.abs(err).max()), "mse": float(np.mean(err * err))}


# --- table dump format ------------------------------------------------------

def dump_table(table: LutTable) -> dict:
    return {
        "name": table.name,
        "n": table.n,
        "alpha": table.alpha,
        "beta": table.beta,
        "s_pot": table.s_pot,
        "inverted": table.inverted,
        "out_bits": table.out_bits,
        "out_signed": table.out_signed,
        "out_scale": table.out_scale,
        "in_scale": table.in_scale,
        "entries": [int(v) for v in table.entries],
    }


def load_table(obj: dict) -> LutTable:
    return LutTable(np.array(obj["entries"], dtype=np.int64), obj["n"],
                    obj["alpha"], obj["beta"], obj["s_pot"], obj["inverted"],
                    obj["out_bits"], obj["out_signed"], obj["out_scale"],
                    obj["in_scale"], obj.get("name", ""))


def save_tables(path: str | Path, tables: dict) -> None:
    """Write every table (segmented ones as .low/.high plus pivot) to JSON."""
    doc = {}
    for key, t in tables.items():
        if isinstance(t, SegmentedLutTable):
            doc[key] = {"segmented": True, "pivot": t.pivot,
                        "low": dump_table(t.low), "high": dump_table(t.high)}
        else:
            doc[key] = dump_table(t)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_tables(path: str | Path) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    out = {}
    for key, obj in doc.items():
        if obj.get("segmented"):
            out[key] = SegmentedLutTable(load_table(obj["low"]),
                                         load_table(obj["high"]), obj["pivot"])
        else:
            out[key] = load_table(obj)
    return out
