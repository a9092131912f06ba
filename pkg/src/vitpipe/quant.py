"""Integer tensor representation and requantization arithmetic.

Everything downstream of weight loading works on plain integers; the only
real-valued quantities are the scaling factors attached to tensors and the
fixed-point constants derived from them.  Rounding is round-half-even
throughout (ties broken toward the even integer), implemented exactly on
integers so results never depend on float rounding of intermediates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANTISSA_BITS = 16  # fixed-point scale mantissa width
ACC_BITS = 32       # MAC accumulator width (signed)


def qrange(bits: int) -> tuple[int, int]:
    """Signed symmetric range [Q_min, Q_max] for a bit width."""
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


def shift_round_half_even(x, shift: int):
    """Exact x * 2**-shift with ties to even.  Works on ints and int arrays."""
    if shift < 0:
        raise ValueError("shift must be >= 0")
    if shift == 0:
        return x
    q = x >> shift              # floor division, also for negatives
    r = x - (q << shift)
    half = 1 << (shift - 1)
    if isinstance(x, np.ndarray):
        up = (r > half) | ((r == half) & (q & 1 == 1))
        return q + up.astype(q.dtype)
    return q + (1 if (r > half or (r == half and q & 1)) else 0)


def round_half_even(x: float) -> int:
    """Banker's rounding of a real value to an integer."""
    return int(round(x))


@dataclass(frozen=True)
class FixedPointScale:
    """A real scaling factor stored as mantissa * 2**-shift."""

    mantissa: int
    shift: int

    def __post_init__(self):
        if self.shift < 0:
            raise ValueError("shift must be non-negative")
        if abs(self.mantissa) >= (1 << MANTISSA_BITS):
            raise ValueError(f"mantissa exceeds {MANTISSA_BITS} bits")

    @classmethod
    def from_real(cls, value: float, mantissa_bits: int = MANTISSA_BITS) -> "FixedPointScale":
        if value == 0 or not math.isfinite(value):
            raise ValueError(f"cannot represent scale {value!r}")
        m, e = math.frexp(abs(value))          # |value| = m * 2**e, m in [0.5, 1)
        shift = max(0, mantissa_bits - e)
        mant = round(value * (1 << shift))
        while abs(mant) >= (1 << mantissa_bits):
            shift -= 1
            mant = round(value * (1 << shift)) if shift >= 0 else round(value)
            if shift < 0:
                raise ValueError(f"scale {value!r} too large for {mantissa_bits}-bit mantissa")
        if mant == 0:
            raise ValueError(f"scale {value!r} underflows {mantissa_bits}-bit mantissa")
        return cls(mant, shift)

    def to_real(self) -> float:
        return self.mantissa * 2.0 ** -self.shift


def requant(x, alpha_int: int, scale: FixedPointScale, bits: int):
    """clamp(round_half_even((x - alpha_int) * scale), Q_min, Q_max).

    Total function: any integer (or integer array) input maps into the
    signed range of `bits`.
    """
    if scale.mantissa == 0:
        raise ValueError("scale mantissa must be nonzero")
    qmin, qmax = qrange(bits)
    t = (x - alpha_int) * scale.mantissa
    y = shift_round_half_even(t, scale.shift)
    if isinstance(y, np.ndarray):
        return np.clip(y, qmin, qmax)
    return min(max(y, qmin), qmax)


def requant_real(x, alpha_int: int, scale: float, bits: int):
    """Reference requant using the real-valued scale (test oracle path)."""
    qmin, qmax = qrange(bits)
    y = np.rint((np.asarray(x, dtype=np.float64) - alpha_int) * scale)
    return np.clip(y, qmin, qmax).astype(np.int64)


def fuse_bn_bias(beta: float, gamma: float, mu: float, var: float, eps: float,
                 s_x: float, s_w: float) -> int:
    """Integer bias folding the normalization shift into the MAC epilogue.

    B = round((beta * sqrt(var + eps) - mu * gamma) / (gamma * s_x * s_w))
    """
    denom = gamma * s_x * s_w
    if denom == 0:
        raise ZeroDivisionError("gamma * s_x * s_w must be nonzero")
    if var + eps <= 0:
        raise ValueError("var + eps must be positive")
    return round_half_even((beta * math.sqrt(var + eps) - mu * gamma) / denom)


def _branch_factor(gamma: float, s_x: float, s_w: float, var: float, eps: float) -> float:
    return gamma * s_x * s_w / math.sqrt(var + eps)


def residual_rescale_factor(res: dict, main: dict) -> float:
    """Ratio of the residual branch scale to the main branch scale.

    The residual integers are multiplied by this factor (rounded) before the
    addition so both branches sit on the main branch's grid.
    """
    f_main = _branch_factor(**main)
    if f_main == 0:
        raise ZeroDivisionError("main branch factor is zero")
    return _branch_factor(**res) / f_main


def output_requant_scale(gamma: float, var: float, eps: float,
                         s_x: float, s_w: float, s_y: float) -> float:
    """Requant scale mapping a MAC accumulator onto the next layer's grid."""
    if s_y <= 0:
        raise ValueError("s_y must be positive")
    if var + eps <= 0:
        raise ValueError("var + eps must be positive")
    return gamma * s_x * s_w / (s_y * math.sqrt(var + eps))


def pot_round_up(x: float) -> int:
    """Smallest integer e with 2**e >= x.  Exact for all finite floats."""
    if x <= 0 or not math.isfinite(x):
        raise ValueError(f"pot_round_up needs x > 0, got {x!r}")
    m, e = math.frexp(x)       # x = m * 2**e, m in [0.5, 1)
    return e - 1 if m == 0.5 else e


@dataclass
class QuantTensor:
    """Integer-valued tensor plus the affine map back to reals."""

    data: np.ndarray
    bits: int
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.int64)
        qmin, qmax = qrange(self.bits)
        lo, hi = int(self.data.min(initial=0)), int(self.data.max(initial=0))
        if lo < qmin or hi > qmax:
            raise ValueError(f"values [{lo}, {hi}] outside {self.bits}-bit range [{qmin}, {qmax}]")

    @property
    def shape(self):
        return self.data.shape

    def dequant(self) -> np.ndarray:
        return (self.data - self.zero_point) * self.scale

    @classmethod
    def quantize(cls, real: np.ndarray, bits: int, scale: float,
                 zero_point: int = 0) -> "QuantTensor":
        qmin, qmax = qrange(bits)
        q = np.clip(np.rint(np.asarray(real, dtype=np.float64) / scale) + zero_point, qmin, qmax)
        return cls(q.astype(np.int64), bits, scale, zero_point)


@dataclass
class FusedLayerParams:
    """Frozen integer constants of one linear layer after fusion.

    w_int:   (CO, CI) or (CO, CI, KH, KW) integer weights
    b_int:   per-output-channel integer bias
    s_out:   requant scale applied to the accumulator (real)
    r_res:   rescale factor for a residual branch joining this output, if any
    """

    w_int: np.ndarray
    b_int: np.ndarray
    w_bits: int
    s_x: float
    s_w: float
    s_out: float
    r_res: float | None = None

    def __post_init__(self):
        self.w_int = np.asarray(self.w_int, dtype=np.int64)
        self.b_int = np.asarray(self.b_int, dtype=np.int64)
        qmin, qmax = qrange(self.w_bits)
        if self.w_int.min() < qmin or self.w_int.max() > qmax:
            raise ValueError("weights outside declared bit width")
        if not (math.isfinite(self.s_out) and self.s_out > 0):
            raise ValueError("s_out must be finite and positive")


# --- weight / tensor bundle I/O -------------------------------------------
#
# A bundle is a directory with one raw little-endian row-major binary file
# per tensor and a `manifest.json` describing name, shape, bits, scale,
# zero point and payload dtype (int8 unless the values need more room).

_DTYPES = {"int8": np.int8, "int32": np.int32, "float32": np.float32}


def _payload_dtype(bits: int) -> str:
    return "int8" if bits <= 8 else "int32"


def save_bundle(path: str | Path, tensors: dict) -> None:
    """Write QuantTensors (and raw float arrays) with a manifest."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    for name, t in tensors.items():
        fname = name.replace("/", ".") + ".bin"
        if isinstance(t, QuantTensor):
            dtype = _payload_dtype(t.bits)
            entry = {"name": name, "file": fname, "shape": list(t.shape),
                     "bits": t.bits, "scale": t.scale,
                     "zero_point": t.zero_point, "dtype": dtype}
            t.data.astype(_DTYPES[dtype]).tofile(path / fname)
        else:
            arr = np.asarray(t, dtype=np.float32)
            entry = {"name": name, "file": fname, "shape": list(arr.shape),
                     "dtype": "float32"}
            arr.tofile(path / fname)
        manifest.append(entry)
    with open(path / "manifest.json", "w") as f:
        json.dump({"tensors": manifest}, f, indent=1)


def load_bundle(path: str | Path) -> dict:
    path = Path(path)
    with open(path / "manifest.json") as f:
        manifest = json.load(f)
    out = {}
    for entry in manifest["tensors"]:
        raw = np.fromfile(path / entry["file"], dtype=_DTYPES[entry["dtype"]])
        data = raw.reshape(entry["shape"])
        if entry["dtype"] == "float32":
            out[entry["name"]] = data.astype(np.float64)
        else:
            out[entry["name"]] = QuantTensor(data.astype(np.int64), entry["bits"],
                                             entry["scale"], entry["zero_point"])
    return out


def save_array(path: str | Path, arr: np.ndarray) -> None:
    """Raw little-endian tensor file with a JSON sidecar manifest."""
    path = Path(path)
    arr = np.asarray(arr)
    dtype = "float32" if arr.dtype.kind == "f" else "int8"
    arr.astype(_DTYPES[dtype]).tofile(path)
    with open(path.with_suffix(path.suffix + ".json"), "w") as f:
        json.dump({"shape": list(arr.shape), "dtype": dtype}, f)


def load_array(path: str | Path) -> np.ndarray:
    path = Path(path)
    with open(path.with_suffix(path.suffix + ".json")) as f:
        meta = json.load(f)
    raw = np.fromfile(path, dtype=_DTYPES[meta["dtype"]])
    return raw.reshape(meta["shape"]).astype(np.float64)
