"""Model shape presets and quantization regimes."""

from __future__ import annotations

from dataclasses import dataclass, replace


@dataclass(frozen=True)
class ModelConfig:
    t: int                  # sequence length (patch tokens)
    ci: int                 # embedding dimension
    heads: int
    head_dim: int
    mlp_hidden: int
    blocks: int
    act_bits: int = 4
    weight_bits: int = 4
    score_bits: int = 8     # attention scores between QK matmul and softmax
    img_channels: int = 3
    img_h: int = 224
    img_w: int = 224
    patch: int = 16
    classes: int = 1000
    use_class_token: bool = False

    def __post_init__(self):
        if self.ci != self.heads * self.head_dim:
            raise ValueError("ci must equal heads * head_dim")
        grid = (self.img_h // self.patch) * (self.img_w // self.patch)
        expect = grid + (1 if self.use_class_token else 0)
        if self.t != expect:
            raise ValueError(f"t={self.t} inconsistent with the patch grid ({grid})")

    @property
    def resid_bits(self) -> int:
        """Residual-stream width: activation bits plus add headroom."""
        return self.act_bits + 2


def deit_tiny(**overrides) -> ModelConfig:
    return replace(ModelConfig(t=196, ci=192, heads=3, head_dim=64,
                               mlp_hidden=768, blocks=12), **overrides)


def deit_small(**overrides) -> ModelConfig:
    return replace(ModelConfig(t=196, ci=384, heads=6, head_dim=64,
                               mlp_hidden=1536, blocks=12), **overrides)


def toy(t: int = 8, ci: int = 12, heads: int = 2, mlp_ratio: int = 2,
        blocks: int = 2, classes: int = 10, **overrides) -> ModelConfig:
    """Small config for oracle tests; patch grid chosen to match t."""
    h = int(round(t ** 0.5))
    while t % h:
        h -= 1
    w = t // h
    return replace(ModelConfig(t=t, ci=ci, heads=heads, head_dim=ci // heads,
                               mlp_hidden=ci * mlp_ratio, blocks=blocks,
                               img_channels=3, img_h=h * 4, img_w=w * 4, patch=4,
                               classes=classes), **overrides)


BIT_REGIMES = {
    "a4w4": (4, 4),
    "a3w3": (3, 3),
    "a8w8": (8, 8),
}


def apply_regime(cfg: ModelConfig, regime: str) -> ModelConfig:
    try:
        a, w = BIT_REGIMES[regime.lower()]
    except KeyError:
        raise ValueError(f"unknown bit regime {regime!r} (want one of {sorted(BIT_REGIMES)})")
    return replace(cfg, act_bits=a, weight_bits=w)


PRESETS = {
    "deit-tiny": deit_tiny,
    "deit-small": deit_small,
    "toy": toy,
}
