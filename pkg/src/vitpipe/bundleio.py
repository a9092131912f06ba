"""On-disk layout of a frozen model.

    <dir>/weights/           integer tensors + manifest.json
    <dir>/tables.json        every lookup table
    <dir>/model.json         config, scalar constants, residual rescales
    <dir>/reference/         float weights of the source model (optional,
                             enables oracle comparisons at inference time)
"""

from __future__ import annotations

import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .luts import load_tables, save_tables
from .model import IntBlockParams, IntViT
from .quant import FixedPointScale, QuantTensor, load_bundle, save_bundle
from .reference import FloatBlockParams, FloatViT

_W_FIELDS = ["wq", "wk", "wv", "wo", "w1", "w2"]
_B_FIELDS = ["bq", "bk", "bv", "bo", "b1", "b2"]
_T_FIELDS = ["rsqrt1", "rq_q", "rq_k", "rq_v", "rq_score", "exp", "recip",
             "rq_attn", "rq_proj", "rsqrt2", "gelu", "rq_mm2"]


def save_int_model(path: str | Path, model: IntViT, tables: dict,
                   reference: FloatViT | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    cfg = model.cfg
    weights: dict = {
        "patch_w": QuantTensor(model.patch_w, cfg.weight_bits, model.s_patch_w),
        "patch_b": QuantTensor(model.patch_b, 32, 1.0),
        "head_w": QuantTensor(model.head_w, max(cfg.weight_bits, 8), model.s_head_w),
        "head_b": model.head_b,
    }
    scalars = {
        "config": asdict(cfg),
        "s_img": model.s_img,
        "blocks": [],
    }
    for b, p in enumerate(model.blocks):
        for f in _W_FIELDS:
            weights[f"block{b}.{f}"] = QuantTensor(getattr(p, f), cfg.weight_bits,
                                                   p.weight_scales.get(f, 1.0))
        for f in _B_FIELDS:
            weights[f"block{b}.{f}"] = QuantTensor(getattr(p, f), 32, 1.0)
        scalars["blocks"].append({
            "ln1_shift": p.ln1_shift, "ln2_shift": p.ln2_shift,
            "r1": [p.r1.mantissa, p.r1.shift], "r2": [p.r2.mantissa, p.r2.shift],
            "s_ln1": p.s_ln1, "s_ln2": p.s_ln2,
        })
    save_bundle(path / "weights", weights)
    save_tables(path / "tables.json", tables)
    with open(path / "model.json", "w") as fh:
        json.dump(scalars, fh, indent=1)
    if reference is not None:
        ref: dict = {"patch_w": reference.patch_w, "patch_b": reference.patch_b,
                     "head_w": reference.head_w, "head_b": reference.head_b}
        for b, fp in enumerate(reference.blocks):
            for f in FloatBlockParams.__dataclass_fields__:
                ref[f"block{b}.{f}"] = getattr(fp, f)
        save_bundle(path / "reference", ref)


def load_int_model(path: str | Path) -> tuple[IntViT, dict]:
    path = Path(path)
    with open(path / "model.json") as fh:
        scalars = json.load(fh)
    cfg = ModelConfig(**scalars["config"])
    weights = load_bundle(path / "weights")
    tables = load_tables(path / "tables.json")
    blocks = []
    for b, meta in enumerate(scalars["blocks"]):
        tag = f"block{b}"
        kw = {}
        wscales = {}
        for f in _W_FIELDS:
            qt = weights[f"{tag}.{f}"]
            kw[f] = qt.data
            wscales[f] = qt.scale
        for f in _B_FIELDS:
            kw[f] = weights[f"{tag}.{f}"].data
        for f in _T_FIELDS:
            kw[f] = tables[f"{tag}.{f}"]
        blocks.append(IntBlockParams(
            **kw,
            ln1_shift=meta["ln1_shift"], ln2_shift=meta["ln2_shift"],
            r1=FixedPointScale(*meta["r1"]), r2=FixedPointScale(*meta["r2"]),
            s_ln1=meta["s_ln1"], s_ln2=meta["s_ln2"], weight_scales=wscales))
    model = IntViT(
        cfg=cfg, s_img=scalars["s_img"],
        patch_w=weights["patch_w"].data, patch_b=weights["patch_b"].data,
        rq_patch=tables["patch.rq"], blocks=blocks,
        head_w=weights["head_w"].data, head_b=np.asarray(weights["head_b"]),
        s_head_w=weights["head_w"].scale, s_patch_w=weights["patch_w"].scale)
    return model, tables


def load_reference(path: str | Path, cfg: ModelConfig) -> FloatViT:
    ref = load_bundle(Path(path) / "reference")
    blocks = []
    for b in range(cfg.blocks):
        kw = {f: ref[f"block{b}.{f}"] for f in FloatBlockParams.__dataclass_fields__}
        blocks.append(FloatBlockParams(**kw))
    return FloatViT(cfg, ref["patch_w"], ref["patch_b"], blocks,
                    ref["head_w"], ref["head_b"])
