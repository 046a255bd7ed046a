"""Named configuration bundles.

``tiny`` exists for gradient checking and fast tests, ``desk`` trains on a
laptop-class CPU in minutes, and ``paper`` documents the full-scale
hyperparameters (512-wide, 8 heads, 480x480 images, token caps 500/150,
lr 0.001 for 12 epochs then 0.0001 for 5, batch 8). The paper bundle is for
reference and config plumbing; it is not expected to be trainable here.
"""

from __future__ import annotations

from dataclasses import replace

from .network import NetConfig
from .synth import GenConfig
from .tokens import DEFAULT_ALPHABET
from .training import TrainConfig

TINY_ALPHABET = "0123456789"

PRESETS: dict[str, dict] = {
    "tiny": {
        "net": NetConfig(
            image_hw=(8, 8),
            backbone_channels=(8,),
            backbone_blocks=1,
            d_model=16,
            n_heads=2,
            ff_dim=32,
            n_struct_layers=1,
            n_cell_layers=1,
            max_struct_len=32,
            max_cell_len=8,
            alphabet=TINY_ALPHABET,
            dropout=0.0,
        ),
        "train": TrainConfig(
            lam=0.5,
            lr_schedule=((1, 1e-3),),
            batch_size=4,
            optimizer="adam",
            seed=0,
            grad_clip=1.0,
            precision="f64",
        ),
        "gen": GenConfig(
            seed=0,
            rows=(1, 2),
            cols=(1, 2),
            span_prob=0.15,
            header_prob=0.2,
            alphabet=TINY_ALPHABET,
            max_cell_len=1,
            image_hw=(8, 8),
            margin=1,
            margin_jitter=0,
            cell_pad=0,
        ),
    },
    "desk": {
        "net": NetConfig(
            image_hw=(64, 64),
            backbone_channels=(16, 32, 64),
            backbone_blocks=2,
            d_model=64,
            n_heads=2,
            ff_dim=256,
            n_struct_layers=2,
            n_cell_layers=1,
            max_struct_len=64,
            max_cell_len=16,
            alphabet=DEFAULT_ALPHABET,
            dropout=0.0,
        ),
        "train": TrainConfig(
            lam=0.5,
            lr_schedule=((15, 1e-3), (10, 3e-4)),
            batch_size=16,
            optimizer="adam",
            seed=0,
            grad_clip=1.0,
            precision="f64",
        ),
        "gen": GenConfig(
            seed=0,
            rows=(1, 4),
            cols=(1, 4),
            span_prob=0.15,
            header_prob=0.3,
            alphabet=DEFAULT_ALPHABET,
            max_cell_len=2,
            image_hw=(64, 64),
        ),
    },
    "paper": {
        "net": NetConfig(
            image_hw=(480, 480),
            backbone_channels=(64, 128, 256),
            backbone_blocks=2,
            d_model=512,
            n_heads=8,
            ff_dim=2048,
            n_struct_layers=3,
            n_cell_layers=1,
            max_struct_len=500,
            max_cell_len=150,
            alphabet=DEFAULT_ALPHABET,
            dropout=0.1,
        ),
        "train": TrainConfig(
            lam=0.5,
            lr_schedule=((12, 1e-3), (5, 1e-4)),
            batch_size=8,
            optimizer="adam",
            seed=0,
            grad_clip=1.0,
            precision="f32",
        ),
        "gen": GenConfig(
            seed=0,
            rows=(2, 10),
            cols=(2, 8),
            span_prob=0.15,
            header_prob=0.5,
            alphabet=DEFAULT_ALPHABET,
            max_cell_len=12,
            image_hw=(480, 480),
            glyph_scale=2,
        ),
    },
}


def preset(name: str, kind: str, overrides: dict | None = None):
    """A preset config, optionally overriding individual fields."""
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r} (have {sorted(PRESETS)})")
    base = PRESETS[name][kind]
    if not overrides:
        return replace(base)
    return replace(base, **_coerce(overrides))


def _coerce(overrides: dict) -> dict:
    fixed = dict(overrides)
    for key in ("image_hw", "rows", "cols", "backbone_channels"):
        if key in fixed:
            fixed[key] = tuple(fixed[key])
    if "lr_schedule" in fixed:
        fixed["lr_schedule"] = tuple(tuple(s) for s in fixed["lr_schedule"])
    return fixed
