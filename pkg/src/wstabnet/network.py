"""The table recognition network: CNN encoder, structure decoder, cell decoder.

The encoder runs a small residual CNN over the grayscale image, flattens the
feature grid column by column (sequence index ``s = col * h' + row``), adds
sinusoidal positions, and hands the sequence to both decoders as attention
keys and values. The structure decoder is a causal transformer over structure
tokens. Each structure token that opens a cell triggers one cell decoder run
whose queries are the cell's shifted character tokens plus that position's
structure-decoder hidden vector, broadcast to every query position.

Parameter enumeration order is the insertion order produced by
:func:`param_specs`; checkpoints rely on it, so treat it as part of the file
format.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .tokens import (
    CELL_TRIGGER_TOKENS,
    DEFAULT_ALPHABET,
    STRUCT_TOKENS,
    TooLong,
    cell_vocab,
    struct_vocab,
)


class CellCountMismatch(ValueError):
    """A sample's cell sequences disagree with its structure triggers."""


@dataclass
class NetConfig:
    image_hw: tuple[int, int] = (64, 64)
    backbone_channels: tuple[int, ...] = (16, 32, 64)
    backbone_blocks: int = 2  # conv blocks per stage; the first one downsamples
    d_model: int = 64
    n_heads: int = 2
    ff_dim: int = 256
    n_struct_layers: int = 2
    n_cell_layers: int = 1
    max_struct_len: int = 64
    max_cell_len: int = 16
    alphabet: str = DEFAULT_ALPHABET
    dropout: float = 0.1

    def __post_init__(self):
        self.image_hw = tuple(self.image_hw)
        self.backbone_channels = tuple(self.backbone_channels)
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        h, w = self.image_hw
        if h % self.downsample or w % self.downsample:
            raise ValueError(
                f"image {h}x{w} not divisible by downsample factor {self.downsample}"
            )

    @property
    def downsample(self) -> int:
        return 2 ** len(self.backbone_channels)

    @property
    def grid_hw(self) -> tuple[int, int]:
        return (self.image_hw[0] // self.downsample, self.image_hw[1] // self.downsample)

    @property
    def seq_len(self) -> int:
        gh, gw = self.grid_hw
        return gh * gw

    @property
    def struct_vocab_size(self) -> int:
        return len(STRUCT_TOKENS)

    @property
    def cell_vocab_size(self) -> int:
        return 4 + len(self.alphabet)

    def struct_vocab(self):
        return struct_vocab()

    def cell_vocab(self):
        return cell_vocab(self.alphabet)

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        return cls(**d)


@dataclass
class FeatureGrid:
    grid: Tensor  # [h', w', k] backbone output
    flattened: Tensor  # [h'*w', d_model], column-major, positions added
    h: int
    w: int


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def param_specs(config: NetConfig) -> list[tuple[str, tuple[int, ...], str]]:
    """(name, shape, init kind) for every parameter, in checkpoint order."""
    specs: list[tuple[str, tuple[int, ...], str]] = []

    def conv(name: str, c_in: int, c_out: int):
        specs.append((f"{name}.w", (c_out, c_in, 3, 3), "conv"))
        specs.append((f"{name}.b", (c_out,), "zeros"))

    def linear(name: str, n_in: int, n_out: int):
        specs.append((f"{name}.w", (n_in, n_out), "linear"))
        specs.append((f"{name}.b", (n_out,), "zeros"))

    def norm(name: str, d: int):
        specs.append((f"{name}.g", (d,), "ones"))
        specs.append((f"{name}.b", (d,), "zeros"))

    d = config.d_model
    prev = 1
    conv("backbone.stem", prev, config.backbone_channels[0])
    prev = config.backbone_channels[0]
    for s, ch in enumerate(config.backbone_channels):
        conv(f"backbone.stage{s}.down", prev, ch)
        for r in range(config.backbone_blocks - 1):
            conv(f"backbone.stage{s}.res{r}.conv1", ch, ch)
            conv(f"backbone.stage{s}.res{r}.conv2", ch, ch)
        prev = ch
    if prev != d:
        linear("encoder.proj", prev, d)
    norm("encoder.norm", d)  # rescales image content against the positions
    specs.append(("embed.struct.w", (config.struct_vocab_size, d), "embed"))
    specs.append(("embed.cell.w", (config.cell_vocab_size, d), "embed"))

    def decoder_layer(name: str):
        for attn in ("self", "cross"):
            for mat in ("wq", "wk", "wv", "wo"):
                specs.append((f"{name}.{attn}.{mat}", (d, d), "linear"))
            for vec in ("bq", "bk", "bv", "bo"):
                specs.append((f"{name}.{attn}.{vec}", (d,), "zeros"))
        norm(f"{name}.norm1", d)
        norm(f"{name}.norm2", d)
        linear(f"{name}.ffn.fc1", d, config.ff_dim)
        linear(f"{name}.ffn.fc2", config.ff_dim, d)
        norm(f"{name}.norm3", d)

    for i in range(config.n_struct_layers):
        decoder_layer(f"struct.layer{i}")
    for i in range(config.n_cell_layers):
        decoder_layer(f"cell.layer{i}")
    linear("head.struct", d, config.struct_vocab_size)
    linear("head.cell", d, config.cell_vocab_size)
    return specs


_INIT_STREAM = 0x1247


def build_params(config: NetConfig, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Freshly initialized parameters keyed by name, in checkpoint order."""
    rng = np.random.default_rng([seed, _INIT_STREAM])
    d = config.d_model
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(config):
        if kind == "conv":
            # Fan-in scaled for the relu stack; keeps feature variance from
            # collapsing across the backbone depth.
            c_out, c_in, kh, kw = shape
            bound = math.sqrt(6.0 / (c_in * kh * kw))
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "linear":
            n_in, n_out = shape
            bound = math.sqrt(6.0 / (n_in + n_out))
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "embed":
            data = rng.normal(0.0, d ** -0.5, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(np.asarray(data, dtype=dtype), requires_grad=True)
    return params


# ---------------------------------------------------------------------------
# Constant caches (positions, causal masks), keyed by shape and dtype
# ---------------------------------------------------------------------------

_PE_CACHE: dict[tuple, np.ndarray] = {}
_MASK_CACHE: dict[tuple, np.ndarray] = {}


def sinusoid_positions(n: int, d: int, dtype=np.float64) -> np.ndarray:
    key = (n, d, np.dtype(dtype).str)
    pe = _PE_CACHE.get(key)
    if pe is None:
        pos = np.arange(n, dtype=np.float64)[:, None]
        dim = np.arange(0, d, 2, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, dim / d)
        pe = np.zeros((n, d), dtype=np.float64)
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle[:, : d // 2])
        pe = pe.astype(dtype)
        _PE_CACHE[key] = pe
    return pe


def causal_mask(n: int, dtype=np.float64) -> np.ndarray:
    key = (n, np.dtype(dtype).str)
    mask = _MASK_CACHE.get(key)
    if mask is None:
        mask = np.triu(np.full((n, n), -1e30, dtype=dtype), k=1)
        _MASK_CACHE[key] = mask
    return mask


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------

def _attention(
    q_in: Tensor,
    kv_in: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    config: NetConfig,
    mask: np.ndarray | None,
    rng: np.random.Generator | None,
) -> Tensor:
    d = config.d_model
    dh = d // config.n_heads
    q = ad.add(ad.matmul(q_in, params[f"{prefix}.wq"]), params[f"{prefix}.bq"])
    k = ad.add(ad.matmul(kv_in, params[f"{prefix}.wk"]), params[f"{prefix}.bk"])
    v = ad.add(ad.matmul(kv_in, params[f"{prefix}.wv"]), params[f"{prefix}.bv"])
    heads = []
    inv_scale = 1.0 / math.sqrt(dh)
    for h in range(config.n_heads):
        qh = ad.narrow(q, 1, h * dh, dh)
        kh = ad.narrow(k, 1, h * dh, dh)
        vh = ad.narrow(v, 1, h * dh, dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose_axes(kh, (1, 0))), inv_scale)
        if mask is not None:
            scores = ad.add(scores, Tensor(mask))
        weights = ad.dropout(ad.softmax(scores, axis=-1), config.dropout, rng)
        heads.append(ad.matmul(weights, vh))
    merged = heads[0] if len(heads) == 1 else ad.concat(heads, axis=1)
    return ad.add(ad.matmul(merged, params[f"{prefix}.wo"]), params[f"{prefix}.bo"])


def _decoder_layer(
    x: Tensor,
    memory: Tensor,
    params: dict[str, Tensor],
    prefix: str,
    config: NetConfig,
    mask: np.ndarray,
    rng: np.random.Generator | None,
) -> Tensor:
    p = config.dropout
    attn = _attention(x, x, params, f"{prefix}.self", config, mask, rng)
    x = ad.layer_norm(
        ad.add(x, ad.dropout(attn, p, rng)),
        params[f"{prefix}.norm1.g"],
        params[f"{prefix}.norm1.b"],
    )
    attn = _attention(x, memory, params, f"{prefix}.cross", config, None, rng)
    x = ad.layer_norm(
        ad.add(x, ad.dropout(attn, p, rng)),
        params[f"{prefix}.norm2.g"],
        params[f"{prefix}.norm2.b"],
    )
    hidden = ad.relu(ad.add(ad.matmul(x, params[f"{prefix}.ffn.fc1.w"]), params[f"{prefix}.ffn.fc1.b"]))
    ff = ad.add(ad.matmul(hidden, params[f"{prefix}.ffn.fc2.w"]), params[f"{prefix}.ffn.fc2.b"])
    return ad.layer_norm(
        ad.add(x, ad.dropout(ff, p, rng)),
        params[f"{prefix}.norm3.g"],
        params[f"{prefix}.norm3.b"],
    )


def encode(
    image,
    params: dict[str, Tensor],
    config: NetConfig,
    rng: np.random.Generator | None = None,
) -> FeatureGrid:
    """Image [H, W] in [0, 1] to the encoder memory sequence."""
    dtype = params["backbone.stem.w"].data.dtype
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.shape != tuple(config.image_hw):
        raise ad.ShapeMismatch(f"image {data.shape} vs configured {config.image_hw}")
    x = Tensor(data.astype(dtype, copy=False).reshape(1, *data.shape))
    x = ad.relu(ad.conv2d(x, params["backbone.stem.w"], params["backbone.stem.b"], 1, 1))
    for s in range(len(config.backbone_channels)):
        x = ad.relu(
            ad.conv2d(
                x,
                params[f"backbone.stage{s}.down.w"],
                params[f"backbone.stage{s}.down.b"],
                stride=2,
                pad=1,
            )
        )
        for r in range(config.backbone_blocks - 1):
            base = f"backbone.stage{s}.res{r}"
            y = ad.relu(ad.conv2d(x, params[f"{base}.conv1.w"], params[f"{base}.conv1.b"], 1, 1))
            y = ad.conv2d(y, params[f"{base}.conv2.w"], params[f"{base}.conv2.b"], 1, 1)
            x = ad.relu(ad.add(x, y))
    k, gh, gw = x.shape
    grid = ad.transpose_axes(x, (1, 2, 0))
    # Column-major unfold: sequence position s = col * h' + row.
    seq = ad.reshape(ad.transpose_axes(x, (2, 1, 0)), (gw * gh, k))
    if k != config.d_model:
        seq = ad.add(ad.matmul(seq, params["encoder.proj.w"]), params["encoder.proj.b"])
    seq = ad.layer_norm(seq, params["encoder.norm.g"], params["encoder.norm.b"])
    pe = sinusoid_positions(gw * gh, config.d_model, dtype)
    seq = ad.dropout(ad.add(seq, Tensor(pe)), config.dropout, rng)
    return FeatureGrid(grid=grid, flattened=seq, h=gh, w=gw)


def _embed_tokens(
    table: Tensor, ids, d: int, max_len: int, what: str, dtype
) -> Tensor:
    if len(ids) > max_len:
        raise TooLong(f"{what} sequence length {len(ids)} exceeds {max_len}")
    x = ad.scale(ad.embed(table, ids), math.sqrt(d))
    return ad.add(x, Tensor(sinusoid_positions(len(ids), d, dtype)))


def structure_decoder_forward(
    memory: FeatureGrid,
    token_ids,
    params: dict[str, Tensor],
    config: NetConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, Tensor]:
    """Logits [t, V_struct] and top-layer hidden states [t, d_model].

    ``token_ids`` is the right-shifted input sequence and must start with
    the start token.
    """
    dtype = params["embed.struct.w"].data.dtype
    x = _embed_tokens(
        params["embed.struct.w"], token_ids, config.d_model,
        config.max_struct_len, "structure", dtype,
    )
    x = ad.dropout(x, config.dropout, rng)
    mask = causal_mask(len(token_ids), dtype)
    for i in range(config.n_struct_layers):
        x = _decoder_layer(x, memory.flattened, params, f"struct.layer{i}", config, mask, rng)
    logits = ad.add(ad.matmul(x, params["head.struct.w"]), params["head.struct.b"])
    return logits, x


def cell_decoder_forward(
    memory: FeatureGrid,
    cell_hidden: Tensor,
    token_ids,
    params: dict[str, Tensor],
    config: NetConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits [u, V_cell] for one cell.

    ``cell_hidden`` is the structure decoder's hidden vector at the position
    that emitted this cell's opening token; it is added to every query
    position.
    """
    dtype = params["embed.cell.w"].data.dtype
    x = _embed_tokens(
        params["embed.cell.w"], token_ids, config.d_model,
        config.max_cell_len, "cell", dtype,
    )
    x = ad.add(x, cell_hidden)
    x = ad.dropout(x, config.dropout, rng)
    mask = causal_mask(len(token_ids), dtype)
    for i in range(config.n_cell_layers):
        x = _decoder_layer(x, memory.flattened, params, f"cell.layer{i}", config, mask, rng)
    return ad.add(ad.matmul(x, params["head.cell.w"]), params["head.cell.b"])


def hidden_row(hidden: Tensor, index: int) -> Tensor:
    """Row ``index`` of the hidden matrix as a [d] vector, still on the tape."""
    return ad.reshape(ad.narrow(hidden, 0, index, 1), (hidden.shape[1],))


_TRIGGER_IDS = tuple(struct_vocab().id(tok) for tok in CELL_TRIGGER_TOKENS)


def trigger_positions(struct_target_ids) -> list[int]:
    """Indices whose target token opens a cell, in reading order."""
    return [i for i, tok in enumerate(struct_target_ids) if tok in _TRIGGER_IDS]


def forward_train(
    sample,
    params: dict[str, Tensor],
    config: NetConfig,
    rng: np.random.Generator | None = None,
) -> tuple[Tensor, list[Tensor]]:
    """Teacher-forced forward pass over one sample.

    Returns structure logits aligned with ``sample.struct_tokens`` and one
    logits block per cell, ordered as the cell tokens appear.
    """
    sos = struct_vocab().sos_id
    struct_targets = sample.struct_tokens
    struct_inputs = [sos] + list(struct_targets[:-1])
    positions = trigger_positions(struct_targets)
    if len(positions) != len(sample.cell_tokens):
        raise CellCountMismatch(
            f"{len(positions)} cell tokens in structure vs "
            f"{len(sample.cell_tokens)} cell sequences"
        )
    memory = encode(sample.image, params, config, rng)
    struct_logits, hidden = structure_decoder_forward(
        memory, struct_inputs, params, config, rng
    )
    cell_sos = cell_vocab(config.alphabet).sos_id
    cell_logits: list[Tensor] = []
    for pos, cell_targets in zip(positions, sample.cell_tokens):
        cell_inputs = [cell_sos] + list(cell_targets[:-1])
        cell_logits.append(
            cell_decoder_forward(
                memory, hidden_row(hidden, pos), cell_inputs, params, config, rng
            )
        )
    return struct_logits, cell_logits
