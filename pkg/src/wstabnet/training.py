"""Joint loss, optimizer loop, learning-rate schedule, checkpointing.

The loss is a convex combination of two token cross-entropies: the structure
sequence and all cell characters of the batch pooled together, each averaged
per non-padding token so the weight balances the components regardless of
sequence lengths.

Checkpoints are a fixed binary layout: magic ``WSTB``, a version byte, both
configs as length-prefixed JSON, then every parameter in enumeration order
as little-endian float32 preceded by its shape. Saving, loading, and saving
again is byte-identical; training twice with one seed is too.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .network import NetConfig, build_params, forward_train, param_specs
from .synth import load_dataset

MAGIC = b"WSTB"
VERSION = 1

PAD_ID = 0


class DatasetEmpty(ValueError):
    pass


class Misaligned(ValueError):
    """Loss inputs whose logits and targets do not line up."""


class BadMagic(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


@dataclass
class TrainConfig:
    lam: float = 0.5  # weight on the structure loss; 1 - lam on the cell loss
    lr_schedule: tuple[tuple[int, float], ...] = ((12, 1e-3), (5, 1e-4))
    batch_size: int = 16
    optimizer: str = "adam"
    seed: int = 0
    grad_clip: float | None = 1.0
    precision: str = "f64"

    def __post_init__(self):
        self.lr_schedule = tuple((int(e), float(lr)) for e, lr in self.lr_schedule)
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        for epochs, lr in self.lr_schedule:
            if epochs < 1 or lr <= 0.0:
                raise ValueError("each schedule stage needs epochs >= 1 and lr > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"unknown precision {self.precision!r}")

    @property
    def n_epochs(self) -> int:
        return sum(e for e, _ in self.lr_schedule)

    def lr_for_epoch(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch index."""
        remaining = epoch
        for epochs, lr in self.lr_schedule:
            if remaining <= epochs:
                return lr
            remaining -= epochs
        return self.lr_schedule[-1][1]

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "lr_schedule" in d:
            d["lr_schedule"] = tuple(tuple(stage) for stage in d["lr_schedule"])
        return cls(**d)


def loss_total(
    struct_logits: Tensor,
    struct_targets,
    cell_logits_list,
    cell_targets_list,
    lam: float,
) -> tuple[Tensor, dict]:
    """The weighted joint loss plus a small diagnostics dict.

    Cell positions are pooled across every cell before averaging. A batch
    with no cell tokens contributes nothing from the cell term; with
    ``lam == 0`` that leaves a zero loss, reported via ``degenerate``.
    """
    struct_targets = list(struct_targets)
    if struct_logits.shape[0] != len(struct_targets):
        raise Misaligned(
            f"{struct_logits.shape[0]} structure logits vs {len(struct_targets)} targets"
        )
    if len(cell_logits_list) != len(cell_targets_list):
        raise Misaligned(
            f"{len(cell_logits_list)} cell logit blocks vs {len(cell_targets_list)} target lists"
        )
    for logits, targets in zip(cell_logits_list, cell_targets_list):
        if logits.shape[0] != len(targets):
            raise Misaligned("cell logits and targets differ in length")
    l_struc = ad.cross_entropy(struct_logits, struct_targets, ignore_id=PAD_ID)
    if cell_logits_list:
        pooled = (
            cell_logits_list[0]
            if len(cell_logits_list) == 1
            else ad.concat(cell_logits_list, axis=0)
        )
        pooled_targets = [t for targets in cell_targets_list for t in targets]
        l_cell = ad.cross_entropy(pooled, pooled_targets, ignore_id=PAD_ID)
        have_cells = True
    else:
        l_cell = Tensor(np.zeros((), dtype=struct_logits.data.dtype))
        have_cells = False
    loss = ad.add(ad.scale(l_struc, lam), ad.scale(l_cell, 1.0 - lam))
    info = {
        "l_struc": float(l_struc.data),
        "l_cell": float(l_cell.data),
        "degenerate": bool(lam == 0.0 and not have_cells),
    }
    return loss, info


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Sgd:
    def __init__(self, params: dict[str, Tensor]):
        self.params = params

    def step(self, lr: float) -> None:
        for p in self.params.values():
            p.data -= lr * p.grad


class Adam:
    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bias1 = 1.0 - b1 ** self.t
        bias2 = 1.0 - b2 ** self.t
        for key, p in self.params.items():
            g = p.grad
            m = self.m[key]
            v = self.v[key]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def make_optimizer(name: str, params: dict[str, Tensor]):
    return Adam(params) if name == "adam" else Sgd(params)


def clip_gradients(params: dict[str, Tensor], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p._grad is not None:
            total += float((p._grad * p._grad).sum())
    norm = total ** 0.5
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        for p in params.values():
            if p._grad is not None:
                p._grad *= factor
    return norm


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: dict[str, Tensor], net: NetConfig, train: TrainConfig, path) -> None:
    config_blob = json.dumps(
        {"net": asdict(net), "train": asdict(train)},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([VERSION]))
        fh.write(struct.pack("<I", len(config_blob)))
        fh.write(config_blob)
        for name, shape, _kind in param_specs(net):
            arr = params[name].data
            if arr.shape != shape:
                raise ad.ShapeMismatch(f"{name}: {arr.shape} vs expected {shape}")
            fh.write(struct.pack("<I", len(shape)))
            fh.write(struct.pack(f"<{len(shape)}I", *shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, dtype=np.float32) -> tuple[dict[str, Tensor], NetConfig, TrainConfig]:
    """Rebuild parameters and configs; every tensor is bit-exact at float32."""
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    offset = 0

    def take(n: int) -> memoryview:
        nonlocal offset
        if offset + n > len(view):
            raise TruncatedFile(f"{path}: needs {offset + n} bytes, has {len(view)}")
        chunk = view[offset : offset + n]
        offset += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise BadMagic(f"{path}: not a checkpoint file")
    version = take(1)[0]
    if version != VERSION:
        raise BadMagic(f"{path}: unsupported version {version}")
    (config_len,) = struct.unpack("<I", take(4))
    configs = json.loads(bytes(take(config_len)).decode("utf-8"))
    net = NetConfig.from_dict(configs["net"])
    train = TrainConfig.from_dict(configs["train"])
    params: dict[str, Tensor] = {}
    for name, shape, _kind in param_specs(net):
        (ndim,) = struct.unpack("<I", take(4))
        stored = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if stored != shape:
            raise ad.ShapeMismatch(f"{name}: file has {stored}, config implies {shape}")
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * n), dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.astype(dtype), requires_grad=True)
    if offset != len(view):
        raise TruncatedFile(f"{path}: {len(view) - offset} trailing bytes")
    return params, net, train


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def token_accuracy(logits: Tensor, targets) -> tuple[int, int]:
    """(correct, total) over non-padding positions."""
    t = np.asarray(targets)
    valid = t != PAD_ID
    pred = logits.data.argmax(axis=1)
    return int((pred[valid] == t[valid]).sum()), int(valid.sum())


def train(
    data_dir,
    net: NetConfig,
    config: TrainConfig,
    out_dir,
    split: str = "train",
    log=None,
) -> Path:
    """Run the full schedule over a dataset directory.

    Writes ``ep{n}.wstb`` per epoch plus ``metrics.jsonl`` under ``out_dir``
    and returns the path of the final checkpoint. Deterministic for a fixed
    seed: initialization, shuffling, and dropout all derive from it.
    """
    samples = load_dataset(data_dir, split=split, alphabet=net.alphabet)
    if not samples:
        raise DatasetEmpty(f"no {split!r} samples under {data_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dtype = config.dtype
    for s in samples:
        s.image = s.image.astype(dtype)
    params = build_params(net, seed=config.seed, dtype=dtype)
    optimizer = make_optimizer(config.optimizer, params)
    shuffle_rng = np.random.default_rng([config.seed, 0x5F1E])
    dropout_rng = np.random.default_rng([config.seed, 0xD801])
    step = 0
    final = out / "ep0.wstb"
    with open(out / "metrics.jsonl", "w", encoding="utf-8", newline="\n") as metrics:
        for epoch in range(1, config.n_epochs + 1):
            lr = config.lr_for_epoch(epoch)
            order = shuffle_rng.permutation(len(samples))
            epoch_loss = 0.0
            n_batches = 0
            s_correct = s_total = c_correct = c_total = 0
            t0 = time.time()
            for start in range(0, len(order), config.batch_size):
                batch = [samples[i] for i in order[start : start + config.batch_size]]
                ad.zero_grad(params)
                struct_blocks = []
                struct_targets: list[int] = []
                cell_blocks = []
                cell_targets = []
                for sample in batch:
                    s_logits, c_logits = forward_train(sample, params, net, dropout_rng)
                    struct_blocks.append(s_logits)
                    struct_targets.extend(sample.struct_tokens)
                    cell_blocks.extend(c_logits)
                    cell_targets.extend(sample.cell_tokens)
                struct_logits = (
                    struct_blocks[0]
                    if len(struct_blocks) == 1
                    else ad.concat(struct_blocks, axis=0)
                )
                loss, info = loss_total(
                    struct_logits, struct_targets, cell_blocks, cell_targets, config.lam
                )
                ad.backward(loss)
                if config.grad_clip is not None:
                    clip_gradients(params, config.grad_clip)
                optimizer.step(lr)
                step += 1
                n_batches += 1
                epoch_loss += float(loss.data)
                sc, st = token_accuracy(struct_logits, struct_targets)
                s_correct += sc
                s_total += st
                for block, targets in zip(cell_blocks, cell_targets):
                    cc, ct = token_accuracy(block, targets)
                    c_correct += cc
                    c_total += ct
                metrics.write(
                    json.dumps(
                        {
                            "epoch": epoch,
                            "step": step,
                            "loss": float(loss.data),
                            "l_struc": info["l_struc"],
                            "l_cell": info["l_cell"],
                            "lr": lr,
                        }
                    )
                    + "\n"
                )
            summary = {
                "epoch": epoch,
                "step": step,
                "loss": epoch_loss / max(n_batches, 1),
                "lr": lr,
                "token_acc_struct": s_correct / max(s_total, 1),
                "token_acc_cell": c_correct / max(c_total, 1),
                "seconds": round(time.time() - t0, 3),
            }
            metrics.write(json.dumps(summary) + "\n")
            metrics.flush()
            if log is not None:
                log(summary)
            final = out / f"ep{epoch}.wstb"
            save_checkpoint(params, net, config, final)
    return final
