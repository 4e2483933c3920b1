"""Optimization recipe: AdamW, cosine-warmup-then-linear schedule,
soft-label cross-entropy, evaluation, and bit-exact checkpoints.

The schedule follows the stated recipe literally: a half-cosine ramp from
the warmup rate to the base rate during warmup, then linear decay from the
base rate to the minimum rate at the final step (warmup is usually linear
and decay cosine elsewhere; here the order is deliberate).

All per-epoch randomness (batch order, mixup draws, drop-path) derives
from (seed, epoch), so resuming from an epoch-boundary checkpoint replays
the exact trajectory of an uninterrupted run.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .datagen import PairSample, mixup, one_hot
from .errors import (ChecksumError, ConfigError, ContractError,
                     DataFormatError, NumericError, TrainingDiverged)
from .nn import Module
from .tensor import Tensor

CKPT_MAGIC = b"IOCK"
CKPT_VERSION = 1


@dataclass
class TrainConfig:
    base_lr: float = 2e-5
    min_lr: float = 2e-7
    warmup_lr: float = 2e-8
    warmup_epochs: Optional[int] = None   # default: 10% of total, >= 1
    total_epochs: int = 30
    batch_size: int = 32
    weight_decay: float = 0.05
    betas: Tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    mixup_alpha: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.total_epochs < 1:
            raise ConfigError("total_epochs must be >= 1")
        if self.warmup_epochs is None:
            self.warmup_epochs = max(1, round(0.1 * self.total_epochs))
        if not self.warmup_lr <= self.min_lr <= self.base_lr:
            raise ConfigError(
                "need warmup_lr <= min_lr <= base_lr, got "
                f"{self.warmup_lr} / {self.min_lr} / {self.base_lr}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError("warmup_epochs must be < total_epochs")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return {
            "base_lr": self.base_lr, "min_lr": self.min_lr,
            "warmup_lr": self.warmup_lr,
            "warmup_epochs": self.warmup_epochs,
            "total_epochs": self.total_epochs,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "betas": list(self.betas), "adam_eps": self.adam_eps,
            "mixup_alpha": self.mixup_alpha, "seed": self.seed,
        }


def lr_at(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Learning rate at optimizer step ``step``: half-cosine ramp from
    warmup_lr to base_lr over the warmup steps, then linear decay from
    base_lr to min_lr at the final step."""
    if steps_per_epoch < 1:
        raise ContractError("steps_per_epoch must be >= 1")
    total = cfg.total_epochs * steps_per_epoch
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < 0 or step > total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if step < warm:
        ramp = 0.5 * (1.0 - math.cos(math.pi * step / warm))
        return cfg.warmup_lr * (1.0 - ramp) + cfg.base_lr * ramp
    if total == warm:
        return cfg.base_lr
    frac = (step - warm) / (total - warm)
    return cfg.base_lr * (1.0 - frac) + cfg.min_lr * frac


class AdamW:
    """AdamW with decoupled weight decay and bias-corrected moments.

    Gradient NaN/Inf aborts, naming the offending parameter. Parameters
    carrying a ``clamp_min`` (the attention temperatures) are re-clamped
    after every step.
    """

    def __init__(self, params: Dict[str, Tensor],
                 betas: Tuple[float, float] = (0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = dict(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise TrainingDiverged(f"non-finite gradient in {name}")
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)
            if p.clamp_min is not None:
                np.maximum(p.data, p.data.dtype.type(p.clamp_min),
                           out=p.data)

    def state_tensors(self, prefix: str = "opt") -> Dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            out[f"{prefix}/m/{k}"] = self.m[k]
            out[f"{prefix}/v/{k}"] = self.v[k]
        out[f"{prefix}/t"] = np.array([self.t], dtype=np.float32)
        return out

    def load_state_tensors(self, tensors: Dict[str, np.ndarray],
                           prefix: str = "opt"):
        for k, p in self.params.items():
            self.m[k] = tensors[f"{prefix}/m/{k}"].reshape(
                p.data.shape).astype(p.data.dtype)
            self.v[k] = tensors[f"{prefix}/v/{k}"].reshape(
                p.data.shape).astype(p.data.dtype)
        self.t = int(tensors[f"{prefix}/t"][0])


# ---------------------------------------------------------------------------
# checkpoint container
#
# magic "IOCK" | u16 version | 32-byte config hash | u32 tensor count |
# per tensor: u16 name length, UTF-8 name, u8 rank, u32 per dim,
# f32 little-endian payload | footer u32 CRC32 over all preceding bytes.


def config_hash(model_config_dict: dict) -> bytes:
    blob = json.dumps(model_config_dict, sort_keys=True,
                      separators=(",", ":")).encode()
    return hashlib.sha256(blob).digest()


def save_checkpoint(path, cfg_hash: bytes,
                    tensors: Dict[str, np.ndarray]):
    if len(cfg_hash) != 32:
        raise ContractError("config hash must be 32 bytes")
    chunks = [CKPT_MAGIC, struct.pack("<H", CKPT_VERSION), cfg_hash,
              struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode()
        arr = np.asarray(arr, dtype="<f4")
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    body = b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body)
        f.write(struct.pack("<I", zlib.crc32(body)))


def load_checkpoint(path) -> Tuple[bytes, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 + 2 + 32 + 4 + 4:
        raise DataFormatError(f"{path}: truncated checkpoint")
    body, crc_raw = raw[:-4], raw[-4:]
    if zlib.crc32(body) != struct.unpack("<I", crc_raw)[0]:
        raise ChecksumError(f"{path}: checkpoint checksum mismatch")
    if body[:4] != CKPT_MAGIC:
        raise DataFormatError(f"{path}: bad magic {body[:4]!r}")
    version = struct.unpack("<H", body[4:6])[0]
    if version != CKPT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    cfg_hash = body[6:38]
    count = struct.unpack("<I", body[38:42])[0]
    off = 42
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode()
        off += nlen
        (rank,) = struct.unpack_from("<B", body, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", body, off)
        off += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off)
        off += 4 * n
        tensors[name] = arr.reshape(dims).copy()
    if off != len(body):
        raise DataFormatError(f"{path}: trailing bytes in checkpoint")
    return cfg_hash, tensors


# ---------------------------------------------------------------------------
# train / evaluate


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray      # [true, predicted] counts
    total: int


@dataclass
class TrainReport:
    history: List[Tuple[int, float, float, float]]  # epoch, loss, acc, lr
    lr_trace: List[float]
    best_val_acc: float
    best_epoch: int
    epochs_trained: int
    total_epochs: int
    checkpoint_path: Optional[str] = None


def _batch_arrays(samples: Sequence[PairSample], idx) -> Tuple[np.ndarray,
                                                               np.ndarray,
                                                               np.ndarray]:
    x_in = np.stack([samples[i].input_image for i in idx])
    x_out = np.stack([samples[i].output_image for i in idx])
    y = one_hot([samples[i].label for i in idx])
    return x_in, x_out, y


def _forward(model, x_in, x_out):
    if model.arity == "pair":
        return model.forward(x_in, x_out)
    return model.forward(x_out)


def evaluate(model: Module, samples: Sequence[PairSample],
             batch_size: int = 64) -> EvalResult:
    """Argmax accuracy plus 2x2 confusion counts; batch-size invariant."""
    if len(samples) == 0:
        raise ContractError("evaluate needs a non-empty dataset")
    was_training = getattr(model, "training", False)
    model.set_training(False)
    confusion = np.zeros((2, 2), dtype=np.int64)
    with T.no_grad():
        for lo in range(0, len(samples), batch_size):
            idx = range(lo, min(lo + batch_size, len(samples)))
            x_in, x_out, _ = _batch_arrays(samples, idx)
            out = _forward(model, x_in, x_out)
            pred = out.probabilities.argmax(axis=-1)
            for i, j in zip(idx, pred):
                confusion[samples[i].label, int(j)] += 1
    model.set_training(was_training)
    correct = int(confusion[0, 0] + confusion[1, 1])
    return EvalResult(correct / len(samples), confusion, len(samples))


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, 1000 + epoch]))


def training_state(model: Module, opt: AdamW, global_step: int,
                   history) -> Dict[str, np.ndarray]:
    tensors = {f"param/{k}": p.data
               for k, p in model.named_parameters().items()}
    tensors.update(opt.state_tensors())
    tensors["sched/global_step"] = np.array([global_step], dtype=np.float32)
    hist = np.asarray(history, dtype=np.float32).reshape(-1, 4)
    tensors["metrics/history"] = hist
    return tensors


def restore_training_state(model: Module, opt: AdamW,
                           tensors: Dict[str, np.ndarray]):
    for k, p in model.named_parameters().items():
        key = f"param/{k}"
        if key not in tensors:
            raise DataFormatError(f"checkpoint missing tensor {key}")
        p.data = tensors[key].reshape(p.data.shape).astype(p.data.dtype)
        p.grad = None
    opt.load_state_tensors(tensors)
    global_step = int(tensors["sched/global_step"][0])
    hist = [(int(r[0]), float(r[1]), float(r[2]), float(r[3]))
            for r in tensors["metrics/history"]]
    return global_step, hist


def write_metrics_csv(path, history):
    with open(path, "w") as f:
        f.write("epoch,train_loss,val_acc,lr\n")
        for epoch, loss, acc, lr in history:
            f.write(f"{epoch},{loss!r},{acc!r},{lr!r}\n")


def train(model: Module, train_set: Sequence[PairSample],
          val_set: Sequence[PairSample], cfg: TrainConfig,
          out_dir=None, resume=None,
          model_config_dict: Optional[dict] = None,
          stop_after_epoch: Optional[int] = None) -> TrainReport:
    """Run the full recipe; deterministic given (model init, data, seed).

    ``resume`` replays from an epoch-boundary checkpoint to a trajectory
    bit-identical with an uninterrupted run; ``stop_after_epoch`` simulates
    an interruption at that epoch boundary. A checkpoint is written after
    every epoch when ``out_dir`` is given; on divergence the last finite
    epoch's checkpoint is retained and TrainingDiverged is raised.
    """
    if len(train_set) == 0 or len(val_set) == 0:
        raise ContractError("train and val sets must be non-empty")
    if model.arity == "pair" and train_set[0].input_image is None:
        raise ContractError("pair model on single-image data")
    params = model.named_parameters()
    opt = AdamW(params, betas=cfg.betas, eps=cfg.adam_eps,
                weight_decay=cfg.weight_decay)
    n = len(train_set)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    cfg_hash = config_hash(model_config_dict or {})
    global_step = 0
    history: List[Tuple[int, float, float, float]] = []
    if resume is not None:
        stored_hash, tensors = load_checkpoint(resume)
        if model_config_dict is not None and stored_hash != cfg_hash:
            raise ConfigError(
                f"{resume}: checkpoint config hash does not match model")
        global_step, history = restore_training_state(model, opt, tensors)

    ckpt_path = None
    lr_trace: List[float] = []
    start_epoch = len(history)
    for epoch in range(start_epoch, cfg.total_epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        for enc in [m for m in model.modules() if hasattr(m, "droppath_rng")]:
            enc.droppath_rng = rng
        model.set_training(True)
        perm = rng.permutation(n)
        losses = []
        lr = lr_at(global_step, cfg, steps_per_epoch)
        for lo in range(0, n, cfg.batch_size):
            idx = perm[lo:lo + cfg.batch_size]
            x_in, x_out, y = _batch_arrays(train_set, idx)
            if cfg.mixup_alpha > 0 and len(idx) >= 2:
                mixed = mixup(x_in, x_out, y, cfg.mixup_alpha, rng)
                x_in, x_out, y = mixed.x_in, mixed.x_out, mixed.targets
            try:
                out = _forward(model, x_in, x_out)
                loss = T.cross_entropy_soft(out.logits, Tensor(y))
                loss_val = loss.item()
            except NumericError as exc:
                model.set_training(False)
                raise TrainingDiverged(
                    f"non-finite activations at epoch {epoch + 1} ({exc}); "
                    f"last finite checkpoint: {ckpt_path}") from exc
            if not math.isfinite(loss_val):
                model.set_training(False)
                raise TrainingDiverged(
                    f"loss became {loss_val} at epoch {epoch + 1}; last "
                    f"finite checkpoint: {ckpt_path}")
            model.zero_grad()
            loss.backward()
            lr = lr_at(global_step, cfg, steps_per_epoch)
            lr_trace.append(lr)
            opt.step(lr)
            global_step += 1
            losses.append(loss_val)
        model.set_training(False)
        val = evaluate(model, val_set, batch_size=cfg.batch_size)
        history.append((epoch + 1,
                        float(np.float32(np.mean(losses))),
                        float(np.float32(val.accuracy)),
                        float(np.float32(lr))))
        if out_dir is not None:
            import os
            os.makedirs(out_dir, exist_ok=True)
            ckpt_path = os.path.join(out_dir, "last.iock")
            save_checkpoint(ckpt_path, cfg_hash,
                            training_state(model, opt, global_step, history))
            write_metrics_csv(os.path.join(out_dir, "metrics.csv"), history)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch:
            break

    best_idx = int(np.argmax([h[2] for h in history]))
    return TrainReport(
        history=history,
        lr_trace=lr_trace,
        best_val_acc=history[best_idx][2],
        best_epoch=history[best_idx][0],
        epochs_trained=len(history),
        total_epochs=cfg.total_epochs,
        checkpoint_path=ckpt_path,
    )
