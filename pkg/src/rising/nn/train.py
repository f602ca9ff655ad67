"""Mini-batch training loop and checkpoint files."""

from __future__ import annotations

import contextlib
import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ..io import atomic_write_bytes, read_json, write_json
from .layers import mse_backward, mse_forward
from .optim import AdamState, TrainConfig, adam_step, polynomial_lr
from .unet import NetworkSpec, ResUNet

logger = logging.getLogger(__name__)


@dataclass
class TrainingLog:
    epochs: list[int] = field(default_factory=list)
    mean_loss: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)

    def append(self, epoch, loss, lr):
        self.epochs.append(int(epoch))
        self.mean_loss.append(float(loss))
        self.lr.append(float(lr))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "mean_loss", "lr"])
            for row in zip(self.epochs, self.mean_loss, self.lr):
                writer.writerow([row[0], repr(row[1]), repr(row[2])])

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "mean_loss": self.mean_loss, "lr": self.lr}


def as_batch(images: np.ndarray) -> np.ndarray:
    """``(N, H, W)`` or ``(N, 1, H, W)`` images as a 4D single-channel batch."""
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    if images.ndim != 4 or images.shape[1] != 1:
        raise ValueError(f"expected (N, H, W) or (N, 1, H, W) images, got shape {images.shape}")
    return images


def dataset_loss(net: ResUNet, inputs, targets, batch_size: int = 16) -> float:
    total = 0.0
    for start in range(0, len(inputs), batch_size):
        pred = net.forward(inputs[start : start + batch_size])
        net.clear()
        loss, _ = mse_forward(pred, targets[start : start + batch_size])
        total += loss * len(pred)
    return total / len(inputs)


def train(
    inputs: np.ndarray,
    targets: np.ndarray,
    spec: NetworkSpec = NetworkSpec(),
    cfg: TrainConfig = TrainConfig(),
    *,
    init_seed: int = 0,
    dtype=np.float32,
    deterministic: bool = True,
    net: ResUNet | None = None,
) -> tuple[ResUNet, TrainingLog, AdamState]:
    """Fit a :class:`ResUNet` mapping ``inputs`` to ``targets`` under the MSE loss.

    Epoch 0 of the returned log is the loss before any update. With
    ``deterministic=True`` BLAS runs single-threaded so repeated runs with the
    same seeds are bit-identical.
    """
    x = as_batch(inputs).astype(dtype, copy=False)
    y = as_batch(targets).astype(dtype, copy=False)
    if len(x) == 0:
        raise ValueError("training set is empty")
    if x.shape != y.shape:
        raise ValueError(f"input shape {x.shape} and target shape {y.shape} differ")
    if net is None:
        net = ResUNet(spec, init_seed=init_seed, dtype=dtype)

    limiter = threadpool_limits(limits=1) if deterministic else contextlib.nullcontext()
    with limiter:
        rng = np.random.default_rng(cfg.shuffle_seed)
        steps_per_epoch = math.ceil(len(x) / cfg.batch_size)
        total_steps = cfg.epochs * steps_per_epoch
        state = AdamState()
        log = TrainingLog()
        log.append(0, dataset_loss(net, x, y), cfg.lr_start)
        step = 0
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(x))
            running = 0.0
            for start in range(0, len(x), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                pred = net.forward(x[idx])
                loss, diff = mse_forward(pred, y[idx])
                net.backward(mse_backward(diff))
                lr = polynomial_lr(step, total_steps, cfg)
                step += 1
                adam_step(net.parameters(), net.gradients(), state, step, cfg, lr)
                running += loss * len(idx)
            log.append(epoch, running / len(x), lr)
            logger.info("epoch %d/%d loss %.6g lr %.3g", epoch, cfg.epochs, running / len(x), lr)
    return net, log, state


def save_checkpoint(path: str | Path, net: ResUNet, *, train_cfg: TrainConfig | None = None,
                    log: TrainingLog | None = None, adam: AdamState | None = None,
                    extra: dict | None = None) -> Path:
    """Write ``path`` (raw little-endian float32 tensors) and its JSON manifest ``path.json``.

    The manifest lists every tensor's name, shape and float offset within the
    payload, followed by the optimizer moments when ``adam`` is given.
    """
    path = Path(path)
    tensors = list(net.parameters().items())
    if adam is not None and adam.m:
        tensors += [(f"adam.m.{k}", v) for k, v in adam.m.items()]
        tensors += [(f"adam.v.{k}", v) for k, v in adam.v.items()]
    layout, chunks, offset = [], [], 0
    for name, value in tensors:
        flat = np.ascontiguousarray(value, dtype="<f4").ravel()
        layout.append({"name": name, "shape": list(value.shape), "offset": offset, "count": int(flat.size)})
        chunks.append(flat.tobytes())
        offset += flat.size
    manifest = {
        "format": "rising-checkpoint/1",
        "spec": net.spec.to_dict(),
        "init_seed": net.init_seed,
        "train_config": train_cfg.to_dict() if train_cfg else None,
        "epoch": log.epochs[-1] if log and log.epochs else 0,
        "loss_history": log.to_dict() if log else None,
        "adam_step": adam.step if adam else 0,
        "tensors": layout,
        "extra": extra or {},
    }
    atomic_write_bytes(path, b"".join(chunks))
    write_json(checkpoint_manifest_path(path), manifest)
    return path


def checkpoint_manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[ResUNet, dict, AdamState]:
    """Rebuild the network stored by :func:`save_checkpoint`; returns ``(net, manifest, adam_state)``."""
    path = Path(path)
    manifest = read_json(checkpoint_manifest_path(path))
    payload = np.frombuffer(path.read_bytes(), dtype="<f4")
    net = ResUNet(NetworkSpec(**manifest["spec"]), init_seed=manifest["init_seed"], dtype=dtype)
    params, adam = {}, AdamState(step=manifest.get("adam_step", 0))
    for item in manifest["tensors"]:
        value = payload[item["offset"] : item["offset"] + item["count"]].reshape(item["shape"]).astype(dtype)
        name = item["name"]
        if name.startswith("adam.m."):
            adam.m[name[7:]] = value
        elif name.startswith("adam.v."):
            adam.v[name[7:]] = value
        else:
            params[name] = value
    net.load_parameters(params)
    return net, manifest, adam
