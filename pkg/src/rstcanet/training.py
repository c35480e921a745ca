"""Objective, optimizer, learning-rate schedule, checkpointing and the train loop."""

from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor
from .data import ImageSample, PatchBatch, sample_patches
from .model import ModelConfig, RstcaNet, config_from_dict, config_to_dict

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "RSTCAC1"

# halving periods from the published training protocol
LR_BASE = 1e-4
LR_PERIODS = {"B": 40_000, "S": 100_000, "L": 200_000, "tiny": 40_000}


class NumericalError(RuntimeError):
    """Non-finite loss or gradient; training cannot continue."""


class CheckpointMismatchError(RuntimeError):
    """Checkpoint contents disagree with the architecture they claim."""


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute difference over all elements (scalar Tensor)."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: {pred.shape} vs {target.shape}")
    return ag.mean(ag.absolute(pred - target))


@dataclass
class LrSchedule:
    """Step decay: base halves every ``period`` iterations."""

    base: float = LR_BASE
    period: int = 40_000

    def at(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError(f"iteration must be non-negative, got {iteration}")
        return self.base * 0.5 ** (iteration // self.period)


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    return schedule.at(iteration)


class Adam:
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: "OrderedDict[str, Tensor]",
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericalError(f"non-finite gradient in parameter {name!r}")
            m = self.m[name]
            v = self.v[name]
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def adam_step(state: Adam, lr: float) -> None:
    state.step(lr)


# ---------------------------------------------------------------------------
# checkpoint container: text header + manifest, then raw little-endian f32


def save_checkpoint(path, net: RstcaNet, iteration: int, seed: int,
                    optimizer: Optional[Adam] = None) -> None:
    params = net.named_parameters()
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, p in params.items():
        arrays[name] = p.data
    if optimizer is not None:
        for name in params:
            arrays[f"optim.m.{name}"] = optimizer.m[name]
            arrays[f"optim.v.{name}"] = optimizer.v[name]

    header = OrderedDict(config_to_dict(net.cfg))
    header["iteration"] = iteration
    header["seed"] = seed
    if optimizer is not None:
        header["optim.t"] = optimizer.t

    lines = [CHECKPOINT_MAGIC]
    for key, val in header.items():
        lines.append(f"{key}={'' if val is None else val}")
    lines.append("")
    lines.append(str(len(arrays)))
    for name, arr in arrays.items():
        dims = "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"
        lines.append(f"{name} {dims}")
    lines.append("DATA")

    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, "OrderedDict[str, np.ndarray]"]:
    """Parse header fields and named arrays from a checkpoint file."""
    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        nl = blob.index(b"DATA\n") + len(b"DATA\n")
    except ValueError:
        raise CheckpointMismatchError(f"{path} is not a checkpoint (no data section)") from None
    text = blob[: nl].decode("utf-8").splitlines()
    payload = blob[nl:]
    if not text or text[0] != CHECKPOINT_MAGIC:
        raise CheckpointMismatchError(f"{path} is not a checkpoint (bad magic)")
    header: dict = {}
    i = 1
    while text[i] != "":
        key, _, val = text[i].partition("=")
        header[key] = val
        i += 1
    i += 1
    count = int(text[i])
    i += 1
    manifest: list[tuple[str, tuple[int, ...]]] = []
    expected = 0
    for line in text[i : i + count]:
        name, dims = line.rsplit(" ", 1)
        shape = () if dims == "scalar" else tuple(int(d) for d in dims.split("x"))
        manifest.append((name, shape))
        expected += 4 * (int(np.prod(shape)) if shape else 1)
    if expected != len(payload):
        raise CheckpointMismatchError(
            f"{path}: payload holds {len(payload)} bytes but manifest expects {expected}"
        )
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 0
    for name, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        arrays[name] = arr.copy()
        offset += 4 * n
    return header, arrays


def load_checkpoint(path) -> tuple[RstcaNet, Adam, int, int]:
    """Rebuild (net, optimizer, iteration, seed) from a checkpoint file.

    Raises :class:`CheckpointMismatchError` naming the first parameter whose
    name or shape disagrees with the architecture in the header.
    """
    header, arrays = read_checkpoint(path)
    cfg = config_from_dict(header)
    net = RstcaNet(cfg, seed=int(header.get("seed", "0") or 0))
    params = net.named_parameters()

    for name, p in params.items():
        if name not in arrays:
            raise CheckpointMismatchError(f"checkpoint is missing parameter {name!r}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointMismatchError(
                f"parameter {name!r} has shape {arrays[name].shape}, expected {p.data.shape}"
            )
        p.data = arrays[name].astype(np.float32)
    extra = [n for n in arrays if not n.startswith("optim.") and n not in params]
    if extra:
        raise CheckpointMismatchError(f"checkpoint holds unknown parameter {extra[0]!r}")

    optimizer = Adam(params)
    optimizer.t = int(header.get("optim.t", "0") or 0)
    for name in params:
        mkey, vkey = f"optim.m.{name}", f"optim.v.{name}"
        if mkey in arrays:
            optimizer.m[name] = arrays[mkey].astype(np.float32)
            optimizer.v[name] = arrays[vkey].astype(np.float32)
    iteration = int(header.get("iteration", "0") or 0)
    seed = int(header.get("seed", "0") or 0)
    return net, optimizer, iteration, seed


# ---------------------------------------------------------------------------
# train loop


@dataclass
class TrainResult:
    net: RstcaNet
    losses: list[tuple[int, float, float]]   # (iteration, loss, lr)
    checkpoint_path: Optional[Path]
    halted: bool = False


def batch_rng(seed: int, iteration: int) -> np.random.Generator:
    """Per-iteration stream, so resuming mid-run replays the same batches."""
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(iteration,)))


def train(
    net: RstcaNet,
    samples: Sequence[ImageSample],
    iterations: int,
    seed: int,
    out_dir=None,
    batch: int = 16,
    patch: int = 64,
    schedule: Optional[LrSchedule] = None,
    augment: bool = True,
    save_every: int = 0,
    start_iteration: int = 0,
    optimizer: Optional[Adam] = None,
    log_every: int = 50,
    fixed_batch: bool = False,
) -> TrainResult:
    """Optimize mean-L1 on random even-aligned patches.

    Deterministic for a fixed seed: batch sampling draws from a fresh
    per-iteration stream.  ``fixed_batch`` trains on the whole sample list
    as one unchanging batch (the overfit configuration).  A non-finite loss
    halts immediately, leaving the last written checkpoint in place.
    """
    schedule = schedule or LrSchedule()
    params = net.named_parameters()
    optimizer = optimizer or Adam(params)
    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_path = out_dir / "checkpoint.ckpt" if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    frozen = None
    if fixed_batch:
        frozen = PatchBatch(
            mosaics=np.stack([s.mosaic for s in samples]),
            targets=np.stack([s.rgb for s in samples]),
        )

    losses: list[tuple[int, float, float]] = []
    halted = False
    for i in range(start_iteration, iterations):
        if frozen is not None:
            pb = frozen
        else:
            rng = batch_rng(seed, i)
            pb = sample_patches(samples, batch, patch, rng, augment_patches=augment)
        lr = schedule.at(i)
        with Tape() as tape:
            pred = net(Tensor(pb.mosaics))
            loss = l1_loss(pred, Tensor(pb.targets))
            value = float(loss.data)
            if not np.isfinite(value):
                log.error("non-finite loss at iteration %d; halting", i)
                halted = True
                break
            tape.backward(loss)
        optimizer.step(lr)
        losses.append((i, value, lr))
        if log_every and (i % log_every == 0 or i == iterations - 1):
            log.info("iter %d loss %.6f lr %.2e", i, value, lr)
        if ckpt_path is not None and save_every and (i + 1) % save_every == 0:
            save_checkpoint(ckpt_path, net, i + 1, seed, optimizer)

    if halted:
        raise NumericalError(
            f"training halted on non-finite loss at iteration {i}; "
            f"last-good checkpoint: {ckpt_path if ckpt_path and ckpt_path.exists() else 'none'}"
        )
    if ckpt_path is not None:
        save_checkpoint(ckpt_path, net, iterations, seed, optimizer)
    return TrainResult(net=net, losses=losses, checkpoint_path=ckpt_path)


def write_loss_csv(path, losses: Sequence[tuple[int, float, float]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("iteration,loss,lr\n")
        for i, loss, lr in losses:
            fh.write(f"{i},{loss:.8e},{lr:.8e}\n")


def read_loss_csv(path) -> list[tuple[int, float, float]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        fh.readline()
        for line in fh:
            i, loss, lr = line.strip().split(",")
            out.append((int(i), float(loss), float(lr)))
    return out
