"""Maximum-likelihood training with deterministic, resumable batching.

Batches walk seeded per-epoch permutations and dequantization noise is
freshly drawn per visit, but both are pure functions of (seed, step), so
resuming from a checkpoint replays the exact trajectory bit for bit on one
thread without persisting any generator state.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from rgflow.coupling import NonFiniteInputError
from rgflow.data import Dataset, Preprocessor
from rgflow.model import NumericalOverflowError, RgFlowModel
from rgflow.nncore import AdamW, TrainingDivergedError, load_arrays, save_arrays


@dataclass
class TrainConfig:
    steps: int
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 5e-5
    clip_norm: float = 1.0
    seed: int = 0
    eval_interval: int = 0
    checkpoint_interval: int = 0
    out_dir: str | None = None
    level_lr_mult: dict[int, float] = field(default_factory=dict)
    compile: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("lr must be positive and weight_decay non-negative")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive (or None)")


class TrainLog:
    """Append-only per-step records with JSON-lines persistence."""

    def __init__(self, records: list[dict] | None = None):
        self.records = list(records or [])

    def append(self, **record) -> None:
        if self.records and record["step"] <= self.records[-1]["step"]:
            raise ValueError("step index must increase")
        self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.records])

    def save(self, path) -> None:
        with open(path, "w") as f:
            for rec in self.records:
                f.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "TrainLog":
        with open(path) as f:
            return cls([json.loads(line) for line in f if line.strip()])


def _epoch_perm(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


def _batch_indices(seed: int, step: int, batch_size: int, n: int) -> np.ndarray:
    """Indices for one step, walking seeded epoch shuffles back to back."""
    start = step * batch_size
    out = np.empty(batch_size, dtype=np.int64)
    got = 0
    while got < batch_size:
        epoch, pos = divmod(start + got, n)
        take = min(batch_size - got, n - pos)
        out[got : got + take] = _epoch_perm(seed, epoch, n)[pos : pos + take]
        got += take
    return out


def _noise_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 2, step])


def _images_of(data) -> np.ndarray:
    return data.images8 if isinstance(data, Dataset) else np.asarray(data)


def save_training_checkpoint(path, model: RgFlowModel, opt: AdamW, step: int, config: TrainConfig) -> None:
    arrays = dict(model.named_parameters())
    state = opt.state_dict()
    for name, arr in state["exp_avg"].items():
        arrays[f"opt.exp_avg.{name}"] = arr
    for name, arr in state["exp_avg_sq"].items():
        arrays[f"opt.exp_avg_sq.{name}"] = arr
    cfg = asdict(config)
    cfg["level_lr_mult"] = {str(k): v for k, v in config.level_lr_mult.items()}
    meta = {"model": model.config, "train": {"step": step, "opt_step": opt.step_count, "config": cfg}}
    save_arrays(path, arrays, meta)


def load_training_checkpoint(path, model: RgFlowModel, opt: AdamW | None = None) -> dict:
    """Restore parameters (and optimizer moments) in place; returns meta."""
    arrays, meta = load_arrays(path)
    params = {k: v for k, v in arrays.items() if not k.startswith("opt.")}
    model.load_parameters(params)
    if opt is not None:
        state = {
            "step_count": meta["train"]["opt_step"],
            "exp_avg": {n: arrays[f"opt.exp_avg.{n}"] for n in params},
            "exp_avg_sq": {n: arrays[f"opt.exp_avg_sq.{n}"] for n in params},
        }
        opt.load_state_dict(state)
    return meta


def _lr_scale(config: TrainConfig) -> dict[str, float]:
    return {f"levels.{h}.": mult for h, mult in config.level_lr_mult.items()}


def train(
    model: RgFlowModel,
    data,
    config: TrainConfig,
    preprocessor: Preprocessor | None = None,
    resume_from=None,
    log_every: int = 1,
) -> TrainLog:
    """Minimize the mean negative log-likelihood over minibatches.

    Returns the training log; writes checkpoints under ``config.out_dir``
    when ``checkpoint_interval`` is set. ``resume_from`` restores model and
    optimizer state and continues the same deterministic trajectory.
    """
    images8 = _images_of(data)
    if images8.shape[0] == 0 and config.steps > 0:
        raise ValueError("cannot train on an empty dataset")
    pre = preprocessor or Preprocessor()
    opt = AdamW(
        model.named_parameters(),
        lr=config.lr,
        weight_decay=config.weight_decay,
        clip_norm=config.clip_norm,
        lr_scale=_lr_scale(config),
    )
    start_step = 0
    if resume_from is not None:
        meta = load_training_checkpoint(resume_from, model, opt)
        start_step = meta["train"]["step"]
    out_dir = Path(config.out_dir) if config.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    log = TrainLog()
    dims = float(np.prod(images8.shape[1:])) if images8.ndim == 4 else 1.0
    ln2 = math.log(2.0)

    log_prob = model.log_prob
    if config.compile:
        log_prob = torch.compile(model.log_prob, dynamic=False)

    last_ckpt = None

    def checkpoint(step):
        nonlocal last_ckpt
        if out_dir:
            path = out_dir / f"step{step:08d}.ckpt"
            save_training_checkpoint(path, model, opt, step, config)
            last_ckpt = path

    n = images8.shape[0]
    for step in range(start_step, config.steps):
        t0 = time.time()
        idx = _batch_indices(config.seed, step, config.batch_size, n)
        x, pre_logdet = pre.forward(images8[idx], _noise_rng(config.seed, step))
        x = x.float()
        try:
            lp = log_prob(x)
            loss = -lp.mean()
            if not math.isfinite(float(loss.detach())):
                raise TrainingDivergedError(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            grad_norm = opt.step()
        except (NumericalOverflowError, NonFiniteInputError, TrainingDivergedError) as err:
            raise TrainingDivergedError(
                f"training diverged at step {step}: {err}"
                + (f" (last checkpoint: {last_ckpt})" if last_ckpt else "")
            ) from err
        if (step + 1) % log_every == 0 or step + 1 == config.steps:
            batch_bpd = float(-(lp.detach().double() + pre_logdet).mean()) / (dims * ln2) + math.log2(pre.bit_depth)
            log.append(
                step=step,
                loss=float(loss),
                bpd=batch_bpd,
                grad_norm=float(grad_norm),
                seconds=time.time() - t0,
            )
        if config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0:
            checkpoint(step + 1)
    if config.steps > start_step:
        checkpoint(config.steps)
    if out_dir:
        log.save(out_dir / "train_log.jsonl")
    return log


def evaluate(
    model,
    data,
    preprocessor: Preprocessor | None = None,
    seed: int = 0,
    batch_size: int = 64,
) -> dict[str, float]:
    """One seeded pass over a dataset: mean negative log-likelihood (nats)
    and bits per dimension.

    8-bit input gets the usual dequantize-and-logit treatment. Tensors are
    taken as already being in model space; their "bpd" is then the plain
    per-dimension entropy without the 8-bit convention.
    """
    continuous = isinstance(data, torch.Tensor)
    images = data if continuous else _images_of(data)
    if images.shape[0] == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pre = preprocessor or Preprocessor()
    rng = np.random.default_rng([seed, 3])
    dims = float(np.prod(images.shape[1:]))
    ln2 = math.log(2.0)
    total_nll = 0.0
    total_bits = 0.0
    with torch.no_grad():
        for lo in range(0, images.shape[0], batch_size):
            batch = images[lo : lo + batch_size]
            if continuous:
                x = batch
                pre_logdet = torch.zeros(x.shape[0], dtype=torch.float64)
            else:
                x, pre_logdet = pre.forward(batch, rng)
                x = x.float()
            lp = model.log_prob(x)
            total_nll += float(-lp.double().sum())
            total_bits += float(-(lp.double() + pre_logdet).sum())
    n = images.shape[0]
    bpd = total_bits / (n * dims * ln2) + (0.0 if continuous else math.log2(pre.bit_depth))
    return {"nll": total_nll / n, "bpd": bpd}
