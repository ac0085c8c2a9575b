"""Differentiable building blocks shared by every network in the package.

Dense layers are weight-normalized (per-row gain over a direction matrix),
residual blocks use SiLU activations whose smoothness keeps higher-order
derivative analyses well behaved, and optimization is AdamW with decoupled
weight decay behind global-norm gradient clipping. Parameters serialize to a
flat little-endian float32 blob with a JSON header.
"""

from __future__ import annotations

import json
import math
import struct
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

CHECKPOINT_MAGIC = b"RGFLOW-CKPT-1\n"


class TrainingDivergedError(RuntimeError):
    """Non-finite gradients or loss encountered during optimization."""


class CheckpointFormatError(ValueError):
    """File is not a recognizable parameter checkpoint."""


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    return F.silu(x)


class WNLinear(nn.Module):
    """Dense layer with weight normalization.

    The effective weight is ``gain * weight / ||weight||`` row-wise, so the
    scale of each output unit is a single learned parameter decoupled from
    the direction of its incoming weights.
    """

    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.gain = nn.Parameter(torch.empty(out_features))
        self.bias = nn.Parameter(torch.zeros(out_features))
        kaiming_init_(self)

    def effective_weight(self) -> Tensor:
        norm = self.weight.norm(dim=1)
        return self.weight * (self.gain / norm).unsqueeze(1)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.effective_weight(), self.bias)

    def extra_repr(self) -> str:
        return f"in_features={self.in_features}, out_features={self.out_features}"


@torch.no_grad()
def kaiming_init_(layer: WNLinear, fan_in: int | None = None, generator: torch.Generator | None = None) -> WNLinear:
    """Draw weights with variance 2/fan_in, zero the bias, and set the gain
    so the initial effective weights equal the raw draw."""
    if fan_in is None:
        fan_in = layer.in_features
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    layer.weight.normal_(0.0, std, generator=generator)
    layer.gain.copy_(layer.weight.norm(dim=1))
    layer.bias.zero_()
    return layer


@torch.no_grad()
def zero_init_(layer: WNLinear) -> WNLinear:
    """Zero the effective weights (gain and bias) while keeping a random
    direction matrix, so the layer starts as the zero map but can train."""
    layer.gain.zero_()
    layer.bias.zero_()
    return layer


class ResidualBlock(nn.Module):
    """Three dense layers (dim -> hidden -> hidden -> dim) with SiLU between,
    added back onto the input."""

    def __init__(self, dim: int, hidden: int, generator: torch.Generator | None = None):
        super().__init__()
        self.lin1 = kaiming_init_(WNLinear(dim, hidden), generator=generator)
        self.lin2 = kaiming_init_(WNLinear(hidden, hidden), generator=generator)
        self.lin3 = kaiming_init_(WNLinear(hidden, dim), generator=generator)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.lin3(silu(self.lin2(silu(self.lin1(x)))))


class ResNet(nn.Module):
    """Residual network: n_res residual blocks and a final projection.

    The projection is zero-initialized by default so the whole network
    starts as the zero map; callers that need a generic function can
    randomize it via ``randomize_output_``.
    """

    def __init__(
        self,
        dim: int,
        hidden: int,
        n_res: int,
        out_features: int | None = None,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        if n_res < 1:
            raise ValueError(f"n_res must be at least 1, got {n_res}")
        self.blocks = nn.ModuleList(ResidualBlock(dim, hidden, generator) for _ in range(n_res))
        self.proj = zero_init_(WNLinear(dim, out_features if out_features is not None else dim))

    @torch.no_grad()
    def randomize_output_(self, generator: torch.Generator | None = None, scale: float = 1.0) -> "ResNet":
        kaiming_init_(self.proj, generator=generator)
        if scale != 1.0:
            self.proj.gain.mul_(scale)
        return self

    def forward(self, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(x)
        return self.proj(x)


def backward(loss: Tensor, wrt: Iterable[Tensor], create_graph: bool = False) -> list[Tensor]:
    """Reverse-mode gradients of a scalar loss for parameters and/or inputs.

    Tensors that the loss does not reach get zero gradients rather than None.
    """
    if loss.dim() != 0:
        raise ValueError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    wrt = list(wrt)
    grads = torch.autograd.grad(loss, wrt, create_graph=create_graph, allow_unused=True)
    return [g if g is not None else torch.zeros_like(t) for g, t in zip(grads, wrt)]


def global_grad_norm(grads: Iterable[Tensor]) -> float:
    total = 0.0
    for g in grads:
        total += float(g.detach().pow(2).sum())
    return math.sqrt(total)


@torch.no_grad()
def clip_global_norm_(grads: list[Tensor], max_norm: float) -> float:
    """Scale all gradients so their joint norm is at most max_norm.

    Returns the pre-clip norm.
    """
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for g in grads:
            g.mul_(scale)
    return norm


class AdamW:
    """AdamW with decoupled weight decay over named parameters.

    Gradients are clipped to a global norm before the moment updates. Raises
    ``TrainingDivergedError`` when any gradient is non-finite. ``lr_scale``
    maps parameter-name prefixes to per-group learning-rate multipliers.
    """

    def __init__(
        self,
        named_params: Iterable[tuple[str, nn.Parameter]],
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 5e-5,
        clip_norm: float | None = 1.0,
        lr_scale: dict[str, float] | None = None,
    ):
        self.params = dict(named_params)
        if not self.params:
            raise ValueError("no parameters to optimize")
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.lr_scale = dict(lr_scale or {})
        self.step_count = 0
        self.exp_avg = {n: torch.zeros_like(p) for n, p in self.params.items()}
        self.exp_avg_sq = {n: torch.zeros_like(p) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _scale_for(self, name: str) -> float:
        for prefix, mult in self.lr_scale.items():
            if name.startswith(prefix):
                return mult
        return 1.0

    @torch.no_grad()
    def step(self) -> float:
        """Apply one update from the stored ``.grad`` fields; returns the
        pre-clip global gradient norm."""
        live = [(n, p) for n, p in self.params.items() if p.grad is not None]
        grads = [p.grad for _, p in live]
        if not live:
            return 0.0
        norm = float(torch.linalg.vector_norm(torch.stack(torch._foreach_norm(grads))))
        if not math.isfinite(norm):
            bad = next(n for n, p in live if not torch.isfinite(p.grad).all())
            raise TrainingDivergedError(f"non-finite gradient in {bad}")
        if self.clip_norm is not None and norm > self.clip_norm:
            torch._foreach_mul_(grads, self.clip_norm / (norm + 1e-6))
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        # group by learning-rate multiplier so each group updates in batched ops
        groups: dict[float, list[int]] = {}
        for k, (name, _) in enumerate(live):
            groups.setdefault(self._scale_for(name), []).append(k)
        for mult, idxs in groups.items():
            lr = self.lr * mult
            ps = [live[k][1] for k in idxs]
            gs = [grads[k] for k in idxs]
            ms = [self.exp_avg[live[k][0]] for k in idxs]
            vs = [self.exp_avg_sq[live[k][0]] for k in idxs]
            if self.weight_decay:
                torch._foreach_mul_(ps, 1.0 - lr * self.weight_decay)
            torch._foreach_mul_(ms, b1)
            torch._foreach_add_(ms, gs, alpha=1.0 - b1)
            torch._foreach_mul_(vs, b2)
            torch._foreach_addcmul_(vs, gs, gs, value=1.0 - b2)
            denom = torch._foreach_div(vs, bc2)
            torch._foreach_sqrt_(denom)
            torch._foreach_add_(denom, self.eps)
            torch._foreach_addcdiv_(ps, ms, denom, value=-lr / bc1)
        return norm

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "exp_avg": {n: t.detach().cpu().numpy().copy() for n, t in self.exp_avg.items()},
            "exp_avg_sq": {n: t.detach().cpu().numpy().copy() for n, t in self.exp_avg_sq.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step_count"])
        for n in self.params:
            self.exp_avg[n].copy_(torch.as_tensor(state["exp_avg"][n]))
            self.exp_avg_sq[n].copy_(torch.as_tensor(state["exp_avg_sq"][n]))


def save_arrays(path, arrays: dict[str, np.ndarray | Tensor], meta: dict | None = None) -> None:
    """Write named arrays as flat little-endian float32 with a JSON header."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if isinstance(arr, Tensor):
            arr = arr.detach().cpu().numpy()
        arr = np.asarray(arr, dtype="<f4")
        if not arr.flags.c_contiguous:
            arr = arr.copy(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = json.dumps({"meta": meta or {}, "entries": entries}).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read a checkpoint written by :func:`save_arrays`."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError(f"bad magic in {path}")
        (header_len,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(header_len).decode("utf-8"))
        payload = f.read()
    flat = np.frombuffer(payload, dtype="<f4")
    arrays = {}
    for entry in header["entries"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["offset"]
        arrays[entry["name"]] = flat[start : start + size].reshape(entry["shape"]).copy()
    return arrays, header["meta"]
