"""Affine coupling bijectors acting on flattened pixel patches.

A block splits the patch variables in two by a checkerboard over pixel
parity (all channels of a pixel travel together), rescales and shifts one
half from networks of the other, then does the same in the opposite
direction. Both passes are triangular maps, so the log-Jacobian-determinant
is just the sum of the (soft-clamped) scale outputs, and inversion is exact
arithmetic rather than iteration.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import Tensor, nn

from rgflow.nncore import ResNet


class NonFiniteInputError(ValueError):
    """Bijector fed NaN or infinity."""


def checkerboard_mask(m: int, C: int, parity: int) -> np.ndarray:
    """Boolean mask over a flattened (a, b, c) patch selecting pixels with
    (a + b) % 2 == parity, all channels included."""
    if parity not in (0, 1):
        raise ValueError(f"parity must be 0 or 1, got {parity}")
    mask = np.zeros(m * m * C, dtype=bool)
    for a in range(m):
        for b in range(m):
            if (a + b) % 2 == parity:
                base = (a * m + b) * C
                mask[base : base + C] = True
    return mask


def alternating_mask(dim: int, parity: int) -> np.ndarray:
    """Even/odd variable split for flat (non-patch) vectors."""
    if parity not in (0, 1):
        raise ValueError(f"parity must be 0 or 1, got {parity}")
    mask = np.zeros(dim, dtype=bool)
    mask[parity::2] = True
    return mask


class CouplingBlock(nn.Module):
    """One double-sided affine coupling over a masked variable split.

    The masked half conditions the transform of the unmasked half, then the
    freshly transformed half conditions the masked half. Scale outputs pass
    through a soft clamp ``c * tanh(s / c)`` so the map stays bijective and
    overflow-free for any parameter values.
    """

    def __init__(
        self,
        mask: np.ndarray,
        hidden: int,
        n_res: int,
        clamp: float = 8.0,
        generator: torch.Generator | None = None,
    ):
        super().__init__()
        mask = np.asarray(mask, dtype=bool)
        idx_on = np.flatnonzero(mask)
        idx_off = np.flatnonzero(~mask)
        if idx_on.size == 0 or idx_off.size == 0:
            raise ValueError("mask must select a proper nonempty subset")
        inv = np.empty(mask.size, dtype=np.int64)
        inv[np.concatenate([idx_on, idx_off])] = np.arange(mask.size)
        self.register_buffer("idx_on", torch.from_numpy(idx_on), persistent=False)
        self.register_buffer("idx_off", torch.from_numpy(idx_off), persistent=False)
        self.register_buffer("inv_perm", torch.from_numpy(inv), persistent=False)
        self.clamp = float(clamp)
        n_on, n_off = idx_on.size, idx_off.size
        self.scale1 = ResNet(n_on, hidden, n_res, out_features=n_off, generator=generator)
        self.shift1 = ResNet(n_on, hidden, n_res, out_features=n_off, generator=generator)
        self.scale2 = ResNet(n_off, hidden, n_res, out_features=n_on, generator=generator)
        self.shift2 = ResNet(n_off, hidden, n_res, out_features=n_on, generator=generator)

    @torch.no_grad()
    def randomize_(
        self,
        generator: torch.Generator | None = None,
        scale: float = 0.1,
        scale_s: float | None = None,
    ) -> "CouplingBlock":
        """Randomize the output projections so the block is no longer the
        identity (used for architecture tests on generic parameters).

        Shift projections are drawn at ``scale``; scale projections at
        ``scale_s`` (a tenth of that by default). Keeping the scale outputs
        small stops value magnitudes from compounding exponentially through
        deep stacks, which would otherwise saturate the clamp and swamp
        perturbations below the floating-point grid.
        """
        if scale_s is None:
            scale_s = 0.1 * scale
        for net in (self.shift1, self.shift2):
            net.randomize_output_(generator, scale=scale)
        for net in (self.scale1, self.scale2):
            net.randomize_output_(generator, scale=scale_s)
        return self

    def _soft_clamp(self, s: Tensor) -> Tensor:
        return self.clamp * torch.tanh(s / self.clamp)

    @staticmethod
    def _check_finite(x: Tensor) -> None:
        if not torch.isfinite(x).all():
            raise NonFiniteInputError("coupling input contains NaN or infinity")

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        self._check_finite(x)
        x1 = x.index_select(-1, self.idx_on)
        x2 = x.index_select(-1, self.idx_off)
        s1 = self._soft_clamp(self.scale1(x1))
        x2 = x2 * torch.exp(s1) + self.shift1(x1)
        logdet = s1.sum(-1)
        s2 = self._soft_clamp(self.scale2(x2))
        x1 = x1 * torch.exp(s2) + self.shift2(x2)
        logdet = logdet + s2.sum(-1)
        y = torch.cat([x1, x2], dim=-1).index_select(-1, self.inv_perm)
        return y, logdet

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        self._check_finite(y)
        y1 = y.index_select(-1, self.idx_on)
        y2 = y.index_select(-1, self.idx_off)
        s2 = self._soft_clamp(self.scale2(y2))
        x1 = (y1 - self.shift2(y2)) * torch.exp(-s2)
        logdet = -s2.sum(-1)
        s1 = self._soft_clamp(self.scale1(x1))
        x2 = (y2 - self.shift1(x1)) * torch.exp(-s1)
        logdet = logdet - s1.sum(-1)
        x = torch.cat([x1, x2], dim=-1).index_select(-1, self.inv_perm)
        return x, logdet


class BijectorStack(nn.Module):
    """Composition of coupling blocks; inverse runs them in reverse order."""

    def __init__(self, blocks: list[CouplingBlock] | None = None):
        super().__init__()
        self.blocks = nn.ModuleList(blocks or [])

    def __len__(self) -> int:
        return len(self.blocks)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        logdet = torch.zeros(x.shape[:-1], dtype=x.dtype, device=x.device)
        for block in self.blocks:
            x, ld = block(x)
            logdet = logdet + ld
        return x, logdet

    def inverse(self, y: Tensor) -> tuple[Tensor, Tensor]:
        logdet = torch.zeros(y.shape[:-1], dtype=y.dtype, device=y.device)
        for block in reversed(self.blocks):
            y, ld = block.inverse(y)
            logdet = logdet + ld
        return y, logdet

    @torch.no_grad()
    def randomize_(
        self, generator: torch.Generator | None = None, scale: float = 0.1, scale_s: float | None = None
    ) -> "BijectorStack":
        for block in self.blocks:
            block.randomize_(generator, scale=scale, scale_s=scale_s)
        return self


def checkerboard_stack(
    n_blocks: int,
    m: int,
    C: int,
    hidden: int,
    n_res: int,
    clamp: float = 8.0,
    generator: torch.Generator | None = None,
) -> BijectorStack:
    """Stack of patch couplings with mask parity alternating block to block,
    so both checkerboard halves get transformed by networks of the other."""
    blocks = [
        CouplingBlock(checkerboard_mask(m, C, parity=k % 2), hidden, n_res, clamp, generator)
        for k in range(n_blocks)
    ]
    return BijectorStack(blocks)
