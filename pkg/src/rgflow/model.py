"""The hierarchical flow: local bijectors assembled into an exact bijection
between images and a pyramid of per-level latent variables.

Each level applies a stack of coupling blocks on shifted patches (the
disentangler, reducing correlations across patch boundaries) followed by a
stack on aligned patches (the decimator). The decimator's stride-2 quarter
continues to the next level; the remaining three quarters are emitted as
that level's latent variables. The top level decimates everything. Blocks
within a level share parameters across spatial positions, so patches ride
the batch dimension.

Both directions accumulate the exact log-Jacobian-determinant, giving exact
likelihoods under a factorized prior, and per-level temperature scaling of
the prior at sampling time.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor, nn

from rgflow import lattice
from rgflow.coupling import BijectorStack, CouplingBlock, alternating_mask, checkerboard_stack
from rgflow.lattice import LatticeSpec
from rgflow.nncore import load_arrays, save_arrays


class NumericalOverflowError(RuntimeError):
    """Log-probability evaluated to NaN or infinity."""


class LaplacianPrior:
    """Factorized Laplacian with scale b: heavy-tailed along each axis, which
    breaks the rotational symmetry a Gaussian prior would leave intact."""

    kind = "laplacian"

    def __init__(self, scale: float = 1.0):
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.scale = float(scale)

    def log_prob(self, z: Tensor) -> Tensor:
        b = self.scale
        return -z.abs() / b - np.log(2.0 * b)

    def sample(
        self,
        shape: tuple[int, ...],
        temperature: float = 1.0,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> Tensor:
        b = self.scale * temperature
        r = torch.rand(shape, generator=generator, dtype=dtype)
        sign = torch.where(torch.rand(shape, generator=generator, dtype=dtype) < 0.5, -1.0, 1.0)
        return -b * sign * torch.log1p(-r)


class GaussianPrior:
    """Factorized zero-mean Gaussian with standard deviation sigma."""

    kind = "gaussian"

    def __init__(self, scale: float = 1.0):
        if scale <= 0:
            raise ValueError(f"scale must be positive, got {scale}")
        self.scale = float(scale)

    def log_prob(self, z: Tensor) -> Tensor:
        s = self.scale
        return -(z**2) / (2.0 * s * s) - 0.5 * np.log(2.0 * np.pi * s * s)

    def sample(
        self,
        shape: tuple[int, ...],
        temperature: float = 1.0,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> Tensor:
        # the 1/T power of a Gaussian rescales its variance by T
        std = self.scale * np.sqrt(temperature)
        return torch.randn(shape, generator=generator, dtype=dtype) * std


def make_prior(kind: str, scale: float = 1.0):
    if kind == "laplacian":
        return LaplacianPrior(scale)
    if kind == "gaussian":
        return GaussianPrior(scale)
    raise ValueError(f"unknown prior kind {kind!r}")


@dataclass(frozen=True)
class TemperatureSchedule:
    """Per-level sampling temperatures; T = 1 everywhere recovers the prior."""

    temps: tuple[float, ...]

    def __post_init__(self):
        if not self.temps or any(t <= 0 for t in self.temps):
            raise ValueError(f"temperatures must be positive, got {self.temps}")

    @classmethod
    def uniform(cls, T: float, n_levels: int) -> "TemperatureSchedule":
        return cls((float(T),) * n_levels)

    @classmethod
    def coerce(cls, temps, n_levels: int) -> "TemperatureSchedule":
        if temps is None:
            return cls.uniform(1.0, n_levels)
        if isinstance(temps, TemperatureSchedule):
            if len(temps.temps) != n_levels:
                raise ValueError(f"schedule has {len(temps.temps)} levels, model has {n_levels}")
            return temps
        if isinstance(temps, (int, float)):
            return cls.uniform(float(temps), n_levels)
        temps = tuple(float(t) for t in temps)
        if len(temps) != n_levels:
            raise ValueError(f"schedule has {len(temps)} levels, model has {n_levels}")
        return cls(temps)


class LatentPyramid:
    """Latent variables organized per level, finest first.

    Level h holds a (batch, n_h) tensor whose columns follow the row-major
    scan of that level's decimated positions, channel-minor. The flat view
    concatenates levels in order, matching the lattice module's flat
    indexing.
    """

    def __init__(self, levels: Sequence[Tensor]):
        levels = list(levels)
        if not levels:
            raise ValueError("pyramid needs at least one level")
        b = levels[0].shape[0]
        if any(t.dim() != 2 or t.shape[0] != b for t in levels):
            raise ValueError("levels must be (batch, n_h) tensors with a common batch")
        self.levels = levels

    @property
    def batch_size(self) -> int:
        return self.levels[0].shape[0]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def counts(self) -> list[int]:
        return [t.shape[1] for t in self.levels]

    def flat(self) -> Tensor:
        return torch.cat(self.levels, dim=1)

    @classmethod
    def from_flat(cls, flat: Tensor, counts: Sequence[int]) -> "LatentPyramid":
        if flat.dim() != 2 or flat.shape[1] != sum(counts):
            raise ValueError(f"flat latents must be (batch, {sum(counts)}), got {tuple(flat.shape)}")
        return cls(list(torch.split(flat, list(counts), dim=1)))

    def clone(self) -> "LatentPyramid":
        return LatentPyramid([t.clone() for t in self.levels])


class _RgLevel(nn.Module):
    """One level's block stacks plus its split/merge index maps."""

    def __init__(
        self,
        spec: LatticeSpec,
        h: int,
        dis: BijectorStack | None,
        dec: BijectorStack,
    ):
        super().__init__()
        self.h = h
        self.size = spec.level_size(h)
        self.m = spec.m
        self.C = spec.C
        self.is_top = h == spec.top_level
        self.dis = dis
        self.dec = dec
        if not self.is_top:
            s = self.size
            ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
            keep = (ii % 2 == 0) & (jj % 2 == 0)
            keep_flat = (ii[keep] * s + jj[keep]).astype(np.int64)
            dpos = lattice.decimated_positions(spec, h)
            dec_flat = (dpos[:, 0] * s + dpos[:, 1]).astype(np.int64)
            inv = np.empty(s * s, dtype=np.int64)
            inv[keep_flat] = np.arange(keep_flat.size)
            inv[dec_flat] = keep_flat.size + np.arange(dec_flat.size)
            self.register_buffer("keep_idx", torch.from_numpy(keep_flat), persistent=False)
            self.register_buffer("dec_idx", torch.from_numpy(dec_flat), persistent=False)
            self.register_buffer("inv_idx", torch.from_numpy(inv), persistent=False)

    def _rows(self, x: Tensor) -> Tensor:
        B, S, _, C = x.shape
        d = S // self.m
        x = x.reshape(B, d, self.m, d, self.m, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B * d * d, self.m * self.m * C)

    def _unrows(self, rows: Tensor, B: int) -> Tensor:
        S, C = self.size, self.C
        d = S // self.m
        x = rows.reshape(B, d, d, self.m, self.m, C).permute(0, 1, 3, 2, 4, 5)
        return x.reshape(B, S, S, C)

    def _run_stack(self, stack: BijectorStack, x: Tensor, inverse: bool) -> tuple[Tensor, Tensor]:
        B = x.shape[0]
        rows = self._rows(x)
        rows, ld = stack.inverse(rows) if inverse else stack(rows)
        return self._unrows(rows, B), ld.reshape(B, -1).sum(dim=1)

    def _shifted(self, x: Tensor, back: bool) -> Tensor:
        s = self.m // 2
        shift = (s, s) if back else (-s, -s)
        return torch.roll(x, shifts=shift, dims=(1, 2))

    def split(self, y: Tensor) -> tuple[Tensor | None, Tensor]:
        B, S, _, C = y.shape
        if self.is_top:
            return None, y.reshape(B, S * S * C)
        flat = y.reshape(B, S * S, C)
        x_next = flat.index_select(1, self.keep_idx).reshape(B, S // 2, S // 2, C)
        z = flat.index_select(1, self.dec_idx).reshape(B, -1)
        return x_next, z

    def merge(self, x_next: Tensor | None, z: Tensor) -> Tensor:
        B = z.shape[0]
        S, C = self.size, self.C
        if self.is_top:
            return z.reshape(B, S, S, C)
        kept = x_next.reshape(B, (S // 2) * (S // 2), C)
        decim = z.reshape(B, -1, C)
        return torch.cat([kept, decim], dim=1).index_select(1, self.inv_idx).reshape(B, S, S, C)

    def forward_step(self, x: Tensor) -> tuple[Tensor | None, Tensor, Tensor]:
        logdet = x.new_zeros(x.shape[0])
        if self.dis is not None:
            x = self._shifted(x, back=False)
            x, ld = self._run_stack(self.dis, x, inverse=False)
            x = self._shifted(x, back=True)
            logdet = logdet + ld
        y, ld = self._run_stack(self.dec, x, inverse=False)
        logdet = logdet + ld
        x_next, z = self.split(y)
        return x_next, z, logdet

    def inverse_step(self, x_next: Tensor | None, z: Tensor) -> tuple[Tensor, Tensor]:
        y = self.merge(x_next, z)
        x, logdet = self._run_stack(self.dec, y, inverse=True)
        if self.dis is not None:
            x = self._shifted(x, back=False)
            x, ld = self._run_stack(self.dis, x, inverse=True)
            x = self._shifted(x, back=True)
            logdet = logdet + ld
        return x, logdet


def _normalize_n_layer(n_layer, n_levels: int) -> tuple[int, ...]:
    if isinstance(n_layer, int):
        n_layer = (n_layer,) * n_levels
    n_layer = tuple(int(n) for n in n_layer)
    if len(n_layer) != n_levels:
        raise ValueError(f"n_layer has {len(n_layer)} entries for {n_levels} levels")
    if any(n < 2 or n % 2 for n in n_layer):
        raise ValueError(f"each level needs an even block count of at least 2, got {n_layer}")
    return n_layer


class RgFlowModel(nn.Module):
    """Bijection between images (batch, L, L, C) and latent pyramids, with a
    factorized prior giving exact log-likelihoods.

    ``n_layer`` counts coupling blocks per level, split evenly between the
    disentangler and decimator stacks; the top level has no disentangler and
    keeps all its blocks in the decimator. ``share_levels`` reuses one pair
    of stacks at every level.
    """

    def __init__(
        self,
        spec: LatticeSpec,
        n_layer=4,
        n_res: int = 4,
        hidden: int = 512,
        prior: str = "laplacian",
        prior_scale: float = 1.0,
        share_levels: bool = False,
        clamp: float = 8.0,
        seed: int = 0,
    ):
        super().__init__()
        self.spec = spec
        n_levels = spec.top_level + 1
        n_layer = _normalize_n_layer(n_layer, n_levels)
        if share_levels and len(set(n_layer)) != 1:
            raise ValueError("shared levels require a uniform n_layer")
        self.config = {
            "L": spec.L,
            "m": spec.m,
            "C": spec.C,
            "n_layer": list(n_layer),
            "n_res": n_res,
            "hidden": hidden,
            "prior": prior,
            "prior_scale": prior_scale,
            "share_levels": share_levels,
            "clamp": clamp,
        }
        self.prior = make_prior(prior, prior_scale)
        g = torch.Generator().manual_seed(seed)

        def stack(n_blocks):
            return checkerboard_stack(n_blocks, spec.m, spec.C, hidden, n_res, clamp, g)

        if share_levels:
            shared_dis = stack(n_layer[0] // 2)
            shared_dec = stack(n_layer[0] // 2)
            levels = [
                _RgLevel(spec, h, shared_dis if h < spec.top_level else None, shared_dec)
                for h in range(n_levels)
            ]
        else:
            levels = []
            for h in range(n_levels):
                if h < spec.top_level:
                    levels.append(_RgLevel(spec, h, stack(n_layer[h] // 2), stack(n_layer[h] // 2)))
                else:
                    # no shifted stack at the top; all blocks go to the decimator
                    levels.append(_RgLevel(spec, h, None, stack(n_layer[h])))
        self.levels = nn.ModuleList(levels)
        self.latent_counts = lattice.latent_counts(spec)

    @torch.no_grad()
    def randomize_(self, seed: int = 0, scale: float = 0.1, scale_s: float | None = None) -> "RgFlowModel":
        """Give every coupling block small random output maps, turning the
        identity-initialized model into a generic bijection."""
        g = torch.Generator().manual_seed(seed)
        for level in self.levels:
            if level.dis is not None:
                level.dis.randomize_(g, scale=scale, scale_s=scale_s)
            level.dec.randomize_(g, scale=scale, scale_s=scale_s)
        return self

    def _check_image(self, x: Tensor) -> None:
        L, C = self.spec.L, self.spec.C
        if x.dim() != 4 or x.shape[1:] != (L, L, C):
            raise ValueError(f"expected (batch, {L}, {L}, {C}) images, got {tuple(x.shape)}")

    def rg_step_forward(self, h: int, x: Tensor) -> tuple[Tensor | None, Tensor, Tensor]:
        """One level of the analysis direction: returns the coarse state (or
        None at the top), the level's latents, and the step's logdet."""
        level = self.levels[h]
        s = level.size
        if x.dim() != 4 or x.shape[1:] != (s, s, self.spec.C):
            raise ValueError(f"level {h} expects (batch, {s}, {s}, {self.spec.C}), got {tuple(x.shape)}")
        return level.forward_step(x)

    def rg_step_inverse(self, h: int, x_next: Tensor | None, z: Tensor) -> tuple[Tensor, Tensor]:
        """Inverse of :meth:`rg_step_forward`."""
        level = self.levels[h]
        n_h = self.latent_counts[h]
        if z.dim() != 2 or z.shape[1] != n_h:
            raise ValueError(f"level {h} latents must be (batch, {n_h}), got {tuple(z.shape)}")
        if level.is_top:
            if x_next is not None:
                raise ValueError("top level takes no coarse state")
        else:
            s = level.size // 2
            if x_next is None or x_next.shape[1:] != (s, s, self.spec.C):
                raise ValueError(f"level {h} expects coarse (batch, {s}, {s}, {self.spec.C})")
        return level.inverse_step(x_next, z)

    def encode(self, x: Tensor) -> tuple[LatentPyramid, Tensor]:
        """Image -> latent pyramid, plus the analysis-direction logdet."""
        self._check_image(x)
        logdet = x.new_zeros(x.shape[0])
        zs = []
        cur = x
        for h in range(len(self.levels)):
            cur, z, ld = self.levels[h].forward_step(cur)
            zs.append(z)
            logdet = logdet + ld
        return LatentPyramid(zs), logdet

    def decode(self, z: LatentPyramid) -> tuple[Tensor, Tensor]:
        """Latent pyramid -> image, plus the synthesis-direction logdet."""
        if z.counts() != self.latent_counts:
            raise ValueError(f"pyramid sizes {z.counts()} do not match {self.latent_counts}")
        cur = None
        logdet = z.levels[0].new_zeros(z.batch_size)
        for h in range(len(self.levels) - 1, -1, -1):
            cur, ld = self.levels[h].inverse_step(cur, z.levels[h])
            logdet = logdet + ld
        return cur, logdet

    def encode_flat(self, x: Tensor) -> tuple[Tensor, Tensor]:
        z, logdet = self.encode(x)
        return z.flat(), logdet

    def decode_flat(self, zflat: Tensor) -> tuple[Tensor, Tensor]:
        return self.decode(LatentPyramid.from_flat(zflat, self.latent_counts))

    def prior_log_prob(self, z: LatentPyramid) -> Tensor:
        total = z.levels[0].new_zeros(z.batch_size)
        for t in z.levels:
            total = total + self.prior.log_prob(t).sum(dim=1)
        return total

    def log_prob(self, x: Tensor) -> Tensor:
        """Exact log-density of images under the flow."""
        z, logdet = self.encode(x)
        lp = self.prior_log_prob(z) + logdet
        if not torch.isfinite(lp.detach()).all():
            raise NumericalOverflowError("log-probability is not finite")
        return lp

    def sample_latents(
        self,
        n: int,
        temps=None,
        generator: torch.Generator | None = None,
        dtype: torch.dtype = torch.float32,
    ) -> LatentPyramid:
        sched = TemperatureSchedule.coerce(temps, len(self.levels))
        levels = [
            self.prior.sample((n, n_h), temperature=sched.temps[h], generator=generator, dtype=dtype)
            for h, n_h in enumerate(self.latent_counts)
        ]
        return LatentPyramid(levels)

    def sample(self, n: int, temps=None, seed: int | None = None, generator: torch.Generator | None = None) -> Tensor:
        """Draw images by sampling the (temperature-scaled) prior and decoding."""
        if generator is None:
            generator = torch.Generator()
            if seed is not None:
                generator.manual_seed(seed)
        dtype = next(self.parameters()).dtype
        z = self.sample_latents(n, temps=temps, generator=generator, dtype=dtype)
        x, _ = self.decode(z)
        return x

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"model": self.config}
        if extra_meta:
            meta.update(extra_meta)
        save_arrays(path, dict(self.named_parameters()), meta)

    @classmethod
    def load(cls, path) -> tuple["RgFlowModel", dict]:
        arrays, meta = load_arrays(path)
        cfg = meta["model"]
        model = cls(
            LatticeSpec(cfg["L"], cfg["m"], cfg["C"]),
            n_layer=cfg["n_layer"],
            n_res=cfg["n_res"],
            hidden=cfg["hidden"],
            prior=cfg["prior"],
            prior_scale=cfg["prior_scale"],
            share_levels=cfg["share_levels"],
            clamp=cfg["clamp"],
        )
        model.load_parameters(arrays)
        return model, meta

    @torch.no_grad()
    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]}")
        for name, p in params.items():
            p.copy_(torch.from_numpy(arrays[name]).to(p.dtype))


class FlatFlow(nn.Module):
    """Flow over flat low-dimensional vectors (no spatial hierarchy), built
    from the same coupling blocks with even/odd variable masks."""

    def __init__(
        self,
        dim: int = 2,
        n_blocks: int = 8,
        hidden: int = 64,
        n_res: int = 2,
        prior: str = "laplacian",
        prior_scale: float = 1.0,
        clamp: float = 8.0,
        seed: int = 0,
    ):
        super().__init__()
        if n_blocks < 1:
            raise ValueError(f"n_blocks must be at least 1, got {n_blocks}")
        if dim < 2:
            raise ValueError(f"dim must be at least 2, got {dim}")
        self.dim = dim
        self.config = {
            "dim": dim,
            "n_blocks": n_blocks,
            "hidden": hidden,
            "n_res": n_res,
            "prior": prior,
            "prior_scale": prior_scale,
            "clamp": clamp,
        }
        self.prior = make_prior(prior, prior_scale)
        g = torch.Generator().manual_seed(seed)
        blocks = [
            CouplingBlock(alternating_mask(dim, k % 2), hidden, n_res, clamp, generator=g)
            for k in range(n_blocks)
        ]
        self.stack = BijectorStack(blocks)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        if x.dim() != 2 or x.shape[1] != self.dim:
            raise ValueError(f"expected (batch, {self.dim}) points, got {tuple(x.shape)}")
        return self.stack(x)

    def decode(self, z: Tensor) -> tuple[Tensor, Tensor]:
        if z.dim() != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected (batch, {self.dim}) latents, got {tuple(z.shape)}")
        return self.stack.inverse(z)

    def log_prob(self, x: Tensor) -> Tensor:
        z, logdet = self.encode(x)
        lp = self.prior.log_prob(z).sum(dim=1) + logdet
        if not torch.isfinite(lp.detach()).all():
            raise NumericalOverflowError("log-probability is not finite")
        return lp

    def sample(self, n: int, temperature: float = 1.0, seed: int | None = None) -> Tensor:
        generator = torch.Generator()
        if seed is not None:
            generator.manual_seed(seed)
        dtype = next(self.parameters()).dtype
        z = self.prior.sample((n, self.dim), temperature=temperature, generator=generator, dtype=dtype)
        x, _ = self.decode(z)
        return x

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"flat_flow": self.config}
        if extra_meta:
            meta.update(extra_meta)
        save_arrays(path, dict(self.named_parameters()), meta)

    @classmethod
    def load(cls, path) -> tuple["FlatFlow", dict]:
        arrays, meta = load_arrays(path)
        model = cls(**meta["flat_flow"])
        params = dict(model.named_parameters())
        with torch.no_grad():
            for name, p in params.items():
                p.copy_(torch.from_numpy(arrays[name]).to(p.dtype))
        return model, meta


def flat_flow_2d(n_blocks: int, **kwargs) -> FlatFlow:
    """Two-variable flow for point-cloud densities."""
    return FlatFlow(dim=2, n_blocks=n_blocks, **kwargs)
