"""Analyses on top of a trained flow: receptive fields, latent sweeps,
scale-wise mixing, and causal-cone-restricted inpainting.

A latent's receptive field is the expected absolute image response to an
infinitesimal change of that latent, channel-summed per pixel and averaged
over prior draws; by construction it vanishes outside the latent's
generation cone for any parameter values. Inpainting optimizes only the
latents inside the corrupted region's inference cone, so the free-variable
count scales with the number of levels rather than the pixel count.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

from rgflow import lattice
from rgflow.lattice import LatentIndex, Region
from rgflow.model import LatentPyramid, RgFlowModel
from rgflow.nncore import AdamW

PSNR_SENTINEL_DB = 200.0


@dataclass
class ReceptiveField:
    index: LatentIndex
    map: np.ndarray  # (L, L), non-negative
    strength: float  # pixel-wise mean of the map


def _decode_image(model: RgFlowModel):
    def fn(zflat: Tensor) -> Tensor:
        return model.decode_flat(zflat)[0]

    return fn


def receptive_field(
    model: RgFlowModel,
    l: LatentIndex | int,
    n_samples: int = 64,
    seed: int = 0,
) -> ReceptiveField:
    """Monte Carlo receptive field of one latent via forward sensitivity."""
    spec = model.spec
    flat = l if isinstance(l, int) else lattice.flat_index(spec, l)
    index = lattice.latent_index(spec, flat)
    dtype = next(model.parameters()).dtype
    g = torch.Generator().manual_seed(seed)
    z = model.sample_latents(n_samples, generator=g, dtype=dtype).flat()
    tangent = torch.zeros_like(z)
    tangent[:, flat] = 1.0
    _, jv = torch.func.jvp(_decode_image(model), (z,), (tangent,))
    rf = jv.detach().abs().sum(dim=3).mean(dim=0).cpu().numpy()
    return ReceptiveField(index=index, map=rf, strength=float(rf.mean()))


def rf_strengths(model: RgFlowModel, n_samples: int = 8, seed: int = 0) -> np.ndarray:
    """Receptive-field strength of every latent in one batched sweep.

    Assembles the full Jacobian of the decoder per prior sample (one
    vectorized reverse pass), so it is meant for modest lattice sizes or
    small sample counts.
    """
    spec = model.spec
    dtype = next(model.parameters()).dtype
    g = torch.Generator().manual_seed(seed)
    total = np.zeros(spec.n_variables)
    fn = _decode_image(model)
    for k in range(n_samples):
        z = model.sample_latents(1, generator=g, dtype=dtype).flat()
        jac = torch.autograd.functional.jacobian(lambda t: fn(t).squeeze(0), z, vectorize=True)
        jac = jac.squeeze(3)  # (L, L, C, n_variables)
        total += jac.abs().sum(dim=2).mean(dim=(0, 1)).cpu().numpy()
    return total / n_samples


def rf_histogram(
    model: RgFlowModel,
    level: int,
    n_samples: int = 8,
    seed: int = 0,
    bins: int = 30,
) -> dict:
    """Histogram of receptive-field strengths for one level's latents."""
    spec = model.spec
    spec._check_level(level)
    offs = lattice.latent_offsets(spec)
    strengths = rf_strengths(model, n_samples=n_samples, seed=seed)[offs[level] : offs[level + 1]]
    if strengths.size == 0:
        return {"level": level, "strengths": strengths, "edges": np.zeros(0), "counts": np.zeros(0, dtype=int)}
    counts, edges = np.histogram(strengths, bins=bins)
    return {"level": level, "strengths": strengths, "edges": edges, "counts": counts}


def save_histogram_csv(path, hist: dict) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(hist["edges"][:-1], hist["edges"][1:], hist["counts"]):
            writer.writerow([f"{lo:.8g}", f"{hi:.8g}", int(c)])


def vary_latent(model: RgFlowModel, z: LatentPyramid | Tensor, l: LatentIndex | int, values) -> Tensor:
    """Decode a latent vector with one slot swept over the given values,
    all other slots frozen."""
    spec = model.spec
    flat = l if isinstance(l, int) else lattice.flat_index(spec, l)
    zflat = z.flat() if isinstance(z, LatentPyramid) else z
    if zflat.dim() != 2 or zflat.shape[0] != 1:
        raise ValueError("latent sweep needs a single latent vector")
    values = torch.as_tensor(values, dtype=zflat.dtype)
    sweep = zflat.repeat(len(values), 1)
    sweep[:, flat] = values
    with torch.no_grad():
        images, _ = model.decode_flat(sweep)
    return images


def splice_pyramids(zA: LatentPyramid, zB: LatentPyramid, threshold: int) -> LatentPyramid:
    """Levels at or above the threshold come from A, the rest from B."""
    if zA.counts() != zB.counts():
        raise ValueError("pyramids have different shapes")
    if not 0 <= threshold <= zA.n_levels:
        raise ValueError(f"threshold {threshold} outside [0, {zA.n_levels}]")
    return LatentPyramid([(zA if h >= threshold else zB).levels[h] for h in range(zA.n_levels)])


def mix_hyperbolic(model: RgFlowModel, xA: Tensor, xB: Tensor, threshold: int) -> Tensor:
    """Scale-wise mixing: large scales from A, scales below the threshold
    from B. The degenerate thresholds return the source image unchanged."""
    n_levels = model.spec.top_level + 1
    if not 0 <= threshold <= n_levels:
        raise ValueError(f"threshold {threshold} outside [0, {n_levels}]")
    if threshold == 0:
        return xA.clone()
    if threshold == n_levels:
        return xB.clone()
    with torch.no_grad():
        zA, _ = model.encode(xA)
        zB, _ = model.encode(xB)
        mixed, _ = model.decode(splice_pyramids(zA, zB, threshold))
    return mixed


def mix_linear(model: RgFlowModel, xA: Tensor, xB: Tensor, lam: float) -> Tensor:
    """Latent-space interpolation: decode(lam * z_A + (1 - lam) * z_B)."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"coefficient {lam} outside [0, 1]")
    with torch.no_grad():
        zA, _ = model.encode_flat(xA)
        zB, _ = model.encode_flat(xB)
        mixed, _ = model.decode_flat(lam * zA + (1.0 - lam) * zB)
    return mixed


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in decibels for unit-range images."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    eps = 1e-6
    if x.min() < -eps or x.max() > 1 + eps or y.min() < -eps or y.max() > 1 + eps:
        raise ValueError("images must have values in [0, 1]")
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_SENTINEL_DB)


@dataclass
class InpaintResult:
    image: Tensor  # model-space image with the region replaced
    objective: list[float]  # log-likelihood trace over optimization steps
    free_count: int
    steps_run: int
    converged: bool  # early-stopped on a plateau rather than exhausting budget


def corrupt_region(x: Tensor, region: Region, value: float = 0.0) -> Tensor:
    out = x.clone()
    out[:, region.row : region.row + region.height, region.col : region.col + region.width, :] = value
    return out


def inpaint(
    model: RgFlowModel,
    x_corrupt: Tensor,
    region: Region,
    budget: int = 2000,
    free_mask: np.ndarray | None = None,
    n_init: int = 200,
    lr: float = 0.05,
    tol: float = 1e-3,
    patience: int = 50,
    seed: int = 0,
    init_chunk: int = 64,
) -> InpaintResult:
    """Fill a corrupted region by likelihood ascent over a restricted set of
    latents.

    The free set defaults to the region's inference cone. Free latents are
    drawn ``n_init`` times from the prior and the best start is refined with
    Adam on the log-likelihood of the composite image (generated patch
    pasted into the input, then re-encoded). Pixels outside the region pass
    through bit-identical; latents outside the free set never move.
    """
    spec = model.spec
    if x_corrupt.dim() != 4 or x_corrupt.shape[0] != 1:
        raise ValueError("inpainting works on a single (1, L, L, C) image")
    if free_mask is None:
        free_mask = lattice.inference_cone(spec, region).flat_mask()
    free_idx = torch.from_numpy(np.flatnonzero(free_mask))
    n_free = int(free_idx.numel())
    if region.is_empty or n_free == 0:
        return InpaintResult(x_corrupt.clone(), [], 0, 0, True)
    dtype = x_corrupt.dtype
    rmask = torch.from_numpy(region.mask(spec.L)).reshape(1, spec.L, spec.L, 1)

    def objective(zflat: Tensor) -> Tensor:
        xg, _ = model.decode_flat(zflat)
        xf = torch.where(rmask, xg, x_corrupt)
        zf, logdet = model.encode(xf)
        return model.prior_log_prob(zf) + logdet

    with torch.no_grad():
        z0, _ = model.encode_flat(x_corrupt)
        g = torch.Generator().manual_seed(seed)
        best_start, best_obj = None, -np.inf
        for lo in range(0, n_init, init_chunk):
            k = min(init_chunk, n_init - lo)
            cand = z0.repeat(k, 1)
            draws = model.prior.sample((k, n_free), generator=g, dtype=dtype)
            cand[:, free_idx] = draws
            obj = objective(cand)
            obj = torch.where(torch.isfinite(obj), obj, torch.full_like(obj, -np.inf))
            top = int(obj.argmax())
            if float(obj[top]) > best_obj:
                best_obj = float(obj[top])
                best_start = cand[top : top + 1].clone()

    zfree = best_start[0, free_idx].clone().requires_grad_(True)
    opt = AdamW([("zfree", zfree)], lr=lr, weight_decay=0.0, clip_norm=None)
    trace: list[float] = []
    best_free = zfree.detach().clone()
    best_obj = -np.inf
    since_improve = 0
    converged = False
    steps = 0
    for steps in range(1, budget + 1):
        zfull = z0.clone()
        zfull[0, free_idx] = zfree
        obj = objective(zfull)[0]
        val = float(obj.detach())
        trace.append(val)
        if np.isfinite(val) and val > best_obj + tol:
            best_obj = val
            best_free = zfree.detach().clone()
            since_improve = 0
        else:
            since_improve += 1
            if since_improve >= patience:
                converged = True
                break
        opt.zero_grad()
        (-obj).backward()
        opt.step()
    with torch.no_grad():
        zfull = z0.clone()
        zfull[0, free_idx] = best_free
        xg, _ = model.decode_flat(zfull)
        out = torch.where(rmask, xg, x_corrupt)
    return InpaintResult(out, trace, n_free, steps, converged)
