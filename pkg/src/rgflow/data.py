"""Synthetic datasets, pixel preprocessing, and dataset persistence.

The oval datasets place one anti-aliased ellipse in each cell of a 4 x 4
grid. Variant 1 shares one color per image (orientations independent);
variant 2 shares one orientation (colors independent), so each variant has
a single global feature and sixteen local ones. The pinwheel is a flat 2-D
point cloud with rotationally repeated arms.

Preprocessing maps 8-bit pixels to an unbounded model space: uniform
dequantization to the unit interval, then a bounded-logit transform. The
tracked log-Jacobian plus the bit depth convention makes bits-per-dimension
scores comparable across models: an exactly-uniform density over 8-bit
noise scores 8.0.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import Tensor


class DatasetIntegrityError(ValueError):
    """Persisted dataset does not match its manifest."""


@dataclass(frozen=True)
class OvalSpec:
    """One rendered ellipse: center (row, col), orientation in radians,
    RGB color in [0, 1], and semi-axes in pixels."""

    center: tuple[float, float]
    orientation: float
    color: tuple[float, ...]
    axes: tuple[float, float]


@dataclass
class DatasetManifest:
    name: str
    n: int
    L: int
    C: int
    seed: int
    params: dict = field(default_factory=dict)
    sha256: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        return cls(**json.loads(text))


def _pixel_checksum(images8: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(images8).tobytes()).hexdigest()


class Dataset:
    """8-bit images plus their manifest; optionally the oval parameters that
    generated them (kept in memory for statistics, not persisted)."""

    def __init__(self, images8: np.ndarray, manifest: DatasetManifest, ovals=None):
        images8 = np.asarray(images8, dtype=np.uint8)
        if images8.ndim != 4:
            raise ValueError(f"images must be (n, L, L, C), got {images8.shape}")
        if images8.shape[0] != manifest.n:
            raise ValueError(f"manifest says {manifest.n} images, got {images8.shape[0]}")
        self.images8 = images8
        self.manifest = manifest
        self.ovals = ovals
        if not manifest.sha256:
            manifest.sha256 = _pixel_checksum(images8)

    def __len__(self) -> int:
        return self.images8.shape[0]

    def float01(self) -> np.ndarray:
        return self.images8.astype(np.float64) / 255.0

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i, img in enumerate(self.images8):
            arr = img[..., 0] if img.shape[-1] == 1 else img
            Image.fromarray(arr).save(directory / f"{i:06d}.png")
        (directory / "manifest.json").write_text(self.manifest.to_json())

    @classmethod
    def load(cls, directory) -> "Dataset":
        directory = Path(directory)
        manifest = DatasetManifest.from_json((directory / "manifest.json").read_text())
        images = []
        for i in range(manifest.n):
            path = directory / f"{i:06d}.png"
            if not path.exists():
                raise DatasetIntegrityError(f"missing image {path}")
            arr = np.asarray(Image.open(path))
            if arr.ndim == 2:
                arr = arr[..., None]
            images.append(arr)
        images8 = (
            np.stack(images).astype(np.uint8)
            if images
            else np.zeros((0, manifest.L, manifest.L, manifest.C), dtype=np.uint8)
        )
        if images8.shape[1:] != (manifest.L, manifest.L, manifest.C):
            raise DatasetIntegrityError(f"image shape {images8.shape[1:]} does not match manifest")
        if _pixel_checksum(images8) != manifest.sha256:
            raise DatasetIntegrityError("pixel checksum mismatch")
        return cls(images8, manifest)


def _render_oval(img: np.ndarray, oval: OvalSpec, subsamples: int = 4) -> None:
    """Alpha-composite one anti-aliased ellipse into a float image in place."""
    L = img.shape[0]
    cy, cx = oval.center
    rmax = max(oval.axes)
    y0, y1 = max(0, int(np.floor(cy - rmax - 1))), min(L, int(np.ceil(cy + rmax + 2)))
    x0, x1 = max(0, int(np.floor(cx - rmax - 1))), min(L, int(np.ceil(cx + rmax + 2)))
    if y0 >= y1 or x0 >= x1:
        return
    off = (np.arange(subsamples) + 0.5) / subsamples
    ys = (np.arange(y0, y1)[:, None] + off[None, :]).reshape(-1)
    xs = (np.arange(x0, x1)[:, None] + off[None, :]).reshape(-1)
    dy = ys[:, None] - cy
    dx = xs[None, :] - cx
    cos_t, sin_t = np.cos(oval.orientation), np.sin(oval.orientation)
    u = dx * cos_t + dy * sin_t
    v = -dx * sin_t + dy * cos_t
    a, b = oval.axes
    inside = (u / a) ** 2 + (v / b) ** 2 <= 1.0
    cov = inside.reshape(y1 - y0, subsamples, x1 - x0, subsamples).mean(axis=(1, 3))
    patch = img[y0:y1, x0:x1]
    patch *= 1.0 - cov[..., None]
    patch += cov[..., None] * np.asarray(oval.color)


def gen_msds(
    variant: int,
    n: int,
    L: int = 32,
    seed: int = 0,
    color_jitter: float = 0.02,
    orientation_jitter: float = 0.05,
    position_jitter: float = 1.0,
    axes_frac: tuple[float, float] = (0.3125, 0.15625),
    color_low: float = 0.15,
) -> Dataset:
    """Oval-grid dataset with one global and sixteen local features.

    Variant 1 shares the color within an image; variant 2 shares the
    orientation. Geometry guarantees each oval stays inside its grid cell
    after jitter. Deterministic for a fixed seed.
    """
    if variant not in (1, 2):
        raise ValueError(f"variant must be 1 or 2, got {variant}")
    if L % 4 != 0:
        raise ValueError(f"image edge must be divisible by 4, got {L}")
    if n < 0:
        raise ValueError(f"image count must be non-negative, got {n}")
    cell = L // 4
    axes = (axes_frac[0] * cell, axes_frac[1] * cell)
    if max(axes) + position_jitter >= cell / 2:
        raise ValueError("ovals would leave their grid cells; shrink axes or jitter")
    rng = np.random.default_rng(seed)
    images = np.zeros((n, L, L, 3), dtype=np.uint8)
    all_ovals = []
    for i in range(n):
        img = np.zeros((L, L, 3), dtype=np.float64)
        if variant == 1:
            base_color = rng.uniform(color_low, 1.0, size=3)
        else:
            base_orient = rng.uniform(0.0, np.pi)
        ovals = []
        for gy in range(4):
            for gx in range(4):
                cy = gy * cell + cell / 2 + rng.uniform(-position_jitter, position_jitter)
                cx = gx * cell + cell / 2 + rng.uniform(-position_jitter, position_jitter)
                if variant == 1:
                    color = np.clip(base_color + rng.normal(0.0, color_jitter, size=3), 0.0, 1.0)
                    orient = rng.uniform(0.0, np.pi)
                else:
                    color = rng.uniform(color_low, 1.0, size=3)
                    # ellipse orientation is pi-periodic, no need to wrap
                    orient = base_orient + rng.normal(0.0, orientation_jitter)
                oval = OvalSpec((cy, cx), float(orient), tuple(color.tolist()), axes)
                _render_oval(img, oval)
                ovals.append(oval)
        images[i] = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
        all_ovals.append(ovals)
    params = {
        "variant": variant,
        "color_jitter": color_jitter,
        "orientation_jitter": orientation_jitter,
        "position_jitter": position_jitter,
        "axes_frac": list(axes_frac),
        "color_low": color_low,
    }
    manifest = DatasetManifest(name=f"msds{variant}", n=n, L=L, C=3, seed=seed, params=params)
    return Dataset(images, manifest, ovals=all_ovals)


def gen_pinwheel(
    n: int,
    legs: int = 4,
    seed: int = 0,
    radial_std: float = 0.3,
    tangential_std: float = 0.1,
    rate: float = 0.7,
) -> tuple[np.ndarray, np.ndarray]:
    """Multi-arm spiral point cloud; returns (points, arm labels).

    Every arm draws from the same radial/tangential law and gets rotated by
    its arm angle plus a swirl proportional to the radius, so arm k equals
    arm 0 rotated by 2*pi*k/legs in distribution.
    """
    if legs < 1:
        raise ValueError(f"legs must be at least 1, got {legs}")
    if n < 0:
        raise ValueError(f"point count must be non-negative, got {n}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % legs
    r = 1.0 + radial_std * rng.normal(size=n)
    t = tangential_std * rng.normal(size=n)
    phi = labels * (2.0 * np.pi / legs) + rate * r
    x = r * np.cos(phi) - t * np.sin(phi)
    y = r * np.sin(phi) + t * np.cos(phi)
    return np.stack([x, y], axis=1), labels


@dataclass
class Preprocessor:
    """Invertible map between 8-bit pixels and unbounded model space.

    Data direction: dequantize to y = (x8 + u) / bit_depth, then squeeze
    into (alpha, 1 - alpha) and apply the logit. The returned logdet is the
    Jacobian of the unit-interval-to-model-space map only; the 1/bit_depth
    volume factor is the bits-per-dimension constant handled in :func:`bpd`.
    Model direction drops the dequantization noise and re-quantizes.
    """

    alpha: float = 0.05
    bit_depth: int = 256

    def forward(self, x8: np.ndarray, rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        x8 = np.asarray(x8)
        if x8.min() < 0 or x8.max() > self.bit_depth - 1:
            raise ValueError(f"pixel values outside [0, {self.bit_depth - 1}]")
        u = rng.random(x8.shape) if rng is not None else 0.5
        y = (x8.astype(np.float64) + u) / self.bit_depth
        return self.forward_from_unit(y)

    def forward_from_unit(self, y) -> tuple[Tensor, Tensor]:
        """Map unit-interval images to model space; logdet per image."""
        y = torch.as_tensor(y)
        a = self.alpha
        s = a + (1.0 - 2.0 * a) * y
        x = torch.log(s) - torch.log1p(-s)
        logdet = (np.log(1.0 - 2.0 * a) - torch.log(s) - torch.log1p(-s)).flatten(1).sum(dim=1)
        return x, logdet

    def to_unit(self, x: Tensor) -> Tensor:
        """Model space back to the unit interval (continuous, noise kept)."""
        s = torch.sigmoid(x)
        return (s - self.alpha) / (1.0 - 2.0 * self.alpha)

    def inverse(self, x: Tensor) -> np.ndarray:
        """Model space to 8-bit pixels (re-quantized)."""
        y = self.to_unit(x.detach().double())
        q = torch.floor(y * self.bit_depth).clamp(0, self.bit_depth - 1)
        return q.cpu().numpy().astype(np.uint8)


class LogitUniformDensity:
    """Analytic density of uniform unit-interval pixels pushed through the
    preprocessing logit; the exact bits-per-dimension baseline of 8.0."""

    def __init__(self, preprocessor: Preprocessor | None = None):
        self.pre = preprocessor or Preprocessor()

    def log_prob(self, x: Tensor) -> Tensor:
        a = self.pre.alpha
        s = torch.sigmoid(x.double())
        return (torch.log(s) + torch.log1p(-s) - np.log(1.0 - 2.0 * a)).flatten(1).sum(dim=1)


def bpd(
    model,
    images8: np.ndarray,
    preprocessor: Preprocessor | None = None,
    seed: int = 0,
    batch_size: int = 64,
) -> float:
    """Mean bits per dimension of 8-bit images under a model's log_prob,
    with the dequantization correction folded in."""
    pre = preprocessor or Preprocessor()
    images8 = np.asarray(images8)
    if images8.ndim != 4 or images8.shape[0] == 0:
        raise ValueError("need a nonempty (n, L, L, C) image array")
    rng = np.random.default_rng(seed)
    dims = float(np.prod(images8.shape[1:]))
    total = 0.0
    with torch.no_grad():
        for lo in range(0, images8.shape[0], batch_size):
            batch = images8[lo : lo + batch_size]
            x, logdet = pre.forward(batch, rng)
            x = x.float() if not isinstance(model, LogitUniformDensity) else x
            lp = model.log_prob(x)
            total += float(-(lp.double() + logdet).sum())
    return total / (images8.shape[0] * dims * np.log(2.0)) + np.log2(pre.bit_depth)


def save_image_grid(path, images01: np.ndarray, ncol: int | None = None, pad: int = 1) -> None:
    """Tile unit-range images into one PNG."""
    images01 = np.asarray(images01)
    n, L, _, C = images01.shape
    ncol = ncol or int(np.ceil(np.sqrt(n)))
    nrow = int(np.ceil(n / ncol))
    canvas = np.zeros((nrow * (L + pad) - pad, ncol * (L + pad) - pad, C))
    for i in range(n):
        r, c = divmod(i, ncol)
        canvas[r * (L + pad) : r * (L + pad) + L, c * (L + pad) : c * (L + pad) + L] = images01[i]
    arr = np.clip(np.rint(canvas * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr[..., 0] if C == 1 else arr).save(path)


def estimate_oval_colors(img01: np.ndarray, grid: int = 4, top_k: int = 6) -> np.ndarray:
    """Estimate one color per grid cell from its brightest pixels."""
    L = img01.shape[0]
    cell = L // grid
    colors = np.zeros((grid * grid, img01.shape[-1]))
    for gy in range(grid):
        for gx in range(grid):
            patch = img01[gy * cell : (gy + 1) * cell, gx * cell : (gx + 1) * cell]
            flat = patch.reshape(-1, patch.shape[-1])
            bright = flat.max(axis=1)
            idx = np.argsort(bright)[-top_k:]
            colors[gy * grid + gx] = flat[idx].mean(axis=0)
    return colors


def within_image_color_std(colors: np.ndarray) -> float:
    """Spread of oval colors inside one image (mean over channels)."""
    return float(colors.std(axis=0).mean())


def across_image_color_std(images01: np.ndarray, grid: int = 4, top_k: int = 6) -> float:
    """Spread of per-image mean oval colors across a dataset."""
    means = np.stack([estimate_oval_colors(img, grid, top_k).mean(axis=0) for img in images01])
    return float(means.std(axis=0).mean())
