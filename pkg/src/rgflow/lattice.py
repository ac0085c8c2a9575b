"""Geometry of the multi-scale coarse-graining hierarchy.

Everything here is pure bookkeeping over an L x L x C pixel lattice that is
repeatedly halved by local block transforms: at each level, shifted
"disentangler" blocks mix neighboring variables, then aligned "decimator"
blocks split each m x m tile into a kept stride-2 quarter (sent up one level)
and a decimated remainder (emitted as latent variables at that level).
No learnable state lives in this module; the flow model consumes these maps.

Shifted blocks wrap around the image edges (periodic boundary), so every
level is tiled exactly once by each block role.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Literal

import numpy as np

Role = Literal["disentangler", "decimator"]


class InvalidStrideError(ValueError):
    """Stride does not evenly divide the block edge."""


class InvalidAddressError(ValueError):
    """Block address out of range for the lattice."""


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class LatticeSpec:
    """Shape of the hierarchy: image edge L, block edge m, channels C.

    Levels run from 0 (finest) to ``top_level`` (coarsest); the image edge
    at level h is L / 2**h, and the top level is the first one whose edge
    equals m, so a single block covers it.
    """

    L: int
    m: int
    C: int

    def __post_init__(self):
        if not _is_pow2(self.L) or not _is_pow2(self.m):
            raise ValueError(f"L and m must be powers of two, got L={self.L}, m={self.m}")
        if self.m < 2:
            raise ValueError(f"block edge must be at least 2, got m={self.m}")
        if self.L < self.m:
            raise ValueError(f"image edge {self.L} smaller than block edge {self.m}")
        if self.C < 1:
            raise ValueError(f"channel count must be positive, got {self.C}")

    @property
    def top_level(self) -> int:
        return int(np.log2(self.L)) - int(np.log2(self.m))

    @property
    def n_variables(self) -> int:
        return self.L * self.L * self.C

    def levels(self) -> range:
        return range(self.top_level + 1)

    def level_size(self, h: int) -> int:
        """Edge length of the compact lattice at level h."""
        self._check_level(h)
        return self.L >> h

    def blocks_per_side(self, h: int) -> int:
        return self.level_size(h) // self.m

    def _check_level(self, h: int) -> None:
        if not 0 <= h <= self.top_level:
            raise ValueError(f"level {h} outside [0, {self.top_level}]")


@dataclass(frozen=True)
class PixelSet:
    """A set of (a, b) offsets inside an m x m block."""

    offsets: tuple[tuple[int, int], ...]

    def __len__(self) -> int:
        return len(self.offsets)

    def __iter__(self):
        return iter(self.offsets)

    def __contains__(self, ab) -> bool:
        return tuple(ab) in self.offsets


def square_set(m: int, k: int) -> PixelSet:
    """Offsets {(k*a, k*b)} of the stride-k subgrid of an m x m block."""
    if k < 1 or m % k != 0:
        raise InvalidStrideError(f"stride {k} does not divide block edge {m}")
    n = m // k
    return PixelSet(tuple((k * a, k * b) for a in range(n) for b in range(n)))


@dataclass(frozen=True)
class LatentIndex:
    """Latent variable address: level h, compact position (i, j), channel c."""

    h: int
    i: int
    j: int
    c: int


@dataclass(frozen=True)
class BlockAddress:
    """One block at level h: grid cell (p, q) plus its role."""

    h: int
    p: int
    q: int
    role: Role


def block_pixels(spec: LatticeSpec, addr: BlockAddress) -> list[tuple[int, int]]:
    """Absolute original-image positions covered by a block (periodic wrap).

    Decimator blocks tile the level-h lattice from the origin; disentangler
    blocks are shifted by half a block along both axes, so their positions
    wrap modulo L.
    """
    spec._check_level(addr.h)
    nb = spec.blocks_per_side(addr.h)
    if not (0 <= addr.p < nb and 0 <= addr.q < nb):
        raise InvalidAddressError(f"block ({addr.p}, {addr.q}) outside [0, {nb}) at level {addr.h}")
    if addr.role not in ("disentangler", "decimator"):
        raise InvalidAddressError(f"unknown role {addr.role!r}")
    m = spec.m
    shift = m // 2 if addr.role == "disentangler" else 0
    scale = 1 << addr.h
    out = []
    for a in range(m):
        for b in range(m):
            r = (scale * (m * addr.p + shift + a)) % spec.L
            c = (scale * (m * addr.q + shift + b)) % spec.L
            out.append((r, c))
    return out


def latent_counts(spec: LatticeSpec) -> list[int]:
    """Latent variables emitted per level; sums to L*L*C."""
    counts = []
    for h in spec.levels():
        s = spec.level_size(h)
        if h < spec.top_level:
            counts.append(spec.C * (s * s * 3) // 4)
        else:
            counts.append(spec.C * s * s)
    return counts


def latent_offsets(spec: LatticeSpec) -> list[int]:
    """Start offset of each level's latents in the flat level-major layout."""
    offs = [0]
    for c in latent_counts(spec):
        offs.append(offs[-1] + c)
    return offs


def decimated_positions(spec: LatticeSpec, h: int) -> np.ndarray:
    """Compact (i, j) positions decimated at level h, scanned row-major.

    Below the top level these are the positions outside the kept stride-2
    subgrid; the top level decimates every position.
    """
    s = spec.level_size(h)
    ii, jj = np.meshgrid(np.arange(s), np.arange(s), indexing="ij")
    if h < spec.top_level:
        keep = (ii % 2 == 0) & (jj % 2 == 0)
        sel = ~keep
    else:
        sel = np.ones((s, s), dtype=bool)
    return np.stack([ii[sel], jj[sel]], axis=1)


def flat_index(spec: LatticeSpec, l: LatentIndex) -> int:
    """Position of a latent in the flat layout: level-major, then row-major
    over decimated positions, then channel."""
    spec._check_level(l.h)
    if not 0 <= l.c < spec.C:
        raise ValueError(f"channel {l.c} outside [0, {spec.C})")
    pos = decimated_positions(spec, l.h)
    match = np.flatnonzero((pos[:, 0] == l.i) & (pos[:, 1] == l.j))
    if match.size == 0:
        raise ValueError(f"({l.i}, {l.j}) is not a decimated position at level {l.h}")
    return latent_offsets(spec)[l.h] + int(match[0]) * spec.C + l.c


def latent_index(spec: LatticeSpec, flat: int) -> LatentIndex:
    """Inverse of :func:`flat_index`."""
    if not 0 <= flat < spec.n_variables:
        raise ValueError(f"flat index {flat} outside [0, {spec.n_variables})")
    offs = latent_offsets(spec)
    h = int(np.searchsorted(offs, flat, side="right")) - 1
    rem = flat - offs[h]
    pos = decimated_positions(spec, h)[rem // spec.C]
    return LatentIndex(h=h, i=int(pos[0]), j=int(pos[1]), c=rem % spec.C)


@dataclass(frozen=True)
class Region:
    """Axis-aligned pixel rectangle: top-left corner plus extent."""

    row: int
    col: int
    height: int
    width: int

    def __post_init__(self):
        if self.height < 0 or self.width < 0:
            raise ValueError("region extent must be non-negative")

    @property
    def is_empty(self) -> bool:
        return self.height == 0 or self.width == 0

    def mask(self, L: int) -> np.ndarray:
        if not self.is_empty and not (
            0 <= self.row and 0 <= self.col and self.row + self.height <= L and self.col + self.width <= L
        ):
            raise ValueError(f"region {self} outside {L} x {L} image")
        m = np.zeros((L, L), dtype=bool)
        m[self.row : self.row + self.height, self.col : self.col + self.width] = True
        return m


@dataclass(frozen=True)
class CausalCone:
    """Per-level influence sets of a latent (generation) or a pixel region
    (inference).

    For a generation cone, ``position_masks[h]`` flags compact positions at
    level h whose variables can move when the seed latent moves; the level-0
    entry is the pixel footprint. For an inference cone, ``latent_masks[h]``
    flags the level-h latent slots (position-major, channel-minor) that can
    depend on pixels inside the seed region.
    """

    kind: Literal["generation", "inference"]
    seed: object
    position_masks: tuple[np.ndarray, ...]
    latent_masks: tuple[np.ndarray, ...]

    @property
    def pixels(self) -> np.ndarray:
        """Level-0 position mask (the observable footprint)."""
        return self.position_masks[0]

    def level_counts(self) -> list[int]:
        return [int(m.sum()) for m in self.latent_masks]

    def total(self) -> int:
        return sum(self.level_counts())

    def flat_mask(self) -> np.ndarray:
        """Boolean mask over the flat latent vector."""
        return np.concatenate(self.latent_masks)


def _spread_blocks(mask: np.ndarray, m: int, shift: int) -> np.ndarray:
    """Replace a position mask by the union of all blocks it touches.

    Blocks are m x m tiles whose origins sit at (shift + m*p, shift + m*q)
    modulo the lattice edge.
    """
    s = mask.shape[0]
    d = s // m
    rolled = np.roll(mask, (-shift, -shift), axis=(0, 1))
    hit = rolled.reshape(d, m, d, m).any(axis=(1, 3))
    full = np.repeat(np.repeat(hit, m, axis=0), m, axis=1)
    return np.roll(full, (shift, shift), axis=(0, 1))


def _empty_masks(spec: LatticeSpec):
    pos = tuple(np.zeros((spec.level_size(h),) * 2, dtype=bool) for h in spec.levels())
    lat = tuple(np.zeros(n, dtype=bool) for n in latent_counts(spec))
    return pos, lat


def _latents_in(spec: LatticeSpec, h: int, position_mask: np.ndarray) -> np.ndarray:
    pos = decimated_positions(spec, h)
    sel = position_mask[pos[:, 0], pos[:, 1]]
    return np.repeat(sel, spec.C)


def generation_cone(spec: LatticeSpec, l: LatentIndex) -> CausalCone:
    """Observable positions reachable from one latent through the inverse
    transform, traced level by level down to pixels.

    A latent enters at its level's decimator, whose inverse mixes the whole
    block; the inverse disentangler then mixes the shifted blocks touched,
    and the result seeds the kept grid one level finer.
    """
    flat_index(spec, l)  # validates
    pos_masks, lat_masks = _empty_masks(spec)
    pos_masks = list(pos_masks)
    lat_masks = list(lat_masks)
    cur = np.zeros((spec.level_size(l.h),) * 2, dtype=bool)
    cur[l.i, l.j] = True
    for lev in range(l.h, -1, -1):
        cur = _spread_blocks(cur, spec.m, 0)
        if lev < spec.top_level:
            cur = _spread_blocks(cur, spec.m, spec.m // 2)
        pos_masks[lev] = cur.copy()
        if lev > 0:
            nxt = np.zeros((spec.level_size(lev - 1),) * 2, dtype=bool)
            nxt[::2, ::2] = cur
            cur = nxt
    return CausalCone(
        kind="generation", seed=l, position_masks=tuple(pos_masks), latent_masks=tuple(lat_masks)
    )


def inference_cone(spec: LatticeSpec, region: Region) -> CausalCone:
    """Latents, per level, that can depend on pixels inside a region.

    Pixel influence is traced upward: the disentangler spreads it to whole
    shifted blocks, the decimator to whole aligned blocks; decimated slots
    of touched blocks join the cone and the kept quarter carries the trace
    one level up. For a fixed region the per-level count stops growing with
    L, so the total is proportional to the number of levels.
    """
    pos_masks, lat_masks = _empty_masks(spec)
    pos_masks = list(pos_masks)
    lat_masks = list(lat_masks)
    if region.is_empty:
        return CausalCone(
            kind="inference", seed=region, position_masks=tuple(pos_masks), latent_masks=tuple(lat_masks)
        )
    cur = region.mask(spec.L)
    for h in spec.levels():
        if h < spec.top_level:
            cur = _spread_blocks(cur, spec.m, spec.m // 2)
        cur = _spread_blocks(cur, spec.m, 0)
        pos_masks[h] = cur.copy()
        lat_masks[h] = _latents_in(spec, h, cur)
        if h < spec.top_level:
            cur = cur[::2, ::2]
    return CausalCone(
        kind="inference", seed=region, position_masks=tuple(pos_masks), latent_masks=tuple(lat_masks)
    )


def random_latent_mask(spec: LatticeSpec, count: int, seed: int) -> np.ndarray:
    """Seeded random subset of latent slots, for equal-budget baselines."""
    if not 0 <= count <= spec.n_variables:
        raise ValueError(f"count {count} outside [0, {spec.n_variables}]")
    rng = np.random.default_rng(seed)
    mask = np.zeros(spec.n_variables, dtype=bool)
    mask[rng.choice(spec.n_variables, size=count, replace=False)] = True
    return mask
