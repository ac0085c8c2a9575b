import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rgflow.lattice import (
    BlockAddress,
    InvalidAddressError,
    InvalidStrideError,
    LatentIndex,
    LatticeSpec,
    Region,
    block_pixels,
    decimated_positions,
    flat_index,
    generation_cone,
    inference_cone,
    latent_counts,
    latent_index,
    latent_offsets,
    random_latent_mask,
    square_set,
)

specs = st.builds(
    LatticeSpec,
    L=st.sampled_from([4, 8, 16, 32, 64]),
    m=st.just(4),
    C=st.sampled_from([1, 2, 3]),
) | st.builds(
    LatticeSpec,
    L=st.sampled_from([2, 4, 8, 16]),
    m=st.just(2),
    C=st.sampled_from([1, 3]),
)


class TestSquareSet:
    def test_stride_two(self):
        assert set(square_set(4, 2)) == {(0, 0), (0, 2), (2, 0), (2, 2)}

    def test_stride_one_full(self):
        assert set(square_set(4, 1)) == {(a, b) for a in range(4) for b in range(4)}

    def test_single_element(self):
        assert set(square_set(2, 2)) == {(0, 0)}

    def test_bad_stride(self):
        with pytest.raises(InvalidStrideError):
            square_set(4, 3)
        with pytest.raises(InvalidStrideError):
            square_set(4, 0)

    @given(m=st.sampled_from([2, 4, 8]), k=st.sampled_from([1, 2, 4]))
    def test_cardinality(self, m, k):
        if k > m:
            return
        assert len(square_set(m, k)) == (m // k) ** 2


class TestBlockPixels:
    def test_decimator_origin(self):
        spec = LatticeSpec(8, 4, 1)
        pix = block_pixels(spec, BlockAddress(0, 0, 0, "decimator"))
        assert set(pix) == {(r, c) for r in range(4) for c in range(4)}

    def test_disentangler_shift(self):
        spec = LatticeSpec(8, 4, 1)
        pix = block_pixels(spec, BlockAddress(0, 0, 0, "disentangler"))
        assert set(pix) == {(r, c) for r in range(2, 6) for c in range(2, 6)}

    def test_disentangler_wrap(self):
        spec = LatticeSpec(8, 4, 1)
        pix = block_pixels(spec, BlockAddress(0, 1, 1, "disentangler"))
        assert set(pix) == {(r, c) for r in (6, 7, 0, 1) for c in (6, 7, 0, 1)}

    def test_bad_address(self):
        spec = LatticeSpec(8, 4, 1)
        with pytest.raises(InvalidAddressError):
            block_pixels(spec, BlockAddress(0, 2, 0, "decimator"))
        with pytest.raises(InvalidAddressError):
            block_pixels(spec, BlockAddress(0, 0, 0, "mixer"))

    @given(specs, st.data())
    @settings(max_examples=40)
    def test_tiling_partition(self, spec, data):
        """At every level, each role's blocks cover each position exactly once."""
        h = data.draw(st.integers(0, spec.top_level))
        role = data.draw(st.sampled_from(["disentangler", "decimator"]))
        nb = spec.blocks_per_side(h)
        cover = np.zeros((spec.L, spec.L), dtype=int)
        for p in range(nb):
            for q in range(nb):
                for r, c in block_pixels(spec, BlockAddress(h, p, q, role)):
                    cover[r, c] += 1
        active = np.zeros((spec.L, spec.L), dtype=bool)
        step = 1 << h
        active[::step, ::step] = True
        assert (cover[active] == 1).all()
        assert (cover[~active] == 0).all()


class TestLatentCounts:
    def test_reference_values(self):
        assert latent_counts(LatticeSpec(32, 4, 3)) == [2304, 576, 144, 48]
        assert latent_counts(LatticeSpec(4, 4, 1)) == [16]
        assert latent_counts(LatticeSpec(8, 4, 1)) == [48, 16]

    @given(specs)
    def test_sums_to_variable_count(self, spec):
        assert sum(latent_counts(spec)) == spec.n_variables

    @given(specs)
    def test_matches_decimated_positions(self, spec):
        for h in spec.levels():
            assert len(decimated_positions(spec, h)) * spec.C == latent_counts(spec)[h]


class TestFlatIndexing:
    @given(specs, st.data())
    @settings(max_examples=60)
    def test_round_trip(self, spec, data):
        flat = data.draw(st.integers(0, spec.n_variables - 1))
        l = latent_index(spec, flat)
        assert flat_index(spec, l) == flat

    def test_level_major_row_major_channel_minor(self):
        spec = LatticeSpec(8, 4, 2)
        assert latent_index(spec, 0) == LatentIndex(0, 0, 1, 0)
        assert latent_index(spec, 1) == LatentIndex(0, 0, 1, 1)
        offs = latent_offsets(spec)
        assert latent_index(spec, offs[1]) == LatentIndex(1, 0, 0, 0)

    def test_rejects_kept_position(self):
        spec = LatticeSpec(8, 4, 1)
        with pytest.raises(ValueError):
            flat_index(spec, LatentIndex(0, 0, 0, 0))


class TestGenerationCone:
    def test_low_level_footprint_within_double_block(self):
        spec = LatticeSpec(32, 4, 3)
        cone = generation_cone(spec, LatentIndex(0, 5, 5, 0))
        assert int(cone.pixels.sum()) <= 64
        rows = np.flatnonzero(cone.pixels.any(axis=1))
        cols = np.flatnonzero(cone.pixels.any(axis=0))
        assert rows.max() - rows.min() < 8 and cols.max() - cols.min() < 8

    def test_top_level_is_global(self):
        spec = LatticeSpec(32, 4, 3)
        cone = generation_cone(spec, LatentIndex(3, 1, 1, 0))
        assert cone.pixels.all()

    def test_footprint_grows_with_level(self):
        spec = LatticeSpec(32, 4, 3)
        sizes = []
        for h in spec.levels():
            pos = decimated_positions(spec, h)[0]
            cone = generation_cone(spec, LatentIndex(h, int(pos[0]), int(pos[1]), 0))
            sizes.append(int(cone.pixels.sum()))
        assert sizes == sorted(sizes)


class TestInferenceCone:
    def test_reference_counts(self):
        spec = LatticeSpec(32, 4, 3)
        assert inference_cone(spec, Region(11, 11, 10, 10)).total() == 1344
        cone = inference_cone(spec, Region(6, 11, 10, 10))
        assert cone.level_counts() == [576, 432, 144, 48]
        assert cone.total() == 1200

    def test_whole_image(self):
        spec = LatticeSpec(16, 4, 2)
        cone = inference_cone(spec, Region(0, 0, 16, 16))
        assert cone.total() == spec.n_variables

    def test_empty_region(self):
        spec = LatticeSpec(16, 4, 2)
        cone = inference_cone(spec, Region(3, 3, 0, 0))
        assert cone.total() == 0
        assert not cone.pixels.any()

    def test_out_of_bounds(self):
        spec = LatticeSpec(16, 4, 2)
        with pytest.raises(ValueError):
            inference_cone(spec, Region(10, 10, 10, 10))

    def test_per_level_counts_constant_in_image_size(self):
        region = Region(6, 11, 10, 10)
        by_L = {L: inference_cone(LatticeSpec(L, 4, 3), region).level_counts() for L in (32, 64, 128)}
        assert by_L[64][:2] == by_L[32][:2]
        assert by_L[128][:2] == by_L[32][:2]
        # top two levels always decimate the same coarse lattice sizes
        assert by_L[64][-2:] == by_L[32][-2:]
        assert by_L[128][-2:] == by_L[32][-2:]

    def test_block_count_bound_per_level(self):
        r = 10
        for L in (32, 64, 128):
            spec = LatticeSpec(L, 4, 3)
            cone = inference_cone(spec, Region(6, 11, r, r))
            bound = ((r / spec.m + 2) * 2) ** 2
            for h, mask in enumerate(cone.position_masks):
                assert mask.sum() / spec.m**2 <= bound

    def test_flat_mask_matches_level_masks(self):
        spec = LatticeSpec(32, 4, 3)
        cone = inference_cone(spec, Region(6, 11, 10, 10))
        flat = cone.flat_mask()
        assert flat.sum() == cone.total()
        offs = latent_offsets(spec)
        for h in spec.levels():
            assert (flat[offs[h] : offs[h + 1]] == cone.latent_masks[h]).all()


def test_random_latent_mask_cardinality_and_determinism():
    spec = LatticeSpec(32, 4, 3)
    a = random_latent_mask(spec, 1200, seed=5)
    b = random_latent_mask(spec, 1200, seed=5)
    assert a.sum() == 1200
    assert (a == b).all()
    assert (a != random_latent_mask(spec, 1200, seed=6)).any()
