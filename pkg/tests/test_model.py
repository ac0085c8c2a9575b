import math

import numpy as np
import pytest
import torch

from helpers import fd_jacobian
from rgflow.lattice import LatticeSpec, Region, generation_cone, inference_cone, latent_index
from rgflow.model import (
    FlatFlow,
    GaussianPrior,
    LaplacianPrior,
    LatentPyramid,
    NumericalOverflowError,
    RgFlowModel,
    TemperatureSchedule,
    flat_flow_2d,
)

torch.set_num_threads(1)


def tiny_model(L=8, C=1, n_layer=2, n_res=1, hidden=8, seed=0, random=False, dtype=None, **kw):
    model = RgFlowModel(LatticeSpec(L, 4, C), n_layer=n_layer, n_res=n_res, hidden=hidden, seed=seed, **kw)
    if dtype is not None:
        model = model.to(dtype)
    if random:
        model.randomize_(seed=seed + 1)
    return model


class TestPriors:
    def test_laplacian_log_prob(self):
        p = LaplacianPrior(1.0)
        assert float(p.log_prob(torch.tensor(0.0))) == pytest.approx(math.log(0.5))
        assert float(p.log_prob(torch.tensor(2.0))) == pytest.approx(math.log(0.5) - 2.0)

    def test_gaussian_log_prob(self):
        p = GaussianPrior(1.0)
        assert float(p.log_prob(torch.tensor(0.0))) == pytest.approx(-0.5 * math.log(2 * math.pi))

    def test_sampling_statistics(self):
        g = torch.Generator().manual_seed(0)
        z = LaplacianPrior(1.0).sample((200_000,), generator=g, dtype=torch.float64)
        assert abs(float(z.mean())) < 0.02
        assert float(z.abs().mean()) == pytest.approx(1.0, abs=0.02)
        z = GaussianPrior(1.0).sample((200_000,), temperature=0.25, generator=g, dtype=torch.float64)
        assert float(z.std()) == pytest.approx(0.5, abs=0.01)

    def test_invalid_scale(self):
        with pytest.raises(ValueError):
            LaplacianPrior(0.0)


class TestTemperatureSchedule:
    def test_coerce_forms(self):
        assert TemperatureSchedule.coerce(None, 3).temps == (1.0, 1.0, 1.0)
        assert TemperatureSchedule.coerce(0.5, 2).temps == (0.5, 0.5)
        assert TemperatureSchedule.coerce([0.2, 0.6], 2).temps == (0.2, 0.6)

    def test_rejects_bad(self):
        with pytest.raises(ValueError):
            TemperatureSchedule.coerce([1.0, -1.0], 2)
        with pytest.raises(ValueError):
            TemperatureSchedule.coerce([1.0], 2)


class TestRgStep:
    def test_identity_init_is_subsample_split(self):
        model = tiny_model()
        x = torch.randn(3, 8, 8, 1)
        x_next, z, logdet = model.rg_step_forward(0, x)
        assert torch.equal(x_next, x[:, ::2, ::2, :])
        assert (logdet == 0).all()
        merged = model.levels[0].merge(x_next, z)
        assert torch.equal(merged, x)

    def test_dimension_bookkeeping(self):
        model = tiny_model(L=16, C=3, random=True)
        x = torch.randn(2, 16, 16, 3)
        for h in range(model.spec.top_level + 1):
            x_next, z, _ = model.rg_step_forward(h, x)
            n_in = x.numel() // x.shape[0]
            n_out = (0 if x_next is None else x_next.numel() // 2) + z.numel() // 2
            assert n_in == n_out
            if x_next is None:
                break
            x = x_next

    def test_round_trip_and_logdet_antisymmetry(self):
        model = tiny_model(random=True)
        x = torch.randn(4, 8, 8, 1)
        x_next, z, ld_f = model.rg_step_forward(0, x)
        back, ld_i = model.rg_step_inverse(0, x_next, z)
        assert (back - x).abs().max() < 1e-5
        assert (ld_f + ld_i).abs().max() < 1e-5

    def test_shape_validation(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.rg_step_forward(0, torch.randn(2, 4, 4, 1))
        with pytest.raises(ValueError):
            model.rg_step_inverse(1, torch.randn(2, 2, 2, 1), torch.randn(2, 16))
        with pytest.raises(ValueError):
            model.rg_step_inverse(0, None, torch.randn(2, 48))


class TestEncodeDecode:
    def test_round_trip_many_images(self):
        model = tiny_model(L=16, C=3, n_layer=4, random=True)
        x = torch.randn(100, 16, 16, 3, generator=torch.Generator().manual_seed(0))
        z, _ = model.encode(x)
        back, _ = model.decode(z)
        assert (back - x).abs().max() < 1e-4

    def test_identity_model_permutes_entries(self):
        model = tiny_model()
        x = torch.randn(5, 8, 8, 1)
        z, logdet = model.encode(x)
        assert (logdet == 0).all()
        assert torch.equal(z.flat().sort(dim=1).values, x.reshape(5, -1).sort(dim=1).values)
        back, logdet_g = model.decode(z)
        assert torch.equal(back, x)
        assert (logdet_g == 0).all()

    @pytest.mark.parametrize("L", [4, 8])
    def test_logdet_matches_dense_jacobian(self, L):
        model = tiny_model(L=L, hidden=16, random=True, dtype=torch.float64)
        x = torch.randn(L * L, dtype=torch.float64, generator=torch.Generator().manual_seed(2))
        with torch.no_grad():
            _, ld = model.encode_flat(x.reshape(1, L, L, 1))
        jac = fd_jacobian(lambda rows: model.encode_flat(rows.reshape(-1, L, L, 1))[0], x)
        _, ref = torch.linalg.slogdet(jac)
        assert abs(float(ld[0]) - float(ref)) < 1e-3

    def test_logdet_antisymmetry(self):
        model = tiny_model(L=16, C=3, random=True)
        x = torch.randn(8, 16, 16, 3)
        z, ld_r = model.encode(x)
        _, ld_g = model.decode(z)
        assert (ld_r + ld_g).abs().max() < 1e-5

    def test_flat_round_trip_matches_pyramid(self):
        model = tiny_model(random=True)
        x = torch.randn(3, 8, 8, 1)
        z, _ = model.encode(x)
        x1, _ = model.decode(z)
        x2, _ = model.decode_flat(z.flat())
        assert torch.equal(x1, x2)

    def test_rejects_wrong_shapes(self):
        model = tiny_model()
        with pytest.raises(ValueError):
            model.encode(torch.randn(8, 8, 1))
        with pytest.raises(ValueError):
            model.decode_flat(torch.randn(2, 63))


class TestLogProb:
    def test_identity_laplacian_at_zero(self):
        model = tiny_model(L=4)
        lp = model.log_prob(torch.zeros(1, 4, 4, 1))
        assert float(lp) == pytest.approx(-16 * math.log(2), rel=1e-6)

    def test_encode_and_decode_routes_agree(self):
        model = tiny_model(L=8, C=1, n_layer=4, random=True)
        x = torch.randn(6, 8, 8, 1)
        lp = model.log_prob(x)
        z, _ = model.encode(x)
        _, logdet_g = model.decode(z)
        lp_via_decode = model.prior_log_prob(z) - logdet_g
        assert (lp - lp_via_decode).abs().max() < 1e-4

    def test_prior_factorization_exact(self):
        model = tiny_model(random=True)
        x = torch.randn(4, 8, 8, 1)
        z, _ = model.encode(x)
        total = model.prior_log_prob(z)
        manual = model.prior.log_prob(z.flat()).sum(dim=1)
        assert torch.allclose(total, manual)

    def test_normalization_monte_carlo(self):
        """exp(log_prob) integrates to 1: Monte Carlo quadrature with the
        analytic prior density as the proposal (a 16-D grid is infeasible)."""
        model = tiny_model(L=4, dtype=torch.float64)
        model.randomize_(seed=3, scale=0.05)
        g = torch.Generator().manual_seed(4)
        x = LaplacianPrior(1.0).sample((4000, 16), generator=g, dtype=torch.float64)
        log_q = LaplacianPrior(1.0).log_prob(x).sum(dim=1)
        lp = model.log_prob(x.reshape(-1, 4, 4, 1))
        est = float(torch.exp(lp - log_q).mean())
        assert est == pytest.approx(1.0, abs=0.1)

    def test_overflow_error(self):
        model = tiny_model(L=4, dtype=torch.float64)
        model.randomize_(seed=1, scale=40.0, scale_s=40.0)  # saturates the clamp
        huge = torch.full((1, 4, 4, 1), 1e300, dtype=torch.float64)
        with pytest.raises((NumericalOverflowError, Exception)):
            model.log_prob(huge)


class TestSample:
    def test_temperature_one_matches_prior_marginals(self):
        model = tiny_model(L=8)
        z = model.sample_latents(4000, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
        from scipy import stats

        flat = z.flat().numpy().ravel()
        ks = stats.kstest(flat, stats.laplace(scale=1.0).cdf)
        assert ks.pvalue > 0.01

    def test_zero_temperature_limit(self):
        model = tiny_model(random=True)
        x_tiny = model.sample(8, temps=1e-9, seed=0)
        with torch.no_grad():
            x0, _ = model.decode_flat(torch.zeros(1, 64))
        assert (x_tiny - x0).abs().max() < 1e-4

    def test_mixed_schedule_applied_per_level(self):
        model = tiny_model(L=8)
        z = model.sample_latents(
            6000, temps=[0.2, 0.6], generator=torch.Generator().manual_seed(1), dtype=torch.float64
        )
        std0 = float(z.levels[0].std())
        std1 = float(z.levels[1].std())
        assert std0 == pytest.approx(math.sqrt(2) * 0.2, rel=0.1)
        assert std1 == pytest.approx(math.sqrt(2) * 0.6, rel=0.1)

    def test_deterministic_given_seed(self):
        model = tiny_model(random=True)
        assert torch.equal(model.sample(3, seed=9), model.sample(3, seed=9))


class TestLocality:
    def test_generation_cone_containment_and_tightness(self):
        spec = LatticeSpec(8, 4, 1)
        model = tiny_model(L=8, n_layer=4, hidden=16, random=True, dtype=torch.float64)
        with torch.no_grad():
            z = model.sample_latents(1, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
            x0, _ = model.decode(z)
            for flat in range(0, spec.n_variables, 7):
                zf = z.flat().clone()
                zf[0, flat] += 1.0
                x1, _ = model.decode_flat(zf)
                support = ((x1 - x0).abs().sum(dim=3)[0] > 1e-6).numpy()
                cone = generation_cone(spec, latent_index(spec, flat)).pixels
                assert (support == cone).all()

    def test_inference_cone_containment_and_tightness(self):
        spec = LatticeSpec(8, 4, 1)
        model = tiny_model(L=8, n_layer=4, hidden=16, random=True, dtype=torch.float64)
        region = Region(3, 3, 1, 1)
        cone = inference_cone(spec, region)
        with torch.no_grad():
            x = torch.randn(1, 8, 8, 1, dtype=torch.float64)
            z0, _ = model.encode(x)
            changed = np.zeros(spec.n_variables, dtype=bool)
            for t in range(3):
                xp = x.clone()
                xp[0, 3, 3, 0] += 1.0 + t
                z1, _ = model.encode(xp)
                changed |= ((z1.flat() - z0.flat()).abs() > 1e-12)[0].numpy()
        assert (changed == cone.flat_mask()).all()

    def test_disjoint_cones_have_zero_cross_effect(self):
        spec = LatticeSpec(32, 4, 3)
        model = RgFlowModel(spec, n_layer=4, n_res=1, hidden=8, seed=0).double().randomize_(seed=2)
        a = latent_index(spec, 1)  # low-level latent, small footprint
        cone_a = generation_cone(spec, a)
        b = None
        for flat in range(spec.n_variables - 1, 0, -1):
            cand = latent_index(spec, flat)
            if cand.h == 0 and not (generation_cone(spec, cand).pixels & cone_a.pixels).any():
                b = cand
                break
        assert b is not None
        with torch.no_grad():
            z = model.sample_latents(1, generator=torch.Generator().manual_seed(5), dtype=torch.float64)
            x0, _ = model.decode(z)
            zf = z.flat().clone()
            zf[0, 1] += 1.0
            x1, _ = model.decode_flat(zf)
        delta = (x1 - x0).abs().sum(dim=3)[0].numpy()
        exclusive_b = generation_cone(spec, b).pixels & ~cone_a.pixels
        assert (delta[exclusive_b] == 0).all()


class TestArchitectureConfig:
    def test_per_level_block_counts(self):
        model = RgFlowModel(LatticeSpec(32, 4, 1), n_layer=(8, 6, 4, 2), n_res=1, hidden=8)
        for h, n in enumerate((8, 6, 4)):
            assert len(model.levels[h].dis) == n // 2
            assert len(model.levels[h].dec) == n // 2
        assert model.levels[3].dis is None
        assert len(model.levels[3].dec) == 2

    def test_shared_levels_reuse_modules(self):
        model = RgFlowModel(LatticeSpec(16, 4, 1), n_layer=4, n_res=1, hidden=8, share_levels=True)
        assert model.levels[0].dec is model.levels[1].dec
        assert model.levels[0].dis is model.levels[1].dis
        assert model.levels[2].dis is None
        x = torch.randn(2, 16, 16, 1)
        z, _ = model.encode(x)
        back, _ = model.decode(z)
        assert (back - x).abs().max() < 1e-5

    def test_rejects_bad_n_layer(self):
        with pytest.raises(ValueError):
            RgFlowModel(LatticeSpec(8, 4, 1), n_layer=3)
        with pytest.raises(ValueError):
            RgFlowModel(LatticeSpec(8, 4, 1), n_layer=(4,))
        with pytest.raises(ValueError):
            RgFlowModel(LatticeSpec(8, 4, 1), n_layer=(4, 6), share_levels=True)


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        model = tiny_model(random=True)
        path = tmp_path / "model.ckpt"
        model.save(path, extra_meta={"note": "test"})
        loaded, meta = RgFlowModel.load(path)
        assert meta["model"] == model.config
        assert meta["note"] == "test"
        x = torch.randn(2, 8, 8, 1)
        assert torch.equal(model.log_prob(x), loaded.log_prob(x))

    def test_parameter_mismatch_detected(self, tmp_path):
        model = tiny_model()
        other = tiny_model(n_layer=4)
        model.save(tmp_path / "m.ckpt")
        from rgflow.nncore import load_arrays

        arrays, _ = load_arrays(tmp_path / "m.ckpt")
        with pytest.raises(ValueError):
            other.load_parameters(arrays)


class TestLatentPyramid:
    def test_flat_round_trip(self):
        z = LatentPyramid([torch.randn(2, 5), torch.randn(2, 3)])
        back = LatentPyramid.from_flat(z.flat(), [5, 3])
        for a, b in zip(z.levels, back.levels):
            assert torch.equal(a, b)

    def test_validation(self):
        with pytest.raises(ValueError):
            LatentPyramid([torch.randn(2, 5), torch.randn(3, 5)])
        with pytest.raises(ValueError):
            LatentPyramid.from_flat(torch.randn(2, 7), [5, 3])


class TestFlatFlow:
    def test_identity_log_prob_is_prior(self):
        flow = flat_flow_2d(4, hidden=16, n_res=1)
        x = torch.randn(10, 2)
        expect = flow.prior.log_prob(x).sum(dim=1)
        assert torch.allclose(flow.log_prob(x), expect)

    def test_round_trip(self):
        flow = flat_flow_2d(6, hidden=16, n_res=1)
        flow.stack.randomize_(torch.Generator().manual_seed(0))
        x = torch.randn(50, 2)
        z, ld = flow.encode(x)
        back, ld_b = flow.decode(z)
        assert (back - x).abs().max() < 1e-5
        assert (ld + ld_b).abs().max() < 1e-5

    def test_save_load(self, tmp_path):
        flow = flat_flow_2d(3, hidden=8, n_res=1, prior="gaussian")
        flow.stack.randomize_(torch.Generator().manual_seed(1))
        flow.save(tmp_path / "flow.ckpt")
        loaded, _ = FlatFlow.load(tmp_path / "flow.ckpt")
        x = torch.randn(4, 2)
        assert torch.equal(flow.log_prob(x), loaded.log_prob(x))

    def test_validation(self):
        with pytest.raises(ValueError):
            flat_flow_2d(0)
        flow = flat_flow_2d(2)
        with pytest.raises(ValueError):
            flow.encode(torch.randn(3, 3))
