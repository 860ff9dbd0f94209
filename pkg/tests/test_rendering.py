import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from dynflow.geometry import Aabb, CameraModel
from dynflow.rendering import (composite, importance_depths, load_png, render_image, render_rays, save_png,
                               stratified_depths, to_uint8)

from conftest import fd_relative_error, tiny_model


def composite_oracle(colors, sigmas, depths, background, t_far):
    """Front-to-back recurrence, one sample at a time."""
    colors, sigmas, depths = (np.asarray(a, dtype=np.float64) for a in (colors, sigmas, depths))
    ends = list(depths[1:]) + [t_far]
    c = np.zeros(3)
    trans = 1.0
    weights = []
    for col, s, a, b in zip(colors, sigmas, depths, ends):
        alpha = 1.0 - math.exp(-s * (b - a))
        weights.append(trans * alpha)
        c += trans * alpha * col
        trans *= 1.0 - alpha
    return c + trans * np.asarray(background), np.array(weights), 1.0 - trans


class TestStratified:
    def test_one_sample_per_bin(self, rng):
        z = stratified_depths(torch.tensor([1.0]), torch.tensor([3.0]), 8, rng=rng)[0].numpy()
        bins = np.floor((z - 1.0) / 0.25).astype(int)
        assert bins.tolist() == list(range(8))

    def test_bin_centres_without_rng(self):
        z = stratified_depths(torch.tensor(0.0), torch.tensor(1.0), 4)
        np.testing.assert_allclose(z.numpy(), [0.125, 0.375, 0.625, 0.875])

    def test_degenerate_interval(self):
        with pytest.raises(ValueError):
            stratified_depths(torch.tensor(1.0), torch.tensor(1.0), 4)
        with pytest.raises(ValueError):
            stratified_depths(torch.tensor(0.0), torch.tensor(1.0), 0)

    def test_monte_carlo_integral(self, rng):
        # E[mean f(z)] over stratified draws equals the average of f on [0, 2]
        z = stratified_depths(torch.zeros(4000), torch.full((4000,), 2.0), 4, rng=rng).numpy()
        est = np.mean(z**2)
        assert est == pytest.approx(4.0 / 3.0, abs=0.01)


class TestImportance:
    def test_single_bin_is_uniform(self, rng):
        z = importance_depths(torch.tensor([[2.0, 5.0]]).expand(5000, 2), torch.ones(5000, 1), 1,
                              rng=rng).numpy().ravel()
        assert z.min() >= 2.0 and z.max() <= 5.0
        assert stats.kstest((z - 2.0) / 3.0, "uniform").pvalue > 0.01

    def test_chi_square_uniform_weights(self, rng):
        n, bins = 8000, 10
        edges = torch.linspace(0, 1, bins + 1, dtype=torch.float64).expand(n, bins + 1)
        z = importance_depths(edges, torch.ones(n, bins, dtype=torch.float64), 1, rng=rng).numpy().ravel()
        counts = np.histogram(z, bins=bins, range=(0, 1))[0]
        assert stats.chisquare(counts).pvalue > 0.01

    def test_chi_square_one_to_three(self, rng):
        n = 8000
        edges = torch.tensor([0.0, 1.0, 2.0], dtype=torch.float64).expand(n, 3)
        w = torch.tensor([1.0, 3.0], dtype=torch.float64).expand(n, 2)
        z = importance_depths(edges, w, 1, rng=rng).numpy().ravel()
        counts = np.array([(z < 1).sum(), (z >= 1).sum()])
        assert stats.chisquare(counts, [n / 4, 3 * n / 4]).pvalue > 0.01

    def test_unequal_bins_density(self, rng):
        # weight mass per bin, not per unit length
        n = 8000
        edges = torch.tensor([0.0, 0.5, 2.0], dtype=torch.float64).expand(n, 3)
        w = torch.tensor([1.0, 1.0], dtype=torch.float64).expand(n, 2)
        z = importance_depths(edges, w, 1, rng=rng).numpy().ravel()
        counts = np.array([(z < 0.5).sum(), (z >= 0.5).sum()])
        assert stats.chisquare(counts).pvalue > 0.01

    def test_zero_weights_fall_back(self):
        z = importance_depths(torch.tensor([[0.0, 1.0, 3.0]]), torch.zeros(1, 2), 4)
        np.testing.assert_allclose(z.numpy(), [[0.375, 1.125, 1.875, 2.625]], atol=1e-6)

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.floats(0, 5), min_size=3, max_size=12), st.integers(1, 16))
    def test_sorted_and_inside(self, w, n):
        edges = torch.linspace(1, 4, len(w) + 1, dtype=torch.float64)
        z = importance_depths(edges, torch.tensor(w, dtype=torch.float64), n, rng=np.random.default_rng(0))
        assert torch.all(z[1:] >= z[:-1])
        assert z.min() >= 1 and z.max() <= 4


class TestComposite:
    def test_two_sample_closed_form(self):
        colors = torch.tensor([[1.0, 0, 0], [0, 1.0, 0]], dtype=torch.float64)
        out = composite(colors, torch.tensor([1.0, 2.0], dtype=torch.float64),
                        torch.tensor([0.0, 0.5], dtype=torch.float64), torch.zeros(3, dtype=torch.float64), 1.0)
        e = math.exp
        np.testing.assert_allclose(out.color.numpy(), [1 - e(-0.5), e(-0.5) * (1 - e(-1)), 0], atol=1e-15)
        np.testing.assert_allclose(out.opacity.item(), 1 - e(-1.5), atol=1e-15)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 12), st.integers(0, 2**31 - 1))
    def test_matches_recurrence_oracle(self, n, seed):
        r = np.random.default_rng(seed)
        depths = np.sort(r.uniform(0, 2, n))
        t_far = depths[-1] + r.uniform(0.01, 1)
        colors, sigmas, bg = r.random((n, 3)), r.exponential(2.0, n), r.random(3)
        out = composite(torch.tensor(colors), torch.tensor(sigmas), torch.tensor(depths), torch.tensor(bg), t_far)
        c, w, o = composite_oracle(colors, sigmas, depths, bg, t_far)
        np.testing.assert_allclose(out.color.numpy(), c, atol=1e-6)
        np.testing.assert_allclose(out.weights.numpy(), w, atol=1e-6)
        # weights plus residual transmittance partition unity
        assert out.weights.sum().item() + out.residual_transmittance.item() == pytest.approx(1.0, abs=1e-6)
        assert o == pytest.approx(out.opacity.item(), abs=1e-6)

    def test_opacity_monotone_in_density(self):
        depths = torch.linspace(0, 1, 6, dtype=torch.float64)[:-1]
        prev = -1.0
        for s in np.linspace(0, 5, 11):
            o = composite(torch.zeros(5, 3, dtype=torch.float64), torch.full((5,), s, dtype=torch.float64), depths,
                          torch.zeros(3, dtype=torch.float64), 1.0).opacity.item()
            assert o > prev
            prev = o

    def test_supersampled_quadrature(self):
        # sigma(t) = 2 t on [0, 1] has optical depth 1
        for n, tol in ((64, 0.02), (4096, 3e-4)):
            z = (torch.arange(n, dtype=torch.float64) + 0.5) / n
            o = composite(torch.zeros(n, 3, dtype=torch.float64), 2 * z, z, torch.zeros(3, dtype=torch.float64),
                          1.0).opacity.item()
            assert o == pytest.approx(1 - math.exp(-1), abs=tol)

    def test_gradient_matches_finite_differences(self):
        r = np.random.default_rng(3)
        colors = torch.tensor(r.random((2, 6, 3)), requires_grad=True)
        sigmas = torch.tensor(r.exponential(1.0, (2, 6)), requires_grad=True)
        depths = torch.tensor(np.sort(r.uniform(0, 1, (2, 6)), -1))
        bg = torch.tensor(r.random((2, 3)))
        w = torch.tensor(r.normal(size=(2, 3)))
        err = fd_relative_error(lambda: (composite(colors, sigmas, depths, bg, torch.tensor([1.2, 1.5])).color * w)
                                .sum(), [colors, sigmas])
        assert err < 1e-4


def _camera(size=8):
    return CameraModel.look_at((0, 0, 3.0), (0, 0, 0), focal=size * 1.2, width=size, height=size)


class TestRenderRays:
    def test_missing_rays_skip_networks(self):
        model = tiny_model()
        cam = _camera()
        o, d = cam.rays(cam.pixel_grid())
        far_box = Aabb((10, 10, 10), (11, 11, 11))
        model.n_canonical_evals = 0
        out = render_rays(model, o, d, 0, (0.2, 0.4, 0.6), far_box, 1.0, n_coarse=4, n_fine=4)
        assert model.n_canonical_evals == 0
        assert not out.hit.any()
        np.testing.assert_array_equal(out.fine.color.numpy(), np.tile([0.2, 0.4, 0.6], (64, 1)))

    def test_evaluations_counted_per_hit_ray(self):
        model = tiny_model()
        cam = _camera()
        o, d = cam.rays(cam.pixel_grid())
        box = Aabb((-0.3, -0.3, -0.3), (0.3, 0.3, 0.3))
        model.n_canonical_evals = 0
        out = render_rays(model, o, d, 0, (0, 0, 0), box, 1.0, n_coarse=4, n_fine=3)
        hits = int(out.hit.sum())
        assert 0 < hits < 64
        assert model.n_canonical_evals == hits * (4 + 4 + 3)

    def test_zero_density_shows_background(self):
        model = tiny_model()
        with torch.no_grad():
            model.density_net.layers[-1].weight[0].zero_()
            model.density_net.layers[-1].bias[0] = -1e3
        cam = _camera()
        bg = np.random.default_rng(0).random((8, 8, 3))
        img, opac = render_image(model, cam, 1, bg, Aabb((-1, -1, -1), (1, 1, 1)), 1.0, n_coarse=8, n_fine=8)
        np.testing.assert_array_equal(img, bg)
        assert np.all(opac == 0)

    def test_chunking_invariance(self):
        model = tiny_model()
        cam = _camera(10)
        box = Aabb((-0.8, -0.8, -0.8), (0.8, 0.8, 0.8))
        a, _ = render_image(model, cam, 2, (1, 1, 1), box, 1.5, n_coarse=6, n_fine=6, seed=4, chunk=1000)
        b, _ = render_image(model, cam, 2, (1, 1, 1), box, 1.5, n_coarse=6, n_fine=6, seed=4, chunk=7)
        # only BLAS blocking differs between chunk sizes
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_fine_pass_merges_coarse_depths(self):
        model = tiny_model()
        cam = _camera(4)
        o, d = cam.rays(cam.pixel_grid())
        out = render_rays(model, o, d, 0, (0, 0, 0), Aabb((-1, -1, -1), (1, 1, 1)), 1.0, n_coarse=5, n_fine=7,
                          rng=np.random.default_rng(0))
        hit = out.hit.numpy()
        assert out.fine.depths.shape == (16, 12)
        fd = out.fine.depths.numpy()[hit]
        assert np.all(np.diff(fd, axis=-1) >= 0)
        for row_f, row_c in zip(fd, out.coarse.depths.numpy()[hit]):
            assert np.isin(row_c, row_f).all()


class TestPng:
    def test_quantisation_rule(self):
        got = to_uint8(np.array([-0.1, 0.0, 0.5 / 255, 1.5 / 255, 0.5, 1.0, 2.0]))
        assert got.tolist() == [0, 0, 0, 2, 128, 255, 255]

    def test_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)) / 255.0
        save_png(img, tmp_path / "a.png")
        np.testing.assert_array_equal(load_png(tmp_path / "a.png"), img)
