import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.ndimage import maximum_filter

from projfilter.baselines import make_rng
from projfilter.errors import GridMismatchError, RegionTooSmallError
from projfilter.expfam import BijectionParams, build_basis, gaussian_to_natural
from projfilter.metrics import (
    KL_CAP,
    DensityGrid,
    Region,
    boundary_mass,
    default_region,
    density_to_grid,
    gaussian_grid,
    ground_truth_auto,
    ground_truth_grid,
    hellinger,
    histogram_to_grid,
    kl,
)
from projfilter.posterior import custom_model, make_posterior
from projfilter.renyi_update import UpdateConfig, update

ZERO = custom_model(lambda x, y: np.zeros(len(x)), name="zero")
LINE = Region([-8.0], [9.0])


def gaussian_1d(mu, res=2000):
    return gaussian_grid([mu], [[1.0]], LINE, res)


class TestGroundTruth:
    def test_gaussian_prior(self, grid2):
        basis = build_basis(2, 2)
        mu, Sigma = np.array([0.5, -0.2]), np.array([[1.0, 0.3], [0.3, 0.6]])
        spec = make_posterior(basis, gaussian_to_natural(basis, mu, Sigma), BijectionParams.from_gaussian(mu, Sigma),
                              [0.0], ZERO, grid2)
        region = Region.around(mu, Sigma, 8.0)
        truth = ground_truth_grid(spec, region, 200)
        axes = [region.lo[k] + (np.arange(200) + 0.5) * (region.hi[k] - region.lo[k]) / 200 for k in range(2)]
        X = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
        r = X - mu
        exact = np.exp(-0.5 * np.einsum("...i,ij,...j->...", r, np.linalg.inv(Sigma), r)) / (
            2 * np.pi * np.sqrt(np.linalg.det(Sigma)))
        inner = exact > 1e-3 * exact.max()
        np.testing.assert_allclose(truth.values[inner], exact[inner], rtol=1e-6)

    def test_example_a_normalized(self, example_a_spec, grid2):
        truth = ground_truth_auto(example_a_spec, grid2)
        assert abs(truth.mass - 1.0) <= 1e-6
        assert boundary_mass(truth) <= 1e-5

    def test_example_a_multimodal(self, example_a_spec, grid2):
        truth = ground_truth_auto(example_a_spec, grid2, resolution=300)
        v = truth.values
        peaks = (v == maximum_filter(v, size=5)) & (v > 0.1 * v.max())
        assert peaks.sum() >= 3

    def test_region_too_small(self, example_a_spec):
        with pytest.raises(RegionTooSmallError):
            ground_truth_grid(example_a_spec, Region([0.0, 0.0], [2.0, 2.0]), 50)

    def test_auto_expands(self, example_a_spec, grid2):
        truth = ground_truth_auto(example_a_spec, grid2, resolution=100, region=Region([0.0, 0.0], [2.0, 2.0]))
        assert np.all(truth.region.hi - truth.region.lo > 2.0)

    def test_default_region_is_centred_on_posterior(self, example_a_spec, grid2):
        region = default_region(example_a_spec, grid2, 1.0)
        assert np.all(region.lo < 1.0) and np.all(region.hi > 0.0)


class TestGrids:
    def test_density_to_grid_gaussian(self):
        basis = build_basis(1, 4)
        theta = gaussian_to_natural(basis, [0.5], [[0.8]])
        a = density_to_grid(theta, basis, LINE, 1000)
        b = gaussian_grid([0.5], [[0.8]], LINE, 1000)
        np.testing.assert_allclose(a.values, b.values, rtol=1e-9, atol=1e-300)
        assert a.mass == pytest.approx(1.0, abs=1e-12)

    def test_histogram_single_cell(self):
        region = Region([0.0, 0.0], [1.0, 1.0])
        g = histogram_to_grid(np.full((50, 2), 0.55), region, 10)
        assert g.values.max() == pytest.approx(1.0 / g.cell_measure)
        assert np.count_nonzero(g.values) == 1
        assert g.overflow == 0

    def test_histogram_overflow(self):
        g = histogram_to_grid(np.full((30, 2), 5.0), Region([0.0, 0.0], [1.0, 1.0]), 10)
        assert g.overflow == 30
        assert g.mass == 0.0

    def test_histogram_matches_gaussian(self):
        rng = make_rng(2024)
        pts = rng.standard_normal((1_000_000, 2))
        # 50 x 50 cells: about 400 samples per central cell, so counting noise stays below 1e-2
        region = Region([-6.0, -6.0], [6.0, 6.0])
        h = hellinger(histogram_to_grid(pts, region, 50), gaussian_grid([0.0, 0.0], np.eye(2), region, 50))
        assert h <= 2e-2

    def test_csv(self, tmp_path):
        g = gaussian_grid([0.0, 0.0], np.eye(2), Region([-3.0, -3.0], [3.0, 3.0]), 7)
        g.to_csv(tmp_path / "g.csv")
        text = (tmp_path / "g.csv").read_text().splitlines()
        assert text[0].startswith("# lo=-3,-3;hi=3,3;resolution=7")
        np.testing.assert_array_equal(np.loadtxt(tmp_path / "g.csv", delimiter=","), g.values)


class TestDistances:
    def test_identity(self):
        g = gaussian_1d(0.0)
        assert hellinger(g, g) == 0.0
        assert abs(kl(g, g)) <= 1e-12

    def test_unit_shift(self):
        assert abs(hellinger(gaussian_1d(0.0), gaussian_1d(1.0)) - np.sqrt(1 - np.exp(-1 / 8))) <= 1e-4

    @pytest.mark.parametrize("dmu,s1,s2", [(1.0, 1.0, 1.0), (0.5, 1.0, 2.0), (2.0, 0.7, 1.3)])
    def test_renyi_relation(self, dmu, s1, s2):
        a = gaussian_grid([0.0], [[s1**2]], Region([-15.0], [15.0]), 6000)
        b = gaussian_grid([dmu], [[s2**2]], Region([-15.0], [15.0]), 6000)
        # closed-form D_1/2 between N(0, s1^2) and N(dmu, s2^2)
        v = 0.5 * (s1**2 + s2**2)
        d_half = 0.25 * dmu**2 / v + np.log(v / (s1 * s2))
        assert abs(hellinger(a, b) ** 2 - (1 - np.exp(-0.5 * d_half))) <= 1e-4

    def test_kl_gaussian(self):
        assert kl(gaussian_1d(1.0), gaussian_1d(0.0)) == pytest.approx(0.5, abs=1e-6)

    @settings(max_examples=30, deadline=None)
    @given(m1=st.floats(-2, 2), m2=st.floats(-2, 2), s1=st.floats(0.3, 2), s2=st.floats(0.3, 2))
    def test_bounds_and_symmetry(self, m1, m2, s1, s2):
        region = Region([-12.0], [12.0])
        a = gaussian_grid([m1], [[s1**2]], region, 800)
        b = gaussian_grid([m2], [[s2**2]], region, 800)
        h = hellinger(a, b)
        assert 0.0 <= h <= 1.0
        assert h == hellinger(b, a)
        assert kl(a, b) >= -1e-10

    def test_disjoint(self):
        region = Region([0.0], [1.0])
        a = DensityGrid(region, 4, np.array([4.0, 0.0, 0.0, 0.0]))
        b = DensityGrid(region, 4, np.array([0.0, 0.0, 0.0, 4.0]))
        assert hellinger(a, b) == 1.0
        assert kl(a, b) == pytest.approx(KL_CAP)

    def test_mismatch(self):
        with pytest.raises(GridMismatchError):
            hellinger(gaussian_1d(0.0, 100), gaussian_1d(0.0, 200))
        with pytest.raises(GridMismatchError):
            kl(gaussian_grid([0.0], [[1.0]], Region([-5.0], [5.0]), 100), gaussian_1d(0.0, 100))

    def test_refinement_stability(self, example_a_spec, grid2):
        theta, _, _ = update(example_a_spec, UpdateConfig(), grid2)
        h = []
        for res in (500, 1000):
            truth = ground_truth_auto(example_a_spec, grid2, resolution=res)
            h.append(hellinger(truth, density_to_grid(theta, example_a_spec.basis, truth.region, res)))
        assert abs(h[0] - h[1]) <= 5e-4


def test_region_validation():
    with pytest.raises(ValueError):
        Region([0.0, 1.0], [1.0, 1.0])
    r = Region([0.0], [2.0]).expanded(2.0)
    np.testing.assert_allclose([r.lo[0], r.hi[0]], [-1.0, 3.0])
