import numpy as np
import pytest

from se2match.bsplines import (
    SplineGrid,
    SplineTemplate,
    bspline_derivative,
    bspline_eval,
    bspline_periodic,
    build_sampling_matrix,
    build_sampling_row,
    gram_matrices,
    project_to_basis,
    rasterize_template,
    read_template,
    template_eval,
    write_template,
)


def convolved_indicator(n, x, step=1e-4):
    """Independent oracle: n-fold numeric self-convolution of the unit
    indicator, linearly interpolated at x."""
    half_width = 0.5 * (n + 1) + 1.0
    grid = np.arange(-half_width, half_width + step, step)
    box = ((grid > -0.5) & (grid < 0.5)).astype(float)
    box[np.isclose(np.abs(grid), 0.5)] = 0.5
    out = box
    for _ in range(n):
        out = np.convolve(out, box, mode="same") * step
    return np.interp(x, grid, out)


class TestBsplineEval:
    def test_order0_is_indicator(self):
        assert bspline_eval(0, 0.0) == 1.0
        assert bspline_eval(0, 0.7) == 0.0
        assert bspline_eval(0, -0.7) == 0.0

    def test_values_against_convolution_oracle(self):
        # reference values computed with the numeric oracle before the
        # closed form existed
        assert convolved_indicator(1, 0.0) == pytest.approx(1.0, abs=1e-3)
        assert bspline_eval(1, 0.0) == pytest.approx(1.0, abs=1e-12)
        assert convolved_indicator(3, 0.0) == pytest.approx(2.0 / 3.0, abs=1e-3)
        assert bspline_eval(3, 0.0) == pytest.approx(2.0 / 3.0, abs=1e-12)
        xs = np.linspace(-2.5, 2.5, 41)
        for n in (1, 2, 3):
            assert np.allclose(bspline_eval(n, xs),
                               convolved_indicator(n, xs), atol=2e-4)

    @pytest.mark.parametrize("n", [0, 1, 2, 3, 5, 7])
    def test_support(self, n):
        half = 0.5 * (n + 1)
        xs = np.array([-half - 1e-9, half + 1e-9, -half - 3, half + 3])
        assert np.all(bspline_eval(n, xs) == 0.0)

    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    def test_partition_of_unity(self, n):
        xs = np.linspace(-3, 3, 1201)
        ks = np.arange(-12, 13)
        total = bspline_eval(n, xs[None, :] - ks[:, None]).sum(axis=0)
        assert np.max(np.abs(total - 1.0)) <= 1e-10

    @pytest.mark.parametrize("n", [1, 2, 3])
    def test_convolution_identity(self, n):
        # numerically convolving B^n with itself matches B^{2n+1}
        step = 1e-3
        xs = np.arange(-(n + 1), n + 1 + step, step)
        vals = bspline_eval(n, xs)
        conv = np.convolve(vals, vals, mode="full") * step
        full_xs = np.arange(len(conv)) * step + 2 * xs[0]
        ref = bspline_eval(2 * n + 1, full_xs)
        assert np.max(np.abs(conv - ref)) <= 1e-6

    def test_even_symmetry(self):
        xs = np.linspace(0, 2.5, 50)
        for n in (1, 2, 3, 4):
            assert np.allclose(bspline_eval(n, xs), bspline_eval(n, -xs))


class TestBsplineDerivative:
    def test_rejects_overranged_order(self):
        with pytest.raises(ValueError):
            bspline_derivative(2, 3, 0.0)

    def test_second_derivative_cubic(self):
        # finite differences of bspline_eval as oracle, step 1e-5
        h = 1e-5
        for x, expected in [(0.0, -2.0), (1.0, 1.0), (-1.0, 1.0)]:
            fd = (bspline_eval(3, x + h) - 2 * bspline_eval(3, x)
                  + bspline_eval(3, x - h)) / h**2
            assert fd == pytest.approx(expected, abs=1e-4)
            assert bspline_derivative(3, 2, x) == pytest.approx(expected, abs=1e-12)

    def test_first_derivative_vanishes_at_zero(self):
        for n in (1, 2, 3, 5):
            assert bspline_derivative(n, 1, 0.0) == 0.0

    def test_first_derivative_matches_finite_differences(self):
        h = 1e-6
        xs = np.linspace(-1.9, 1.9, 21)
        fd = (bspline_eval(3, xs + h) - bspline_eval(3, xs - h)) / (2 * h)
        assert np.allclose(bspline_derivative(3, 1, xs), fd, atol=1e-6)

    def test_d0_is_eval(self):
        xs = np.linspace(-2, 2, 9)
        assert np.allclose(bspline_derivative(3, 0, xs), bspline_eval(3, xs))


class TestPeriodic:
    def test_matches_plain_inside_period(self):
        assert bspline_periodic(3, 0.0, 12) == pytest.approx(bspline_eval(3, 0.0))
        assert bspline_periodic(3, 1.0, 12) == pytest.approx(bspline_eval(3, 1.0))

    def test_wraps(self):
        # distance 11 on a 12-period lattice is distance 1
        assert bspline_periodic(3, 11.0, 12) == pytest.approx(bspline_eval(3, 1.0))

    def test_small_period_accumulates(self):
        # period 2 with support 4 wide: shifted copies overlap
        val = bspline_periodic(3, 0.0, 2)
        expected = sum(bspline_eval(3, 2 * j) for j in range(-2, 3))
        assert val == pytest.approx(expected)


def brute_template_eval(t, x, y, theta=None):
    grid = t.grid
    s = grid.spacings
    total = 0.0
    c = t.coef_tensor
    for k in range(grid.shape_knots[0]):
        for l in range(grid.shape_knots[1]):
            base = bspline_eval(grid.order, x / s[0] - (k + 1)) * \
                bspline_eval(grid.order, y / s[1] - (l + 1))
            if grid.domain == "r2":
                total += c[k, l] * base
            else:
                for m in range(grid.shape_knots[2]):
                    total += c[k, l, m] * base * bspline_periodic(
                        grid.order, theta / s[2] - (m + 1), grid.shape_knots[2])
    return total


class TestTemplateEval:
    def test_zero_coefficients(self):
        grid = SplineGrid("r2", (20, 16), (5, 4))
        t = SplineTemplate(grid, np.zeros(grid.ncoef))
        pts = np.array([[3.0, 4.0], [10.0, 8.0]])
        assert np.all(template_eval(t, pts) == 0.0)

    def test_single_basis_at_knot_center(self):
        grid = SplineGrid("r2", (20, 20), (5, 5))
        c = np.zeros(grid.ncoef)
        c[2 * 5 + 3] = 1.0  # knot (k,l) = (3,4) 1-based
        t = SplineTemplate(grid, c)
        s = grid.spacings
        val = template_eval(t, (3 * s[0], 4 * s[1]))
        assert val == pytest.approx(bspline_eval(3, 0.0) ** 2)

    def test_matches_brute_force_r2(self):
        rng = np.random.default_rng(3)
        grid = SplineGrid("r2", (14, 10), (7, 5), order=2)
        t = SplineTemplate(grid, rng.standard_normal(grid.ncoef))
        for _ in range(10):
            x, y = rng.uniform(0, 15), rng.uniform(0, 11)
            assert template_eval(t, (x, y)) == pytest.approx(
                brute_template_eval(t, x, y), abs=1e-12)

    def test_matches_brute_force_se2(self):
        rng = np.random.default_rng(4)
        grid = SplineGrid("se2", (8, 8, 6), (4, 4, 6))
        t = SplineTemplate(grid, rng.standard_normal(grid.ncoef))
        for _ in range(10):
            x, y = rng.uniform(0, 9, size=2)
            theta = rng.uniform(-7, 7)
            assert template_eval(t, (x, y, theta)) == pytest.approx(
                brute_template_eval(t, x, y, theta), abs=1e-12)


class TestRasterize:
    def test_zero_template(self):
        grid = SplineGrid("se2", (8, 6, 4), (4, 3, 4))
        assert np.all(rasterize_template(SplineTemplate(grid, np.zeros(grid.ncoef))) == 0)

    def test_shape(self):
        grid = SplineGrid("se2", (8, 6, 4), (4, 3, 4))
        t = SplineTemplate(grid, np.ones(grid.ncoef))
        assert rasterize_template(t).shape == (8, 6, 4)
        grid2 = SplineGrid("r2", (9, 7), (3, 3))
        assert rasterize_template(SplineTemplate(grid2, np.ones(9))).shape == (9, 7)

    def test_matches_pointwise_eval(self):
        rng = np.random.default_rng(5)
        grid = SplineGrid("se2", (6, 5, 4), (3, 4, 4), order=1)
        t = SplineTemplate(grid, rng.standard_normal(grid.ncoef))
        arr = rasterize_template(t)
        step = grid.theta_step
        for i in range(6):
            for j in range(5):
                for z in range(4):
                    assert arr[i, j, z] == pytest.approx(
                        template_eval(t, (i + 1.0, j + 1.0, z * step)), abs=1e-12)


class TestSamplingRow:
    def test_zero_patch(self):
        grid = SplineGrid("r2", (12, 12), (4, 4))
        assert np.all(build_sampling_row(np.zeros((12, 12)), grid) == 0)

    def test_shape_mismatch_rejected(self):
        grid = SplineGrid("r2", (12, 12), (4, 4))
        with pytest.raises(ValueError):
            build_sampling_row(np.zeros((10, 12)), grid)

    def test_linearity(self):
        rng = np.random.default_rng(6)
        grid = SplineGrid("se2", (8, 8, 6), (4, 4, 6))
        f = rng.standard_normal(grid.shape_pixels)
        g = rng.standard_normal(grid.shape_pixels)
        a, b = 1.7, -0.4
        lhs = build_sampling_row(a * f + b * g, grid)
        rhs = a * build_sampling_row(f, grid) + b * build_sampling_row(g, grid)
        assert np.allclose(lhs, rhs, atol=1e-12)

    def test_single_basis_patch_gives_gram_row(self):
        # rasterized basis function correlated against the basis equals the
        # corresponding row of the discrete Gram (direct summation oracle)
        grid = SplineGrid("r2", (16, 16), (4, 4))
        c = np.zeros(grid.ncoef)
        idx = 2 * 4 + 1
        c[idx] = 1.0
        patch = rasterize_template(SplineTemplate(grid, c))
        row = build_sampling_row(patch, grid)
        gx, gy = gram_matrices(grid)
        gram = np.kron(gx, gy)
        assert np.allclose(row, gram[idx], atol=1e-12)
        assert np.argmax(row) == idx  # dominant entry at that knot

    def test_sc_equals_discrete_inner_product(self):
        # (S c) equals the plain discrete sum of rasterized template * patch
        rng = np.random.default_rng(7)
        for domain, pix, knots in [("r2", (15, 11), (5, 4)),
                                   ("se2", (9, 9, 8), (3, 3, 4))]:
            grid = SplineGrid(domain, pix, knots)
            t = SplineTemplate(grid, rng.standard_normal(grid.ncoef))
            patches = [rng.standard_normal(pix) for _ in range(4)]
            S = build_sampling_matrix(patches, grid)
            raster = rasterize_template(t)
            for i, p in enumerate(patches):
                assert S[i] @ t.coef == pytest.approx(np.sum(raster * p), abs=1e-10)

    def test_raster_row_roundtrip_consistency(self):
        # row(raster(t)) equals Gram applied to the coefficients
        rng = np.random.default_rng(8)
        grid = SplineGrid("se2", (10, 10, 6), (5, 5, 6))
        t = SplineTemplate(grid, rng.standard_normal(grid.ncoef))
        row = build_sampling_row(rasterize_template(t), grid)
        gx, gy, gth = gram_matrices(grid)
        expected = np.einsum("ka,lb,mc,abc->klm", gx, gy, gth,
                             t.coef_tensor).reshape(-1)
        assert np.allclose(row, expected, atol=1e-10)


class TestProjection:
    def test_projection_recovers_spline_patch(self):
        rng = np.random.default_rng(9)
        grid = SplineGrid("r2", (18, 18), (6, 6))
        t = SplineTemplate(grid, rng.standard_normal(grid.ncoef))
        proj = project_to_basis(rasterize_template(t), grid)
        assert np.allclose(proj.coef, t.coef, atol=1e-8)

    def test_projection_se2(self):
        rng = np.random.default_rng(10)
        grid = SplineGrid("se2", (10, 10, 8), (5, 5, 4))
        t = SplineTemplate(grid, rng.standard_normal(grid.ncoef))
        proj = project_to_basis(rasterize_template(t), grid)
        assert np.allclose(proj.coef, t.coef, atol=1e-8)


class TestTemplateFile:
    def test_roundtrip_r2(self, tmp_path):
        rng = np.random.default_rng(11)
        grid = SplineGrid("r2", (25, 21), (5, 7), order=3)
        t = SplineTemplate(grid, rng.standard_normal(grid.ncoef), loss="logistic")
        path = tmp_path / "t.se2t"
        write_template(path, t)
        back = read_template(path)
        assert back.grid == grid
        assert back.loss == "logistic"
        assert np.array_equal(back.coef, t.coef)

    def test_roundtrip_se2_bit_exact(self, tmp_path):
        rng = np.random.default_rng(12)
        grid = SplineGrid("se2", (9, 9, 8), (3, 3, 4), order=2)
        t = SplineTemplate(grid, rng.standard_normal(grid.ncoef), loss="average")
        p1, p2 = tmp_path / "a.se2t", tmp_path / "b.se2t"
        write_template(p1, t)
        write_template(p2, read_template(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_layout(self, tmp_path):
        grid = SplineGrid("r2", (4, 4), (2, 2), order=1)
        t = SplineTemplate(grid, np.zeros(4))
        path = tmp_path / "t.se2t"
        write_template(path, t)
        raw = path.read_bytes()
        assert raw[:4] == b"SE2T"
        assert len(raw) == 4 + 2 + 1 + 1 + 2 + 6 * 4 + 4 * 8

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.se2t"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError):
            read_template(path)
