import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import max_principal_angle, top_k_eigenvectors
from pocs.features import FeatureMatrix, SyntheticSpec, generate_synthetic
from pocs.subspace import (
    COMPLETENESS_TOL,
    CROSS_ORTHOGONALITY_TOL,
    ORTHONORMALITY_TOL,
    RankPolicy,
    SubspaceModel,
    explained_variance_at,
    export_diagnostics_csv,
    fit,
    load_model,
    project_complement,
    project_principal,
    save_model,
    variance_diagnostics,
)


def assert_model_invariants(model: SubspaceModel):
    d, k = model.dim, model.k
    bk, bp = model.basis_k, model.basis_perp
    assert np.max(np.abs(bk.T @ bk - np.eye(k))) <= ORTHONORMALITY_TOL
    assert np.max(np.abs(bp.T @ bp - np.eye(d - k))) <= ORTHONORMALITY_TOL
    assert np.max(np.abs(bk.T @ bp)) <= CROSS_ORTHOGONALITY_TOL
    assert np.max(np.abs(bk @ bk.T + bp @ bp.T - np.eye(d))) <= COMPLETENESS_TOL
    assert np.all(model.singular_values >= 0)
    assert np.all(np.diff(model.singular_values) <= 0)


class TestRankPolicy:
    def test_fixed_validation(self):
        with pytest.raises(ValueError):
            RankPolicy.fixed(0)

    def test_variance_validation(self):
        for bad in (0.0, 1.0, 1.5):
            with pytest.raises(ValueError):
                RankPolicy.variance(bad)


class TestFit:
    def test_single_axis_data(self):
        rows = FeatureMatrix(data=np.array([[1.0, 0, 0], [2.0, 0, 0], [3.0, 0, 0]]))
        model = fit(rows, RankPolicy.fixed(1))
        np.testing.assert_allclose(model.mu, [2.0, 0.0, 0.0], atol=1e-15)
        # sign convention makes the principal direction +e1
        np.testing.assert_allclose(model.basis_k[:, 0], [1.0, 0.0, 0.0], atol=1e-12)
        assert model.singular_values[0] == pytest.approx(np.sqrt(2.0))
        assert np.all(model.singular_values[1:] <= 1e-12)
        assert_model_invariants(model)

    def test_matches_covariance_eigenvectors(self):
        # Oracle: dense symmetric eigendecomposition of the sample covariance.
        rng = np.random.default_rng(17)
        x = rng.standard_normal((6, 4))
        model = fit(FeatureMatrix(data=x), RankPolicy.fixed(2))
        oracle_basis = top_k_eigenvectors(x, 2)
        assert max_principal_angle(model.basis_k, oracle_basis) <= 1e-6

    def test_variance_threshold_recovers_k(self):
        spec = SyntheticSpec(d=32, k_true=4, n_id=200, n_ood=5, noise_sigma=0.01, seed=3)
        id_features, _ = generate_synthetic(spec)
        model = fit(id_features, RankPolicy.variance(0.95))
        # oracle: inspect the spectrum directly
        centered = id_features.data - id_features.data.mean(axis=0)
        energy = np.sort(np.linalg.svd(centered, compute_uv=False) ** 2)[::-1]
        cumulative = np.cumsum(energy) / energy.sum()
        expected_k = int(np.argmax(cumulative >= 0.95)) + 1
        assert model.k == expected_k == 4

    def test_invariants_wide_and_tall(self):
        rng = np.random.default_rng(23)
        for n, d in [(3, 10), (5, 17), (40, 8), (12, 12)]:
            model = fit(FeatureMatrix(data=rng.standard_normal((n, d))), RankPolicy.fixed(2))
            assert_model_invariants(model)
            assert model.singular_values.shape == (min(n, d),)

    def test_needs_two_samples(self):
        with pytest.raises(ValueError, match="N >= 2"):
            fit(FeatureMatrix(data=np.ones((1, 4))), RankPolicy.fixed(1))

    def test_zero_variance_is_hard_error(self):
        data = np.tile([0.3, 1.7, -2.2], (5, 1))
        with pytest.raises(ValueError, match="zero variance"):
            fit(FeatureMatrix(data=data), RankPolicy.fixed(1))

    def test_k_out_of_range(self):
        rng = np.random.default_rng(1)
        m = FeatureMatrix(data=rng.standard_normal((8, 4)))
        with pytest.raises(ValueError, match="1 <= k < d"):
            fit(m, RankPolicy.fixed(4))
        with pytest.raises(ValueError, match="1 <= k < d"):
            fit(m, RankPolicy.fixed(7))

    def test_deterministic_given_bytes(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((5, 30))  # N < d exercises basis completion
        a = fit(FeatureMatrix(data=x.copy()), RankPolicy.fixed(3))
        b = fit(FeatureMatrix(data=x.copy()), RankPolicy.fixed(3))
        for attr in ("mu", "basis_k", "basis_perp", "singular_values"):
            assert getattr(a, attr).tobytes() == getattr(b, attr).tobytes()


class TestProjections:
    def test_fixed_point_on_principal(self, model_factory):
        model = model_factory(7, 3, seed=2)
        z = model.basis_k @ np.array([1.0, -2.0, 0.5])
        np.testing.assert_allclose(project_principal(model, z), z, atol=1e-10)
        np.testing.assert_allclose(project_complement(model, z), 0.0, atol=1e-10)

    def test_annihilation_on_complement(self, model_factory):
        model = model_factory(7, 3, seed=2)
        z = model.basis_perp[:, 0]
        np.testing.assert_allclose(project_principal(model, z), 0.0, atol=1e-10)
        np.testing.assert_allclose(project_complement(model, z), z, atol=1e-10)

    def test_idempotence_and_resolution(self, model_factory):
        model = model_factory(12, 5, seed=3)
        rng = np.random.default_rng(4)
        for _ in range(20):
            z = rng.standard_normal(12) * 3
            p = project_principal(model, z)
            np.testing.assert_allclose(project_principal(model, p), p, atol=1e-10)
            c = project_complement(model, z)
            np.testing.assert_allclose(project_complement(model, c), c, atol=1e-10)
            np.testing.assert_allclose(p + c, z, atol=1e-9)

    @given(
        a=st.floats(-5, 5, allow_nan=False),
        b=st.floats(-5, 5, allow_nan=False),
        seed=st.integers(0, 2**31),
    )
    def test_linearity(self, a, b, seed):
        from conftest import random_model

        model = random_model(9, 4, seed=5)
        rng = np.random.default_rng(seed)
        z, w = rng.standard_normal(9), rng.standard_normal(9)
        for proj in (project_principal, project_complement):
            lhs = proj(model, a * z + b * w)
            rhs = a * proj(model, z) + b * proj(model, w)
            np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_dimension_mismatch(self, model_factory):
        model = model_factory(6, 2, seed=9)
        with pytest.raises(ValueError, match="length-6"):
            project_principal(model, np.ones(5))


class TestVarianceDiagnostics:
    def test_training_data_matches_spectrum(self):
        rng = np.random.default_rng(31)
        m = FeatureMatrix(data=rng.standard_normal((50, 8)))
        model = fit(m, RankPolicy.fixed(3))
        diag = variance_diagnostics(model, m, n_components=5)
        energy = model.singular_values**2
        expected = energy / energy.sum()
        np.testing.assert_allclose(diag.basis_ratios, expected[:5], atol=1e-8)
        assert not diag.basis_degenerate

    def test_degenerate_complement_flagged(self, model_factory):
        model = model_factory(6, 2, seed=12, mu_scale=0.0)
        coeff = np.random.default_rng(13).standard_normal((10, 2))
        data = coeff @ model.basis_k.T  # entirely inside the principal span
        diag = variance_diagnostics(model, FeatureMatrix(data=data), n_components=3)
        assert diag.complement_degenerate
        np.testing.assert_array_equal(diag.complement_ratios, 0.0)

    def test_isotropic_ood_is_flat(self, model_factory):
        # Monte-Carlo oracle: with 1e5 isotropic samples every basis
        # direction carries about 1/d of the variance.
        d = 16
        model = model_factory(d, 4, seed=14, mu_scale=0.0)
        rng = np.random.default_rng(15)
        ood = FeatureMatrix(data=rng.standard_normal((100_000, d)))
        diag = variance_diagnostics(model, ood, n_components=d - 4)
        assert np.max(np.abs(diag.basis_ratios - 1.0 / d)) < 2.5e-3

    def test_flat_ratio_deviation_shrinks_with_n(self, model_factory):
        d = 16
        model = model_factory(d, 4, seed=14, mu_scale=0.0)
        devs = []
        for n in (1_000, 100_000):
            data = np.random.default_rng(16).standard_normal((n, d))
            diag = variance_diagnostics(model, FeatureMatrix(data=data), n_components=d - 4)
            devs.append(np.max(np.abs(diag.basis_ratios - 1.0 / d)))
        assert devs[1] < devs[0]

    def test_component_range_checked(self, model_factory):
        model = model_factory(8, 3, seed=17)
        data = FeatureMatrix(data=np.random.default_rng(18).standard_normal((10, 8)))
        with pytest.raises(ValueError, match="n_components"):
            variance_diagnostics(model, data, n_components=0)
        with pytest.raises(ValueError, match="complement frame"):
            variance_diagnostics(model, data, n_components=6)

    def test_csv_export(self, tmp_path, model_factory):
        model = model_factory(8, 3, seed=19, mu_scale=0.0)
        rng = np.random.default_rng(20)
        id_m = FeatureMatrix(data=rng.standard_normal((30, 8)))
        ood_m = FeatureMatrix(data=rng.standard_normal((30, 8)))
        basis_csv, comp_csv = export_diagnostics_csv(model, id_m, ood_m, 4, tmp_path)
        for path in (basis_csv, comp_csv):
            lines = path.read_text().splitlines()
            assert lines[0] == "component_index,ratio_id,ratio_ood"
            assert len(lines) == 5


class TestModelBundle:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(25)
        model = fit(FeatureMatrix(data=rng.standard_normal((20, 6))), RankPolicy.fixed(2))
        save_model(model, tmp_path / "bundle", policy=RankPolicy.fixed(2))
        back = load_model(tmp_path / "bundle")
        for attr in ("mu", "basis_k", "basis_perp", "singular_values"):
            np.testing.assert_array_equal(getattr(back, attr), getattr(model, attr))
        assert back.k == model.k
        assert (tmp_path / "bundle" / "meta.json").is_file()

    def test_missing_bundle(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_model(tmp_path / "nowhere")

    def test_explained_variance_helper(self):
        rng = np.random.default_rng(26)
        model = fit(FeatureMatrix(data=rng.standard_normal((30, 5))), RankPolicy.fixed(2))
        energy = model.singular_values**2
        assert explained_variance_at(model) == pytest.approx(energy[:2].sum() / energy.sum())


class TestModelValidation:
    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError, match="orthonormal"):
            SubspaceModel(
                mu=np.zeros(3),
                basis_k=np.array([[1.0], [1.0], [0.0]]),
                basis_perp=np.eye(3)[:, 1:],
                singular_values=np.array([1.0, 0.5, 0.1]),
                k=1,
            )

    def test_rejects_increasing_singular_values(self):
        q = np.eye(3)
        with pytest.raises(ValueError, match="non-increasing"):
            SubspaceModel(
                mu=np.zeros(3),
                basis_k=q[:, :1],
                basis_perp=q[:, 1:],
                singular_values=np.array([0.5, 1.0, 0.1]),
                k=1,
            )
