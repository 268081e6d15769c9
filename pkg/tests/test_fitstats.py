import numpy as np
import pytest
from scipy.linalg import subspace_angles

from oodeval import parallel
from oodeval.errors import DataError, DegenerateError, FormatError
from oodeval.fitstats import (
    build_knn_index,
    class_covariance,
    fit_class_means,
    fit_global_gaussian,
    fit_kl_refs,
    fit_react_threshold,
    fit_shared_covariance,
    fit_state,
    fit_vim,
    load_state,
    save_state,
    states_equal,
    symmetric_pinv,
    vim_dim,
    vim_offset,
)

from .conftest import make_synthetic
from .oracles import covariance_loop


class TestClassMeans:
    def test_two_points(self):
        means = fit_class_means(np.array([[0.0, 0.0], [2.0, 2.0]]), np.array([0, 0]), 1)
        np.testing.assert_array_equal(means, [[1.0, 1.0]])

    def test_one_sample_per_class(self):
        x = np.array([[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]])
        np.testing.assert_array_equal(fit_class_means(x, np.array([0, 1, 2]), 3), x)

    def test_random_vs_brute_force(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(50, 8))
        y = np.arange(50) % 3
        expected = np.array([[sum(x[i, j] for i in range(50) if y[i] == c) / np.sum(y == c) for j in range(8)] for c in range(3)])
        np.testing.assert_allclose(fit_class_means(x, y, 3), expected, atol=1e-6)

    def test_empty_class_named(self):
        with pytest.raises(DataError, match="class 1"):
            fit_class_means(np.zeros((3, 2)), np.array([0, 2, 2]), 3)


class TestCovariance:
    def test_isotropic_data_gives_identity(self):
        rng = np.random.default_rng(2)
        n = 400
        a = rng.normal(size=(n, 4))
        a -= a.mean(axis=0)
        q, _ = np.linalg.qr(a)
        x = np.sqrt(n) * q  # zero column means, x^T x / n = I
        means = fit_class_means(x, np.zeros(n, dtype=int), 1)
        np.testing.assert_allclose(fit_shared_covariance(x, np.zeros(n, dtype=int), means), np.eye(4), atol=1e-5)

    def test_all_at_class_mean_gives_zero(self):
        x = np.array([[1.0, 2.0], [1.0, 2.0], [-3.0, 0.0]])
        y = np.array([0, 0, 1])
        pinv = fit_shared_covariance(x, y, fit_class_means(x, y, 2))
        np.testing.assert_array_equal(pinv, np.zeros((2, 2)))

    def test_random_vs_double_loop(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(200, 5))
        y = np.arange(200) % 4
        means = fit_class_means(x, y, 4)
        expected = covariance_loop(x.tolist(), y.tolist(), means.tolist())
        np.testing.assert_allclose(class_covariance(x, y, means), expected, rtol=1e-6)

    def test_pinv_drops_tiny_eigenvalues(self):
        sigma = np.diag([4.0, 1e-12, 0.0])
        np.testing.assert_allclose(symmetric_pinv(sigma), np.diag([0.25, 0.0, 0.0]))

    def test_pinv_is_symmetric(self):
        a = np.random.default_rng(4).normal(size=(30, 6))
        p = symmetric_pinv(a.T @ a)
        np.testing.assert_allclose(p, p.T, atol=1e-6)

    def test_singular_duplicated_columns(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(100, 3))
        x = np.hstack([x, x[:, :1]])
        y = np.arange(100) % 2
        means = fit_class_means(x, y, 2)
        cov = class_covariance(x, y, means)
        p = fit_shared_covariance(x, y, means)
        assert np.all(np.isfinite(p))
        # Moore-Penrose identity on the covariance
        np.testing.assert_allclose(cov @ p @ cov, cov, atol=1e-9)


class TestGlobalGaussian:
    def test_repeated_point(self):
        mean, pinv = fit_global_gaussian(np.tile([1.5, -2.0], (5, 1)))
        np.testing.assert_array_equal(mean, [1.5, -2.0])
        np.testing.assert_array_equal(pinv, np.zeros((2, 2)))

    def test_two_points_on_axis(self):
        mean, pinv = fit_global_gaussian(np.array([[-1.0, 0.0], [1.0, 0.0]]))
        np.testing.assert_array_equal(mean, [0.0, 0.0])
        np.testing.assert_allclose(pinv, np.diag([1.0, 0.0]), atol=1e-12)

    def test_random_vs_brute_force(self):
        x = np.random.default_rng(6).normal(size=(120, 4)) * [1, 2, 3, 4]
        mean, pinv = fit_global_gaussian(x)
        m = [sum(x[i, j] for i in range(120)) / 120 for j in range(4)]
        cov = covariance_loop(x.tolist(), [0] * 120, [m])
        np.testing.assert_allclose(mean, m, rtol=1e-6)
        np.testing.assert_allclose(pinv, np.linalg.inv(cov), rtol=1e-6)

    def test_single_class_shared_equals_global(self):
        x = np.random.default_rng(7).normal(size=(80, 5))
        y = np.zeros(80, dtype=int)
        shared = fit_shared_covariance(x, y, fit_class_means(x, y, 1))
        np.testing.assert_allclose(shared, fit_global_gaussian(x)[1], atol=1e-9)


class TestVim:
    @pytest.mark.parametrize(
        "d,expected", [(4096, 1000), (2048, 1000), (2047, 512), (768, 512), (767, 384), (10, 5), (7, 4), (1, 1)]
    )
    def test_dimension_rule(self, d, expected):
        assert vim_dim(d) == expected

    def test_identity_layer_zero_offset(self):
        np.testing.assert_array_equal(vim_offset(np.eye(3), np.zeros(3)), np.zeros(3))

    def test_offset_solves_least_squares(self):
        rng = np.random.default_rng(8)
        w, b = rng.normal(size=(6, 3)), rng.normal(size=3)
        u = vim_offset(w, b)
        # W^T u = -b for a full-row-rank W^T
        np.testing.assert_allclose(w.T @ u, -b, atol=1e-10)

    def test_axis_data_is_degenerate(self):
        x = np.array([[1.0, 0.0], [2.0, 0.0], [-3.0, 0.0]])
        with pytest.raises(DegenerateError, match="degenerate residual space"):
            fit_vim(x, np.ones((3, 2)), np.eye(2), np.zeros(2), dim=1)

    def test_basis_matches_svd_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(300, 10)) * np.linspace(3, 0.5, 10)
        w, b = rng.normal(size=(10, 4)), rng.normal(size=4)
        logits = x @ w + b + 5.0
        vim = fit_vim(x, logits, w, b + 5.0, dim=5)
        f = x - vim.offset
        _, _, vt = np.linalg.svd(f, full_matrices=False)
        assert np.max(subspace_angles(vim.principal_basis, vt[:5].T)) < 1e-6
        np.testing.assert_allclose(vim.principal_basis.T @ vim.principal_basis, np.eye(5), atol=1e-6)

    def test_alpha_brute_force(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(100, 6))
        w, b = rng.normal(size=(6, 3)), np.full(3, 4.0)
        logits = x @ w + b
        vim = fit_vim(x, logits, w, b, dim=3)
        basis = vim.principal_basis
        proj = np.eye(6) - basis @ basis.T
        norms = [np.linalg.norm(proj @ (x[i] - vim.offset)) for i in range(100)]
        expected = sum(max(row) for row in logits.tolist()) / sum(norms)
        assert vim.alpha == pytest.approx(expected, rel=1e-9)

    def test_needs_enough_samples(self):
        with pytest.raises(DataError, match="at least D=4"):
            fit_vim(np.ones((3, 8)), np.ones((3, 2)), np.ones((8, 2)), np.zeros(2), dim=4)


class TestReact:
    def test_one_to_hundred(self):
        assert fit_react_threshold(np.arange(1, 101, dtype=float).reshape(10, 10)) == pytest.approx(99.01, abs=1e-12)

    def test_constant(self):
        assert fit_react_threshold(np.full((4, 5), 2.5)) == 2.5

    def test_between_98th_and_max(self):
        x = np.random.default_rng(11).normal(size=(50, 20))
        r = fit_react_threshold(x)
        assert np.percentile(x, 98) <= r <= x.max()


class TestKLRefs:
    def test_identical_logits_single_group(self):
        logits = np.tile([1.0, 3.0, 0.5], (4, 1))
        kl = fit_kl_refs(logits)
        p = np.exp(logits[0]) / np.exp(logits[0]).sum()
        np.testing.assert_allclose(kl.refs, [p], atol=1e-15)
        np.testing.assert_array_equal(kl.class_index, [1])

    def test_hand_mean(self):
        logits = np.log(np.array([[0.8, 0.2], [0.6, 0.4]]))
        kl = fit_kl_refs(logits)
        np.testing.assert_allclose(kl.refs, [[0.7, 0.3]], atol=1e-12)

    def test_rows_on_simplex(self):
        kl = fit_kl_refs(np.random.default_rng(12).normal(size=(200, 7)) * 3)
        np.testing.assert_allclose(kl.refs.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(kl.refs >= 0)

    def test_tie_goes_to_lowest_index(self):
        kl = fit_kl_refs(np.array([[2.0, 2.0, 0.0]]))
        np.testing.assert_array_equal(kl.class_index, [0])

    def test_label_grouping(self):
        logits = np.array([[5.0, 0.0], [4.0, 0.0]])
        kl = fit_kl_refs(logits, labels=np.array([0, 1]), grouping="label")
        np.testing.assert_array_equal(kl.class_index, [0, 1])


class TestKnnIndex:
    def test_normalization(self):
        idx = build_knn_index(np.array([[3.0, 4.0], [0.0, 0.0]]))
        np.testing.assert_allclose(idx.normalized, [[0.6, 0.8], [0.0, 0.0]])

    def test_k_clamped(self):
        assert build_knn_index(np.ones((10, 3))).k == 10
        assert build_knn_index(np.ones((10, 3)), 4).k == 4


class TestFittedState:
    def test_invariants(self, synthetic):
        s = fit_state(synthetic.bundle())
        np.testing.assert_allclose(s.shared_cov_pinv, s.shared_cov_pinv.T, atol=1e-6)
        np.testing.assert_allclose(s.global_cov_pinv, s.global_cov_pinv.T, atol=1e-6)
        np.testing.assert_allclose(s.vim.principal_basis.T @ s.vim.principal_basis, np.eye(s.vim.dim), atol=1e-6)
        np.testing.assert_allclose(s.kl_refs.refs.sum(axis=1), 1.0, atol=1e-6)
        assert s.vim.alpha > 0 and np.isfinite(s.react_r)
        assert s.vim.dim == vim_dim(8)

    def test_permutation_invariance(self):
        data = make_synthetic(4, n_train=200)
        a = fit_state(data.bundle())
        perm = np.random.default_rng(0).permutation(200)
        data.train_features = data.train_features[perm]
        data.train_logits = data.train_logits[perm]
        data.labels = data.labels[perm]
        b = fit_state(data.bundle())
        for name in ("class_means", "shared_cov_pinv", "global_mean", "global_cov_pinv"):
            np.testing.assert_allclose(getattr(a, name), getattr(b, name), atol=1e-9)
        np.testing.assert_allclose(a.kl_refs.refs, b.kl_refs.refs, atol=1e-9)
        assert a.react_r == b.react_r
        assert a.vim.alpha == pytest.approx(b.vim.alpha, abs=1e-9)
        assert np.max(subspace_angles(a.vim.principal_basis, b.vim.principal_basis)) < 1e-6
        # KNN index holds the same rows in permuted order
        np.testing.assert_array_equal(a.knn_index.normalized[perm], b.knn_index.normalized)

    def test_roundtrip(self, tmp_path, synthetic):
        s = fit_state(synthetic.bundle(), knn_k=50)
        save_state(tmp_path / "s.oods", s)
        back = load_state(tmp_path / "s.oods")
        assert states_equal(s, back)
        assert back.vim.alpha == s.vim.alpha and back.react_r == s.react_r and back.knn_index.k == 50

    def test_logits_only_roundtrip(self, tmp_path, synthetic):
        b = synthetic.bundle()
        b = type(b)(id_train=type(b.id_train)(b.id_train.logits), labels=b.labels, id_test=b.id_test, ood_sets=b.ood_sets)
        s = fit_state(b)
        assert not s.has_features
        save_state(tmp_path / "s.oods", s)
        assert states_equal(s, load_state(tmp_path / "s.oods"))

    def test_corrupt_state(self, tmp_path, synthetic):
        path = tmp_path / "s.oods"
        save_state(path, fit_state(synthetic.bundle()))
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(FormatError):
            load_state(path)
        save_state(path, fit_state(synthetic.bundle()))
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_state(path)

    def test_thread_count_does_not_change_bits(self, monkeypatch):
        data = make_synthetic(5, n_train=1500, d=16, C=4)
        monkeypatch.setattr(parallel, "thread_count", lambda: 1)
        a = fit_state(data.bundle())
        monkeypatch.setattr(parallel, "thread_count", lambda: 4)
        b = fit_state(data.bundle())
        assert states_equal(a, b)
