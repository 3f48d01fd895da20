"""OMP and k-SVD training checks, including exhaustive-search oracles."""

import itertools

import numpy as np
import pytest

from jotrecon.ksvd import KsvdConfig, ksvd_train, omp, omp_batch
from jotrecon.sparse import Dictionary


class TestOmp:
    def test_scaled_atom_exact(self):
        d = Dictionary.random_unit(12, 24, seed=0)
        y = 3.0 * d.atoms[:, 7]
        code = omp(d, y, sparsity=1)
        expected = np.zeros(24)
        expected[7] = 3.0
        np.testing.assert_allclose(code, expected, atol=1e-12)

    def test_orthogonal_input_zero_code(self):
        # atoms span a strict subspace; a vector from the orthogonal
        # complement yields a zero code and residual = y
        rng = np.random.default_rng(1)
        basis, _ = np.linalg.qr(rng.standard_normal((8, 8)))
        d = Dictionary(atoms=basis[:, :5])
        y = basis[:, 6] * 2.0
        code = omp(d, y, sparsity=3)
        np.testing.assert_allclose(code, 0.0, atol=1e-10)

    def test_residual_norm_nonincreasing(self):
        rng = np.random.default_rng(2)
        d = Dictionary.random_unit(16, 40, seed=2)
        y = rng.standard_normal(16)
        prev = np.linalg.norm(y)
        for t in range(1, 8):
            code = omp(d, y, sparsity=t)
            res = np.linalg.norm(y - d.atoms @ code)
            assert res <= prev + 1e-12
            prev = res

    def test_no_duplicate_selection_and_support_budget(self):
        rng = np.random.default_rng(3)
        d = Dictionary.random_unit(20, 60, seed=3)
        for _ in range(20):
            y = rng.standard_normal(20)
            code = omp(d, y, sparsity=5)
            assert np.count_nonzero(code) <= 5

    def test_two_sparse_recovery_vs_exhaustive_oracle(self):
        # reduced 64x32 instance: brute-force over all C(32,2) supports
        rng = np.random.default_rng(4)
        d = Dictionary.random_unit(64, 32, seed=4)
        hits = 0
        trials = 0
        for _ in range(20):
            sup = rng.choice(32, size=2, replace=False)
            sub = d.atoms[:, sup]
            if np.linalg.svd(sub, compute_uv=False)[-1] <= 0.5:
                continue
            trials += 1
            z = rng.uniform(1.0, 3.0, 2) * rng.choice([-1, 1], 2)
            y = sub @ z
            code = omp(d, y, sparsity=2)
            # exhaustive 2-subset least squares
            best, best_err = None, np.inf
            for pair in itertools.combinations(range(32), 2):
                a = d.atoms[:, pair]
                c, *_ = np.linalg.lstsq(a, y, rcond=None)
                err = np.linalg.norm(y - a @ c)
                if err < best_err:
                    best, best_err = set(pair), err
            assert set(np.nonzero(code)[0]) == best
            np.testing.assert_allclose(d.atoms @ code, y, atol=1e-9)
            hits += 1
        assert trials > 10  # the filter kept enough cases meaningful

    def test_batch_matches_single(self):
        rng = np.random.default_rng(5)
        d = Dictionary.random_unit(10, 30, seed=5)
        Y = rng.standard_normal((7, 10))
        batch = omp_batch(d.atoms, Y, 4)
        for i in range(7):
            np.testing.assert_allclose(batch[i], omp(d, Y[i], 4), atol=1e-12)


class TestKsvdTrain:
    def test_zero_iterations_returns_seeded_init(self):
        rng = np.random.default_rng(6)
        Y = rng.standard_normal((50, 16))
        cfg = KsvdConfig(num_atoms=20, sparsity=2, iterations=0, seed=123)
        d1 = ksvd_train(Y, cfg)
        d2 = ksvd_train(Y, cfg)
        np.testing.assert_array_equal(d1.atoms, d2.atoms)
        ref = np.random.default_rng(123).standard_normal((16, 20))
        ref /= np.linalg.norm(ref, axis=0)
        np.testing.assert_allclose(d1.atoms, ref, atol=1e-12)

    def test_error_nonincreasing(self):
        rng = np.random.default_rng(7)
        Y = rng.standard_normal((500, 16))
        cfg = KsvdConfig(num_atoms=32, sparsity=3, iterations=10, seed=7)
        history = []
        ksvd_train(Y, cfg, history=history)
        diffs = np.diff(history)
        assert np.all(diffs <= 1e-9 * np.maximum(np.abs(history[:-1]), 1.0))

    def test_generative_recovery_one_sparse(self):
        # noiseless 1-sparse data over well-separated (orthogonal) atoms
        rng = np.random.default_rng(8)
        basis, _ = np.linalg.qr(rng.standard_normal((16, 16)))
        true = Dictionary(atoms=basis[:, :12])
        idx = rng.integers(0, 12, size=600)
        amp = rng.uniform(1.0, 4.0, size=600)
        Y = (true.atoms[:, idx] * amp).T
        cfg = KsvdConfig(num_atoms=12, sparsity=1, iterations=25, seed=9)
        learned = ksvd_train(Y, cfg)
        corr = np.abs(learned.atoms.T @ true.atoms)
        recovered = (corr.max(axis=0) >= 0.999).sum()
        assert recovered >= 11  # allow one unlucky atom

    def test_unit_norms_after_training(self):
        rng = np.random.default_rng(10)
        Y = rng.standard_normal((200, 9))
        cfg = KsvdConfig(num_atoms=18, sparsity=2, iterations=5, seed=11)
        d = ksvd_train(Y, cfg)
        np.testing.assert_allclose(np.linalg.norm(d.atoms, axis=0), 1.0,
                                   atol=1e-10)

    def test_deterministic_bytes(self):
        rng = np.random.default_rng(12)
        Y = rng.standard_normal((150, 9))
        cfg = KsvdConfig(num_atoms=16, sparsity=2, iterations=4, seed=13)
        a = ksvd_train(Y, cfg)
        b = ksvd_train(Y, cfg)
        assert a.atoms.tobytes() == b.atoms.tobytes()

    def test_rejects_degenerate_inputs(self):
        cfg = KsvdConfig(num_atoms=8, sparsity=2, iterations=1)
        with pytest.raises(ValueError):
            ksvd_train(np.zeros((20, 9)), cfg)
        with pytest.raises(ValueError):
            ksvd_train(np.ones((4, 9)), cfg)  # fewer patches than atoms
