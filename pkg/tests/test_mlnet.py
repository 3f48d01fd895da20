"""Unrolled network: forward equivalence, hand backprop vs finite
differences, and training behavior."""

import numpy as np
import pytest

from jotrecon.errors import NonFiniteError
from jotrecon.mlnet import (MLNetParams, PatchDataset, TrainConfig, backward,
                            decode_loss_and_grad, forward, init_from_ista,
                            reconstruct, train)
from jotrecon.sensor import (ForwardOperator, IntensityImage, RngState,
                             make_threshold_pattern, simulate)
from jotrecon.solvers import PatchBinaryModel, default_code_init, ista_step
from jotrecon.sparse import Dictionary, Nonlinearity, PatchGrid


def random_instance(seed, n_side=4, m=16, num_frames=3, oversampling=1,
                    sigma=0.6, batch=1, qmax=5):
    """Small patch problem: local operator, random bits and thresholds."""
    rng = np.random.default_rng(seed)
    n = n_side * n_side
    local = ForwardOperator((n_side, n_side), oversampling=oversampling,
                            psf_sigma=sigma)
    jot = local.jot_shape[0] * local.jot_shape[1]
    q = rng.integers(1, qmax + 1, size=(batch, jot))
    n_on = rng.integers(0, num_frames + 1, size=(batch, jot))
    model = PatchBinaryModel(local.dense(), q, n_on, num_frames)
    d = Dictionary.random_unit(n, m, seed=seed + 1)
    rho = Nonlinearity.softplus(beta=5.0)
    z0 = rng.standard_normal((batch, m)) * 0.5
    return model, d, rho, z0


class TestForward:
    @pytest.mark.parametrize("layers", [1, 5, 20])
    def test_ista_init_equals_ista_steps(self, layers):
        model, d, rho, z0 = random_instance(layers, batch=3)
        eta, mu = 0.05, 0.3
        params = init_from_ista(d, eta, mu, layers)
        z_net, _ = forward(params, model, rho, z0)
        z_ref = z0.copy()
        for _ in range(layers):
            z_ref = ista_step(z_ref, model, d, rho, eta, mu)
        assert np.max(np.abs(z_net - z_ref)) <= 1e-12

    def test_zero_layers_returns_init(self):
        model, d, rho, z0 = random_instance(7)
        params = MLNetParams(A=[], Q=[], W=[], theta=[])
        z, cache = forward(params, model, rho, z0)
        np.testing.assert_array_equal(z, z0)
        assert cache == []

    def test_zero_w_zero_theta_is_identity(self):
        model, d, rho, z0 = random_instance(8)
        n, m = d.atom_dim, d.num_atoms
        params = MLNetParams(A=[d.atoms.copy()], Q=[d.atoms.copy()],
                             W=[np.zeros((m, n))], theta=[np.zeros(m)])
        z, _ = forward(params, model, rho, z0)
        np.testing.assert_array_equal(z, z0)

    def test_huge_theta_kills_everything(self):
        model, d, rho, z0 = random_instance(9)
        params = init_from_ista(d, 0.1, 0.2, 3)
        for t in range(3):
            params.theta[t][:] = 1e9
        z, cache = forward(params, model, rho, z0)
        # dead after the first layer and onward
        np.testing.assert_array_equal(cache[1]["z"], 0.0)
        np.testing.assert_array_equal(z, 0.0)

    def test_sparsity_never_below_theta0(self):
        for seed in range(5):
            model, d, rho, z0 = random_instance(20 + seed, batch=4)
            params = init_from_ista(d, 0.08, 1.0, 4)
            z_th, _ = forward(params, model, rho, z0)
            free = init_from_ista(d, 0.08, 0.0, 4)
            # mu = 0 gives theta = 0 exactly
            z_free, _ = forward(free, model, rho, z0)
            assert (z_th == 0).mean() >= (z_free == 0).mean()

    def test_nonfinite_activation_names_layer(self):
        model, d, rho, z0 = random_instance(10)
        params = init_from_ista(d, 1.0, 0.1, 2)
        params.W[1][:] = 1e308
        with pytest.raises(NonFiniteError, match="layer 1"):
            forward(params, model, rho, z0 * 1e5)


class TestBackward:
    def _kink_safe_instance(self, layers=2, m=16):
        """Sample instances until no |u| sits within 1e-6 of theta."""
        for seed in range(100, 200):
            model, d, rho, z0 = random_instance(seed, m=m)
            rng = np.random.default_rng(seed + 1000)
            params = init_from_ista(d, 0.08, 0.5, layers)
            for t in range(layers):
                params.A[t] += 0.05 * rng.standard_normal(params.A[t].shape)
                params.Q[t] += 0.05 * rng.standard_normal(params.Q[t].shape)
                params.W[t] += 0.02 * rng.standard_normal(params.W[t].shape)
                params.theta[t] = np.abs(
                    params.theta[t] + 0.02 * rng.standard_normal(m))
            target = rng.random((1, d.atom_dim)) * 2
            _, cache = forward(params, model, rho, z0)
            ok = all(np.min(np.abs(np.abs(c["u"]) - params.theta[t])) > 1e-6
                     for t, c in enumerate(cache))
            if ok:
                return model, d, rho, z0, params, target
        raise RuntimeError("no kink-safe instance found")

    def test_zero_loss_grad_gives_zero_grads(self):
        model, d, rho, z0 = random_instance(30)
        params = init_from_ista(d, 0.05, 0.3, 2)
        _, cache = forward(params, model, rho, z0)
        grads, gin = backward(params, model, rho, cache,
                              np.zeros((1, d.num_atoms)))
        for kind in ("A", "Q", "W", "theta"):
            for t in range(2):
                assert np.all(grads[kind][t] == 0.0)
        assert np.all(gin == 0.0)

    def test_theta_grad_zero_on_dead_units(self):
        model, d, rho, z0, params, target = self._kink_safe_instance()
        zT, cache = forward(params, model, rho, z0)
        _, lgrad = decode_loss_and_grad(d, rho, zT, target)
        grads, _ = backward(params, model, rho, cache, lgrad)
        t_last = params.num_layers - 1
        dead = np.abs(cache[t_last]["u"][0]) < params.theta[t_last]
        assert np.all(grads["theta"][t_last][dead] == 0.0)

    def test_all_parameter_grads_match_finite_differences(self):
        model, d, rho, z0, params, target = self._kink_safe_instance()

        def loss_at(p):
            zT, _ = forward(p, model, rho, z0)
            loss, _ = decode_loss_and_grad(d, rho, zT, target)
            return float(loss.sum())

        zT, cache = forward(params, model, rho, z0)
        _, lgrad = decode_loss_and_grad(d, rho, zT, target)
        grads, _ = backward(params, model, rho, cache, lgrad)

        worst = 0.0
        for kind in ("A", "Q", "W", "theta"):
            for t in range(params.num_layers):
                tensor = getattr(params, kind)[t]
                g = grads[kind][t]
                # entries far below the tensor's dominant gradient are
                # measured against the tensor scale, not against noise
                floor = 1e-6 * max(float(np.abs(g).max()), 1.0)
                it = np.nditer(tensor, flags=["multi_index"])
                for _ in it:
                    ix = it.multi_index
                    h = 1e-4 * max(abs(tensor[ix]), 1.0)
                    orig = tensor[ix]
                    tensor[ix] = orig + h
                    lp = loss_at(params)
                    tensor[ix] = orig - h
                    lm = loss_at(params)
                    tensor[ix] = orig
                    fd = (lp - lm) / (2 * h)
                    rel = abs(g[ix] - fd) / (abs(g[ix]) + abs(fd) + floor)
                    worst = max(worst, rel)
        assert worst <= 1e-3

    def test_input_gradient_matches_finite_differences(self):
        model, d, rho, z0, params, target = self._kink_safe_instance()

        def loss_at(z):
            zT, _ = forward(params, model, rho, z)
            loss, _ = decode_loss_and_grad(d, rho, zT, target)
            return float(loss.sum())

        zT, cache = forward(params, model, rho, z0)
        _, lgrad = decode_loss_and_grad(d, rho, zT, target)
        _, gin = backward(params, model, rho, cache, lgrad)
        for j in range(z0.shape[1]):
            h = 1e-5
            zp = z0.copy()
            zp[0, j] += h
            zm = z0.copy()
            zm[0, j] -= h
            fd = (loss_at(zp) - loss_at(zm)) / (2 * h)
            rel = abs(gin[0, j] - fd) / (abs(gin[0, j]) + abs(fd) + 1e-8)
            assert rel <= 1e-3


def make_dataset(seed, count=40, n_side=4, m=20, num_frames=3):
    rng = np.random.default_rng(seed)
    n = n_side * n_side
    local = ForwardOperator((n_side, n_side), oversampling=1, psf_sigma=0.5)
    hmat = local.dense()
    d = Dictionary.random_unit(n, m, seed=seed)
    rho = Nonlinearity.softplus(beta=10.0)
    targets = rng.uniform(0.0, 3.0, size=(count, n))
    lam = targets @ hmat.T
    q = make_threshold_pattern((count, hmat.shape[0]), [1, 2, 3])
    gen = np.random.default_rng(seed + 5)
    n_on = np.zeros((count, hmat.shape[0]), dtype=np.int64)
    for _ in range(num_frames):
        counts = gen.poisson(np.maximum(lam, 0.0))
        n_on += counts >= q
    model = PatchBinaryModel(hmat, q, n_on, num_frames)
    return PatchDataset(model=model, targets=targets), d, rho


class TestTrain:
    def test_fixed_point_when_targets_match_output(self):
        dataset, d, rho = make_dataset(60, count=20)
        params = init_from_ista(d, 0.05, 0.2, 2)
        z0 = np.zeros(d.num_atoms)
        zT, _ = forward(params, dataset.model, rho, z0)
        dec = rho(zT @ d.atoms.T)
        fixed = PatchDataset(model=dataset.model, targets=dec)
        cfg = TrainConfig(batch_size=8, epochs=2, seed=3)
        trained, curve = train(params, fixed, cfg, d, rho, z0=z0)
        for t in range(2):
            assert np.max(np.abs(trained.A[t] - params.A[t])) <= 1e-6
            assert np.max(np.abs(trained.theta[t] - params.theta[t])) <= 1e-6
        assert curve[0][1] <= 1e-18

    def test_loss_decreases_first_epochs(self):
        dataset, d, rho = make_dataset(61, count=60)
        params = init_from_ista(d, 0.02, 0.5, 3)
        cfg = TrainConfig(batch_size=10, epochs=6, seed=4, lr=2e-3)
        trained, curve = train(params, dataset, cfg, d, rho)
        losses = [c[1] for c in curve]
        assert np.all(np.isfinite(losses))
        assert losses[-1] < losses[0]

    def test_deterministic_under_seed(self):
        dataset, d, rho = make_dataset(62, count=30)
        params = init_from_ista(d, 0.02, 0.5, 2)
        cfg = TrainConfig(batch_size=8, epochs=3, seed=5)
        a, _ = train(params, dataset, cfg, d, rho)
        b, _ = train(params, dataset, cfg, d, rho)
        for t in range(2):
            assert a.A[t].tobytes() == b.A[t].tobytes()
            assert a.W[t].tobytes() == b.W[t].tobytes()

    def test_nonfinite_loss_reported(self):
        dataset, d, rho = make_dataset(63, count=20)
        params = init_from_ista(d, 0.05, 0.2, 2)
        params.W[0][:] = 1e200
        cfg = TrainConfig(batch_size=8, epochs=1, seed=6)
        with pytest.raises(NonFiniteError):
            train(params, dataset, cfg, d, rho)


class TestReconstruct:
    def test_matches_solver_ista_trajectory(self):
        rng = np.random.default_rng(70)
        op = ForwardOperator((10, 10), oversampling=2, psf_sigma=1.0)
        truth = IntensityImage(data=rng.uniform(0, 4, (10, 10)), peak=4.0)
        thr = make_threshold_pattern((20, 20), [1, 2, 3, 4])
        st = simulate(truth, op, thr, 4, RngState(seed=71))
        grid = PatchGrid(image_shape=(10, 10), patch_side=8, stride=2)
        d = Dictionary.random_unit(64, 96, seed=72)
        rho = Nonlinearity.softplus(beta=10.0)
        eta, mu, layers = 0.02, 0.4, 5
        params = init_from_ista(d, eta, mu, layers)
        img = reconstruct(params, st, op, grid, d, rho, peak=4.0)

        model = PatchBinaryModel.from_stack(st, grid, op)
        z = np.tile(default_code_init(d, rho, 4.0), (model.num_patches, 1))
        for _ in range(layers):
            z = ista_step(z, model, d, rho, eta, mu)
        from jotrecon.solvers import assemble_codes
        ref = assemble_codes(d, rho, z, grid)
        assert np.max(np.abs(img.data - ref)) <= 1e-12

    def test_all_dark_input_near_zero_output(self):
        op = ForwardOperator((10, 10), oversampling=1, psf_sigma=0.0)
        frames = np.zeros((4, 10, 10), dtype=np.uint8)
        thr = np.ones((10, 10), dtype=np.int64)
        from jotrecon.sensor import BinaryFrameStack
        st = BinaryFrameStack(frames=frames, thresholds=thr)
        grid = PatchGrid(image_shape=(10, 10), patch_side=8, stride=2)
        d = Dictionary.random_unit(64, 96, seed=73)
        rho = Nonlinearity.softplus(beta=10.0)
        params = init_from_ista(d, 0.05, 0.1, 30)
        img = reconstruct(params, st, op, grid, d, rho, peak=4.0)
        assert img.data.mean() < 0.5  # pulled far down from peak 4.0
