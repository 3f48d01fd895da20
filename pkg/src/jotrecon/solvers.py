"""Iterative reconstruction from binary frame stacks.

Two families:

  * ml_reconstruct - projected gradient descent on the latent image with
    no prior (the measurement likelihood alone), monotone under the
    default backtracking line search.
  * ista_reconstruct / fista_reconstruct - proximal gradient descent on
    sparse patch codes z minimizing  nll(H rho(D z); B) + mu*|z|_1,
    solved independently per overlapping patch and assembled by overlap
    averaging.  FISTA adds Nesterov momentum with a function-value
    restart, keeping the objective nonincreasing.

Each image patch sees only the jot window its footprint maps to under
the forward operator; the window is modeled with a local operator built
exactly like the global one (replication + PSF with reflective edges),
so every patch solve shares one small dense matrix.  Identical (q, b)
measurements inside a window are folded into on/off counts once.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import likelihood as lk
from .errors import DimensionMismatchError, DivergenceError, NonFiniteError
from .sensor import ForwardOperator, IntensityImage
from .sparse import PatchGrid, average_patches

_ETA_MIN = 1e-30


@dataclass
class SolverConfig:
    """Knobs shared by the ML and proximal solvers.

    mu None means the scale-free default: 5% of the infinity norm of the
    initial code gradient.  peak is the dynamic-range value used by the
    max_dynamic_range initialization.
    """

    mu: float | None = None
    max_iters: int = 200
    step_policy: str = "backtracking"   # or "fixed"
    eta: float | None = None            # fixed-policy step size
    stop_tol: float = 1e-6
    init_mode: str = "max_dynamic_range"  # or "zeros", "custom"
    init_value: np.ndarray | None = None
    peak: float | None = None
    restart: bool = True
    armijo: float = 1e-4
    backtrack: float = 0.5
    grow: float = 1.0  # classic backtracking: the step only shrinks

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.mu is not None and self.mu <= 0:
            raise ValueError("mu must be positive")
        if self.step_policy not in ("backtracking", "fixed"):
            raise ValueError(f"unknown step policy: {self.step_policy!r}")
        if self.init_mode not in ("max_dynamic_range", "zeros", "custom"):
            raise ValueError(f"unknown init mode: {self.init_mode!r}")


@dataclass
class SolveTrace:
    """Per-iteration objective / PSNR / wall-time record."""

    objective: list = field(default_factory=list)
    psnr: list | None = None
    millis: list = field(default_factory=list)

    def to_csv(self, path, include_millis=True):
        with open(path, "w") as f:
            f.write("iteration,objective,psnr,millis\n")
            for i, obj in enumerate(self.objective):
                ps = "" if self.psnr is None else f"{self.psnr[i]:.6f}"
                ms = f"{self.millis[i]:.3f}" if include_millis else ""
                f.write(f"{i + 1},{obj:.10e},{ps},{ms}\n")


def soft_shrink(t, theta):
    """Two-sided soft shrinkage sign(t) * max(|t| - theta, 0)."""
    return np.sign(t) * np.maximum(np.abs(t) - theta, 0.0)


# ------------------------------------------------------------------
# Per-patch measurement models
# ------------------------------------------------------------------


class PatchBinaryModel:
    """Binary-Poisson data fit for a batch of patch windows.

    Holds the shared local operator matrix (window pixels x patch pixels)
    and the per-window on-counts and thresholds.  All evaluations follow
    the clamped likelihood exactly: rates below the clamp contribute zero
    derivative (flat region of lam -> max(lam, eps)).
    """

    def __init__(self, hmat, q, n_on, num_frames):
        self.hmat = np.asarray(hmat, dtype=np.float64)
        self.q = np.atleast_2d(np.asarray(q))
        self.n_on = np.atleast_2d(np.asarray(n_on))
        self.num_frames = int(num_frames)
        if self.q.shape != self.n_on.shape \
                or self.q.shape[1] != self.hmat.shape[0]:
            raise DimensionMismatchError("window arrays disagree with hmat")
        self.n_off = self.num_frames - self.n_on
        self._hnorm2 = None

    @classmethod
    def from_stack(cls, stack, grid, op):
        """Gather every patch's jot window from a full frame stack."""
        s = op.oversampling
        side = grid.patch_side
        if stack.jot_shape != (grid.image_shape[0] * s,
                               grid.image_shape[1] * s):
            raise DimensionMismatchError(
                "stack jot grid does not match grid and oversampling")
        local = ForwardOperator((side, side), oversampling=s, psf=op.psf)
        n_on_full = stack.on_counts()
        pos = grid.positions
        win = side * s
        rows = pos[:, 0][:, None] * s + np.arange(win)[None, :]
        cols = pos[:, 1][:, None] * s + np.arange(win)[None, :]
        n_on = n_on_full[rows[:, :, None], cols[:, None, :]].reshape(len(pos), -1)
        q = stack.thresholds[rows[:, :, None], cols[:, None, :]].reshape(len(pos), -1)
        return cls(local.dense(), q, n_on, stack.num_frames)

    @property
    def num_patches(self):
        return self.q.shape[0]

    @property
    def num_pixels(self):
        return self.hmat.shape[1]

    def hnorm2(self):
        if self._hnorm2 is None:
            self._hnorm2 = float(np.linalg.norm(self.hmat, 2))
        return self._hnorm2

    def subset(self, idx):
        return PatchBinaryModel(self.hmat, self.q[idx], self.n_on[idx],
                                self.num_frames)

    def nll(self, lam):
        """(P,) data-fit values at window rates lam (P, J)."""
        return lk.nll_terms(lam, self.q, self.n_on, self.n_off).sum(axis=-1)

    def grad_lam(self, lam):
        """(P, J) derivative, zero in the clamped flat region."""
        g = lk.grad_terms(lam, self.q, self.n_on, self.n_off)
        return g * (lam > lk.EPS_LAMBDA)

    def hess_lam(self, lam):
        h = lk.hess_terms(lam, self.q, self.n_on, self.n_off)
        return h * (lam > lk.EPS_LAMBDA)

    def nll_grad_hess(self, lam):
        """Fused ((P,), (P, J), (P, J)) evaluation sharing one tail pass."""
        nll, g, h = lk.measurement_terms(lam, self.q, self.n_on, self.n_off)
        mask = lam > lk.EPS_LAMBDA
        return nll.sum(axis=-1), g * mask, h * mask

    def curvature_at(self, lam):
        return float(self.hess_lam(lam).max())


class GaussianPatchModel:
    """Quadratic data fit 0.5*||lam - target||^2, a test-configuration
    plug-in that turns the patch solver into a plain LASSO."""

    def __init__(self, hmat, target):
        self.hmat = np.asarray(hmat, dtype=np.float64)
        self.target = np.atleast_2d(np.asarray(target, dtype=np.float64))
        self._hnorm2 = None

    @property
    def num_patches(self):
        return self.target.shape[0]

    @property
    def num_pixels(self):
        return self.hmat.shape[1]

    def hnorm2(self):
        if self._hnorm2 is None:
            self._hnorm2 = float(np.linalg.norm(self.hmat, 2))
        return self._hnorm2

    def subset(self, idx):
        return GaussianPatchModel(self.hmat, self.target[idx])

    def nll(self, lam):
        return 0.5 * np.sum((lam - self.target) ** 2, axis=-1)

    def grad_lam(self, lam):
        return lam - self.target

    def hess_lam(self, lam):
        return np.ones_like(lam)

    def nll_grad_hess(self, lam):
        return self.nll(lam), self.grad_lam(lam), self.hess_lam(lam)

    def curvature_at(self, lam):
        return 1.0


def code_rates(model, dictionary, rho, Z):
    """Window rates H rho(D z) for a code batch (P, m) -> (P, J)."""
    return rho(Z @ dictionary.atoms.T) @ model.hmat.T


def code_objective(model, dictionary, rho, Z, mu):
    """(P,) values of nll(H rho(Dz)) + mu * |z|_1."""
    Z = np.atleast_2d(Z)
    return model.nll(code_rates(model, dictionary, rho, Z)) \
        + mu * np.abs(Z).sum(axis=-1)


def code_datafit_grad(model, dictionary, rho, Z):
    """(P,) data-fit values and (P, m) gradients at codes Z."""
    Z = np.atleast_2d(Z)
    pre = Z @ dictionary.atoms.T
    lam = rho(pre) @ model.hmat.T
    f, g_lam, _ = model.nll_grad_hess(lam)
    back = g_lam @ model.hmat
    g = (rho.prime(pre) * back) @ dictionary.atoms
    return f, g


def ista_step(z, model, dictionary, rho, eta, mu):
    """One proximal gradient step on the sparse-code objective.

    z+ = shrink(z - eta * D^T diag(rho'(Dz)) H^T grad_lam(H rho(Dz)),
                mu * eta)
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    _, g = code_datafit_grad(model, dictionary, rho, Z)
    if not np.all(np.isfinite(g)):
        bad = np.argwhere(~np.isfinite(g))[0]
        raise NonFiniteError(
            f"nonfinite code gradient (patch {bad[0]}, atom {bad[1]})")
    out = soft_shrink(Z - eta * g, mu * eta)
    return out[0] if single else out


# ------------------------------------------------------------------
# Batched proximal solver over patches
# ------------------------------------------------------------------


def _seed_eta(model, dictionary, rho, lam0):
    """Step-size seed 1/L from the curvature at the starting rates."""
    curved = max(model.curvature_at(lam0), 1e-12)
    lip = dictionary.norm2() ** 2 * model.hnorm2() ** 2 * curved
    return 1.0 / lip


def solve_codes(model, dictionary, rho, cfg, z0, momentum=True,
                iter_callback=None):
    """Run ISTA (momentum=False) or monotone-restart FISTA per patch.

    Every patch is an independent problem: it keeps its own step size,
    momentum state, and convergence flag, so processing order cannot
    change any result.  Returns (Z, objective_history) where the history
    rows are per-patch objective values per iteration (including the
    initialization).
    """
    P = model.num_patches
    m = dictionary.num_atoms
    Z = np.tile(np.asarray(z0, dtype=np.float64), (P, 1)) \
        if np.ndim(z0) == 1 else np.array(z0, dtype=np.float64)
    if Z.shape != (P, m):
        raise DimensionMismatchError("z0 does not match patches and atoms")

    mu = cfg.mu
    if mu is None:
        _, g0 = code_datafit_grad(model, dictionary, rho, Z)
        mu = 0.05 * float(np.abs(g0).max())
        mu = max(mu, 1e-12)

    lam0 = code_rates(model, dictionary, rho, Z)
    if cfg.step_policy == "fixed" and cfg.eta is not None:
        eta = np.full(P, float(cfg.eta))
    else:
        eta = np.full(P, _seed_eta(model, dictionary, rho, lam0))
    backtracking = cfg.step_policy == "backtracking"

    Zprev = Z.copy()
    Y = Z.copy()
    t_mom = np.ones(P)
    f_z = code_objective(model, dictionary, rho, Z, mu)
    history = [f_z.copy()]
    active = np.ones(P, dtype=bool)
    if iter_callback is not None:
        iter_callback(0, Z)

    for it in range(cfg.max_iters):
        if not np.any(active):
            break
        idx = np.where(active)[0]
        sub = model.subset(idx)
        Ys = Y[idx]
        fy, g = code_datafit_grad(sub, dictionary, rho, Ys)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"nonfinite gradient at iteration {it}")
        cand, f_cand, eta_s = _prox_with_backtracking(
            sub, dictionary, rho, Ys, fy, g, eta[idx], mu, backtracking, cfg)

        if momentum and cfg.restart:
            # function-value restart: if the extrapolated step lost ground,
            # redo it from the last iterate (guaranteed non-increasing).
            F_cand = f_cand + mu * np.abs(cand).sum(axis=-1)
            worse = F_cand > f_z[idx] + 1e-12 * np.abs(f_z[idx])
            if np.any(worse):
                ridx = idx[worse]
                rsub = model.subset(ridx)
                Zr = Z[ridx]
                fz_r, gz_r = code_datafit_grad(rsub, dictionary, rho, Zr)
                cand_r, f_r, eta_r = _prox_with_backtracking(
                    rsub, dictionary, rho, Zr, fz_r, gz_r, eta[ridx], mu,
                    backtracking, cfg)
                cand[worse] = cand_r
                f_cand[worse] = f_r
                eta_s[worse] = eta_r
                t_mom[ridx] = 1.0

        eta[idx] = eta_s
        Zprev[idx] = Z[idx]
        Z[idx] = cand
        F_new = f_cand + mu * np.abs(cand).sum(axis=-1)

        if momentum:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom[idx] ** 2))
            beta = (t_mom[idx] - 1.0) / t_next
            Y[idx] = Z[idx] + beta[:, None] * (Z[idx] - Zprev[idx])
            t_mom[idx] = t_next
        else:
            Y[idx] = Z[idx]

        rel = np.abs(F_new - f_z[idx]) / np.maximum(np.abs(f_z[idx]), 1.0)
        f_z[idx] = F_new
        history.append(f_z.copy())
        active[idx] = rel >= cfg.stop_tol
        if iter_callback is not None:
            iter_callback(it + 1, Z)

    return Z, mu, np.asarray(history)


def _prox_with_backtracking(model, dictionary, rho, Y, fy, g, eta, mu,
                            backtracking, cfg):
    """Per-lane prox steps satisfying the majorization condition."""
    P = Y.shape[0]
    cand = soft_shrink(Y - eta[:, None] * g, mu * eta[:, None])
    f_cand = model.nll(code_rates(model, dictionary, rho, cand))
    if not backtracking:
        return cand, f_cand, eta
    eta = eta.copy()
    for _ in range(200):
        diff = cand - Y
        quad = fy + np.sum(g * diff, axis=-1) \
            + np.sum(diff * diff, axis=-1) / (2.0 * eta)
        bad = f_cand > quad + 1e-12 * np.abs(quad)
        if not np.any(bad):
            break
        eta[bad] *= cfg.backtrack
        if eta.min() < _ETA_MIN:
            raise NonFiniteError("backtracking step size underflow")
        sub = model.subset(bad)
        cand_b = soft_shrink(Y[bad] - eta[bad][:, None] * g[bad],
                             mu * eta[bad][:, None])
        cand[bad] = cand_b
        f_cand[bad] = sub.nll(code_rates(sub, dictionary, rho, cand_b))
    # gentle growth keeps the search adaptive when curvature relaxes
    eta = np.minimum(eta * cfg.grow, 1e12)
    return cand, f_cand, eta


# ------------------------------------------------------------------
# Whole-image drivers
# ------------------------------------------------------------------


def _init_image(cfg, shape):
    if cfg.init_mode == "zeros":
        return np.zeros(shape)
    if cfg.init_mode == "custom":
        if cfg.init_value is None or cfg.init_value.shape != shape:
            raise ValueError("custom init requires a matching init_value")
        return np.array(cfg.init_value, dtype=np.float64)
    if cfg.peak is None:
        raise ValueError("max_dynamic_range init requires cfg.peak")
    return np.full(shape, float(cfg.peak))


def ml_reconstruct(stack, op, cfg, ground_truth=None):
    """Projected gradient descent on the likelihood alone (no prior).

    x <- max(x - eta * H^T grad_lam(Hx; B), 0), monotone under the
    backtracking policy; under a fixed step, two consecutive objective
    increases raise DivergenceError.
    """
    from .metrics import psnr as psnr_fn

    if stack.jot_shape != op.jot_shape:
        raise DimensionMismatchError("stack does not match operator jot grid")
    x = _init_image(cfg, op.image_shape)
    lam = op.apply(x)
    f = lk.neg_log_likelihood(lam, stack)
    if cfg.step_policy == "fixed" and cfg.eta is not None:
        eta = float(cfg.eta)
    else:
        curved = max(float(lk.hess_lambda(np.maximum(lam, lk.EPS_LAMBDA),
                                          stack).max()), 1e-12)
        eta = 1.0 / (op.norm2() ** 2 * curved)

    trace = SolveTrace(objective=[f],
                       psnr=None if ground_truth is None else [],
                       millis=[0.0])
    t0 = time.perf_counter()
    if ground_truth is not None:
        trace.psnr.append(psnr_fn(x, ground_truth.data,
                                  ground_truth.peak).psnr)
    increases = 0
    for _ in range(cfg.max_iters):
        # spec update literally: the gradient is taken at the clamped
        # rates (no flat-region masking), so pinned-dark pixels with
        # on-bits keep a strong pull back into the domain
        g = op.adjoint(lk.grad_lambda(lam, stack))
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("nonfinite image gradient")
        if cfg.step_policy == "backtracking":
            while True:
                x_new = np.maximum(x - eta * g, 0.0)
                f_new = lk.neg_log_likelihood(op.apply(x_new), stack)
                decrease = float(np.sum(g * (x - x_new)))
                if f_new <= f - cfg.armijo * decrease or decrease <= 0:
                    break
                eta *= cfg.backtrack
                if eta < _ETA_MIN:
                    raise NonFiniteError("line search step underflow")
            eta *= cfg.grow
        else:
            x_new = np.maximum(x - eta * g, 0.0)
            f_new = lk.neg_log_likelihood(op.apply(x_new), stack)
            if f_new > f:
                increases += 1
                if increases >= 2:
                    raise DivergenceError(
                        f"objective increased twice under fixed step "
                        f"eta={eta:g} (f={f_new:.6g})")
            else:
                increases = 0
        rel = abs(f_new - f) / max(abs(f), 1.0)
        x, f = x_new, f_new
        lam = op.apply(x)
        trace.objective.append(f)
        trace.millis.append((time.perf_counter() - t0) * 1e3)
        if ground_truth is not None:
            trace.psnr.append(psnr_fn(x, ground_truth.data,
                                      ground_truth.peak).psnr)
        if rel < cfg.stop_tol:
            break
    peak = cfg.peak if cfg.peak is not None else max(float(x.max()), 1.0)
    img = IntensityImage(data=x, peak=max(peak, float(x.max())))
    return img, trace


def default_code_init(dictionary, rho, peak):
    """Code whose synthesis approximates the constant peak patch:
    z0 = D^T rho^{-1}(peak * 1) / ||D||_2^2."""
    target = rho.inverse(np.full(dictionary.atom_dim, float(peak)))
    return dictionary.atoms.T @ target / dictionary.norm2() ** 2


def _patch_solver(stack, dictionary, rho, op, grid, cfg, ground_truth,
                  momentum):
    from .metrics import psnr as psnr_fn

    if dictionary.atom_dim != grid.patch_side ** 2:
        raise DimensionMismatchError(
            "dictionary atom_dim must equal patch_side^2")
    model = PatchBinaryModel.from_stack(stack, grid, op)
    if cfg.peak is None:
        raise ValueError("patch solvers need cfg.peak for initialization")
    z0 = default_code_init(dictionary, rho, cfg.peak)

    psnrs = [] if ground_truth is not None else None
    millis = []
    t0 = time.perf_counter()

    def callback(it, Z):
        millis.append((time.perf_counter() - t0) * 1e3)
        if psnrs is not None:
            img = assemble_codes(dictionary, rho, Z, grid)
            psnrs.append(psnr_fn(img, ground_truth.data,
                                 ground_truth.peak).psnr)

    Z, mu, history = solve_codes(model, dictionary, rho, cfg, z0,
                                 momentum=momentum, iter_callback=callback)
    data = assemble_codes(dictionary, rho, Z, grid)
    peak = max(float(cfg.peak), float(data.max()))
    img = IntensityImage(data=data, peak=peak)
    trace = SolveTrace(objective=[float(r.sum()) for r in history],
                       psnr=psnrs, millis=millis)
    return img, trace


def assemble_codes(dictionary, rho, Z, grid):
    """Decode a code batch to patches and average overlaps."""
    patches = rho(np.atleast_2d(Z) @ dictionary.atoms.T)
    return average_patches(patches, grid)


def fista_reconstruct(stack, dictionary, rho, op, grid, cfg,
                      ground_truth=None):
    """Per-patch FISTA with monotone restart, assembled by averaging."""
    return _patch_solver(stack, dictionary, rho, op, grid, cfg, ground_truth,
                         momentum=True)


def ista_reconstruct(stack, dictionary, rho, op, grid, cfg,
                     ground_truth=None):
    """Per-patch plain ISTA (no momentum), same interface as FISTA."""
    return _patch_solver(stack, dictionary, rho, op, grid, cfg, ground_truth,
                         momentum=False)
