"""Unrolled-ISTA feed-forward network for fast reconstruction.

Layer t maps a code iterate through

    z_{t+1} = shrink_theta( z_t - W diag(rho'(Q z_t)) H^T g(rho(A z_t)) )

where g is the measurement-likelihood gradient in the window rates and
H is the frozen local forward operator.  Initialized with A = Q = D,
W = eta * D^T, theta = mu * eta * 1 the network reproduces plain ISTA
iterations exactly; training the per-layer tensors by backpropagation
then compresses hundreds of iterations into a handful of layers.

The backward pass is hand-derived.  Because g itself appears inside the
forward pass, its chain rule needs the likelihood curvature (the
diagonal Hessian in the rates); the shrinkage uses subgradient 0 at the
kinks and d shrink / d theta = -sign(u) on the active set.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, NonFiniteError
from .sensor import IntensityImage
from .solvers import (PatchBinaryModel, assemble_codes, default_code_init,
                      soft_shrink)


@dataclass
class MLNetParams:
    """Per-layer tensors A, Q (n x m), W (m x n), theta (m,) >= 0."""

    A: list
    Q: list
    W: list
    theta: list
    tied: bool = False

    def __post_init__(self):
        lengths = {len(self.A), len(self.Q), len(self.W), len(self.theta)}
        if len(lengths) != 1:
            raise ValueError("per-layer tensor lists must share a length")
        for t in range(self.num_layers):
            a, q, w, th = self.A[t], self.Q[t], self.W[t], self.theta[t]
            if a.shape != q.shape or w.shape != a.shape[::-1] \
                    or th.shape != (a.shape[1],):
                raise ValueError(f"layer {t} tensor shapes are inconsistent")
            for arr in (a, q, w, th):
                if not np.all(np.isfinite(arr)):
                    raise ValueError(f"layer {t} has nonfinite parameters")
            if np.any(th < 0):
                raise ValueError(f"layer {t} thresholds must be >= 0")

    @property
    def num_layers(self):
        return len(self.A)

    @property
    def layer_shape(self):
        if not self.A:
            raise ValueError("empty network has no layer shape")
        return self.A[0].shape

    def copy(self):
        return MLNetParams(A=[a.copy() for a in self.A],
                           Q=[q.copy() for q in self.Q],
                           W=[w.copy() for w in self.W],
                           theta=[t.copy() for t in self.theta],
                           tied=self.tied)


@dataclass
class TrainConfig:
    """Adam-on-minibatches supervision of the unrolled network."""

    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie strictly in (0, 1)")


def init_from_ista(dictionary, eta, mu, num_layers, tied=False):
    """ISTA-prescribed initialization: A = Q = D, W = eta D^T,
    theta = mu eta 1 in every layer."""
    if eta <= 0:
        raise ValueError("eta must be positive")
    atoms = dictionary.atoms
    n, m = atoms.shape
    return MLNetParams(
        A=[atoms.copy() for _ in range(num_layers)],
        Q=[atoms.copy() for _ in range(num_layers)],
        W=[eta * atoms.T.copy() for _ in range(num_layers)],
        theta=[np.full(m, mu * eta) for _ in range(num_layers)],
        tied=tied)


def forward(params, model, rho, z0, with_curvature=False):
    """Apply all layers to z0; returns (z_T, cache for backward).

    z0 may be one code (m,) shared by every window or a (B, m) batch
    matching model.num_patches.  with_curvature additionally caches the
    likelihood Hessian at each layer (one fused evaluation), which the
    backward pass would otherwise recompute.
    """
    B = model.num_patches
    z0 = np.asarray(z0, dtype=np.float64)
    Z = np.tile(z0, (B, 1)) if z0.ndim == 1 else np.array(z0)
    if Z.shape[0] != B:
        raise DimensionMismatchError("z0 batch does not match the windows")
    cache = []
    for t in range(params.num_layers):
        # overflow is caught by the explicit finiteness check below
        with np.errstate(over="ignore", invalid="ignore"):
            a = Z @ params.A[t].T
            lam = rho(a) @ model.hmat.T
            if with_curvature:
                _, g, hess = model.nll_grad_hess(lam)
            else:
                g = model.grad_lam(lam)
                hess = None
            back = g @ model.hmat
            qz = Z @ params.Q[t].T
            d = rho.prime(qz) * back
            u = Z - d @ params.W[t].T
        if not np.all(np.isfinite(u)):
            raise NonFiniteError(f"nonfinite activation in layer {t}")
        cache.append({"z": Z, "a": a, "lam": lam, "g": g, "back": back,
                      "qz": qz, "d": d, "u": u, "hess": hess})
        Z = soft_shrink(u, params.theta[t])
    return Z, cache


def backward(params, model, rho, cache, loss_grad):
    """Hand-derived backpropagation through every layer.

    loss_grad is dL/dz_T of shape (B, m).  Returns (grads, input_grad)
    where grads holds per-layer lists dA, dQ, dW, dtheta.
    """
    if len(cache) != params.num_layers:
        raise ValueError("cache does not match the network depth")
    gbar = np.array(loss_grad, dtype=np.float64)
    grads = {"A": [None] * params.num_layers,
             "Q": [None] * params.num_layers,
             "W": [None] * params.num_layers,
             "theta": [None] * params.num_layers}
    for t in reversed(range(params.num_layers)):
        c = cache[t]
        active = np.abs(c["u"]) > params.theta[t]
        ubar = gbar * active
        grads["theta"][t] = -np.sum(gbar * np.sign(c["u"]) * active, axis=0)
        # u = z - d W^T
        grads["W"][t] = -np.einsum("bi,bj->ij", ubar, c["d"])
        dbar = -ubar @ params.W[t]
        zbar = ubar.copy()
        # d = rho'(qz) * back
        rp = rho.prime(c["qz"])
        rpbar = dbar * c["back"]
        backbar = dbar * rp
        qzbar = rpbar * rho.second(c["qz"])
        grads["Q"][t] = np.einsum("bi,bj->ij", qzbar, c["z"])
        zbar += qzbar @ params.Q[t]
        # back = g hmat; g = grad_lam(lam) with diagonal curvature
        gjot = backbar @ model.hmat.T
        hess = c["hess"] if c.get("hess") is not None \
            else model.hess_lam(c["lam"])
        lambar = hess * gjot
        lpbar = lambar @ model.hmat
        abar = lpbar * rho.prime(c["a"])
        grads["A"][t] = np.einsum("bi,bj->ij", abar, c["z"])
        zbar += abar @ params.A[t]
        gbar = zbar
    return grads, gbar


def decode_loss_and_grad(dictionary, rho, Z, targets):
    """Squared intensity-domain error of rho(D z) against target patches."""
    pre = np.atleast_2d(Z) @ dictionary.atoms.T
    dec = rho(pre)
    diff = dec - np.atleast_2d(targets)
    loss = np.sum(diff * diff, axis=-1)
    grad = 2.0 * (rho.prime(pre) * diff) @ dictionary.atoms
    return loss, grad


@dataclass
class PatchDataset:
    """Supervised pairs: measurement windows plus clean target patches."""

    model: PatchBinaryModel
    targets: np.ndarray

    def __post_init__(self):
        self.targets = np.atleast_2d(np.asarray(self.targets,
                                                dtype=np.float64))
        if self.targets.shape != (self.model.num_patches,
                                  self.model.num_pixels):
            raise DimensionMismatchError("targets do not match the windows")

    def __len__(self):
        return self.model.num_patches


class _Adam:
    """Adam with per-tensor steps in init-scale units.

    The layer tensors differ in scale by orders of magnitude (W carries
    the tiny ISTA step size, A and Q are unit-norm atoms), so a single
    absolute step size destabilizes W immediately.  Each tensor's
    learning rate is its initial RMS times cfg.lr, i.e. cfg.lr is the
    relative step per update.
    """

    def __init__(self, cfg, init_tensors):
        self.cfg = cfg
        self.m = {}
        self.v = {}
        self.t = 0
        self.scale = {k: max(float(np.linalg.norm(v) / np.sqrt(v.size)),
                             1e-12)
                      for k, v in init_tensors.items()}

    def step(self, tensors, grads):
        """tensors and grads are dicts key -> ndarray (updated in place)."""
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(g)
                self.v[key] = np.zeros_like(g)
            self.m[key] = c.beta1 * self.m[key] + (1 - c.beta1) * g
            self.v[key] = c.beta2 * self.v[key] + (1 - c.beta2) * g * g
            mhat = self.m[key] / bc1
            vhat = self.v[key] / bc2
            step = c.lr * self.scale[key]
            tensors[key] -= step * mhat / (np.sqrt(vhat) + c.eps)


def _param_dict(params):
    out = {}
    for t in range(params.num_layers):
        out[("A", t)] = params.A[t]
        out[("Q", t)] = params.Q[t]
        out[("W", t)] = params.W[t]
        out[("theta", t)] = params.theta[t]
    return out


def _grad_dict(params, grads):
    out = {}
    for t in range(params.num_layers):
        out[("A", t)] = grads["A"][t]
        out[("Q", t)] = grads["Q"][t]
        out[("W", t)] = grads["W"][t]
        out[("theta", t)] = grads["theta"][t]
    if params.tied:
        # shared layers: every layer sees the summed gradient
        for kind in ("A", "Q", "W", "theta"):
            total = sum(out[(kind, t)] for t in range(params.num_layers))
            for t in range(params.num_layers):
                out[(kind, t)] = total
    return out


def train(params, dataset, cfg, dictionary, rho, z0=None):
    """Adam over minibatches of (window, clean patch) pairs.

    Minimizes the mean squared decode error; a seed-derived split holds
    out a validation fraction and the best-validation parameters are
    returned together with the (epoch, train_loss, val_loss) curve.
    """
    if len(dataset) < 2:
        raise ValueError("dataset must hold at least two samples")
    if z0 is None:
        z0 = np.zeros(dictionary.num_atoms)
    rng = np.random.default_rng(cfg.seed)
    perm = rng.permutation(len(dataset))
    n_val = max(1, int(round(cfg.val_fraction * len(dataset))))
    val_idx, train_idx = perm[:n_val], perm[n_val:]
    if len(train_idx) == 0:
        raise ValueError("validation split leaves no training samples")

    work = params.copy()
    tensors = _param_dict(work)
    opt = _Adam(cfg, tensors)

    def eval_loss(idx):
        sub = dataset.model.subset(idx)
        zT, _ = forward(work, sub, rho, z0)
        loss, _ = decode_loss_and_grad(dictionary, rho, zT,
                                       dataset.targets[idx])
        return float(loss.mean())

    curve = []
    best = (np.inf, work.copy())
    for epoch in range(cfg.epochs):
        order = rng.permutation(train_idx)
        batch_losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            sub = dataset.model.subset(idx)
            zT, cache = forward(work, sub, rho, z0, with_curvature=True)
            # the finiteness check below owns overflow reporting
            with np.errstate(over="ignore", invalid="ignore"):
                loss, lgrad = decode_loss_and_grad(dictionary, rho, zT,
                                                   dataset.targets[idx])
            mean_loss = float(loss.mean())
            if not np.isfinite(mean_loss):
                raise NonFiniteError(
                    f"nonfinite training loss in epoch {epoch} "
                    f"(batch at {start})")
            batch_losses.append(mean_loss)
            grads, _ = backward(work, sub, rho, cache, lgrad / len(idx))
            opt.step(tensors, _grad_dict(work, grads))
            # thresholds are shrinkage widths: project back onto >= 0
            for t in range(work.num_layers):
                np.clip(work.theta[t], 0.0, None, out=work.theta[t])
        val_loss = eval_loss(val_idx)
        curve.append((epoch + 1, float(np.mean(batch_losses)), val_loss))
        if val_loss < best[0]:
            best = (val_loss, work.copy())
    return best[1], curve


def reconstruct(params, stack, op, grid, dictionary, rho, peak):
    """Per-patch forward pass, decode, and overlap-average assembly."""
    model = PatchBinaryModel.from_stack(stack, grid, op)
    z0 = default_code_init(dictionary, rho, peak)
    zT, _ = forward(params, model, rho, z0)
    data = assemble_codes(dictionary, rho, zT, grid)
    return IntensityImage(data=data, peak=max(float(peak), float(data.max())))
