"""Dictionary learning: OMP sparse coding with k-SVD atom updates.

Training alternates two stages.  Orthogonal matching pursuit codes every
patch greedily (pick the atom most correlated with the residual, refit
all selected coefficients by least squares, repeat up to the sparsity
budget).  The update stage then revisits each atom: the residual matrix
restricted to the patches using that atom is approximated by its
dominant rank-1 pair (power iteration), which becomes the new atom and
its coefficients.  Atoms that no training patch uses are optionally
replaced by the currently worst-represented patch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sparse import Dictionary


@dataclass
class KsvdConfig:
    num_atoms: int = 256
    sparsity: int = 8            # max nonzeros per code
    iterations: int = 30
    seed: int = 0
    replace_unused: bool = True

    def __post_init__(self):
        if self.sparsity < 1:
            raise ValueError("sparsity must be >= 1")
        if self.num_atoms < 1:
            raise ValueError("num_atoms must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


def omp(dictionary, y, sparsity, tol=1e-12):
    """Greedy sparse code of y over unit-norm atoms; best effort.

    Selects at most `sparsity` distinct atoms by residual correlation,
    refitting the coefficients by least squares after each selection;
    the residual norm never increases.
    """
    y = np.asarray(y, dtype=np.float64)
    code = omp_batch(dictionary.atoms, y[None, :], sparsity, tol)
    return code[0]


def omp_batch(atoms, Y, sparsity, tol=1e-12):
    """Vectorized OMP over the rows of Y; returns (N, num_atoms) codes."""
    n, m = atoms.shape
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    N = Y.shape[0]
    codes = np.zeros((N, m))
    support = np.full((N, sparsity), -1, dtype=np.int64)
    coeffs = np.zeros((N, sparsity))
    residual = Y.copy()
    active = np.linalg.norm(residual, axis=1) > tol
    for step in range(min(sparsity, n, m)):
        if not np.any(active):
            break
        idx = np.where(active)[0]
        corr = residual[idx] @ atoms                     # (n_act, m)
        if step > 0:
            # an atom may be selected at most once
            rows = np.repeat(np.arange(len(idx)), step)
            cols = support[idx, :step].ravel()
            corr[rows, cols] = 0.0
        pick = np.argmax(np.abs(corr), axis=1)
        support[idx, step] = pick
        # batched least-squares refit on each current support
        sub = atoms[:, support[idx, :step + 1]]          # (n, n_act, k)
        sub = np.moveaxis(sub, 1, 0)                     # (n_act, n, k)
        gram = np.einsum("pnk,pnl->pkl", sub, sub)
        # tiny jitter keeps near-duplicate atom selections solvable
        gram += 1e-12 * np.eye(step + 1)
        rhs = np.einsum("pnk,pn->pk", sub, Y[idx])
        sol = np.linalg.solve(gram, rhs[..., None])[..., 0]
        coeffs[idx, :step + 1] = sol
        residual[idx] = Y[idx] - np.einsum("pnk,pk->pn", sub, sol)
        active[idx] = np.linalg.norm(residual[idx], axis=1) > tol
    rows = np.repeat(np.arange(N), support.shape[1])
    mask = support.ravel() >= 0
    codes[rows[mask], support.ravel()[mask]] = coeffs.ravel()[mask]
    return codes


def _dominant_pair(E, u0, iters=100, tol=1e-10):
    """Dominant singular pair of E by alternating power iteration.

    Returns (u, c) with unit-norm u and c = E^T u = sigma * v, i.e. the
    coefficient row of the best rank-1 approximation sigma * u v^T.
    """
    u = u0 / max(np.linalg.norm(u0), 1e-300)
    sigma = 0.0
    for _ in range(iters):
        v = E.T @ u
        sv = np.linalg.norm(v)
        if sv == 0:
            return u, np.zeros(E.shape[1])
        v /= sv
        u_new = E @ v
        sigma_new = np.linalg.norm(u_new)
        if sigma_new == 0:
            return u, np.zeros(E.shape[1])
        u_new /= sigma_new
        done = abs(sigma_new - sigma) <= tol * max(sigma_new, 1.0) \
            and np.linalg.norm(u_new - u) <= tol
        u, sigma = u_new, sigma_new
        if done:
            break
    return u, E.T @ u


def representation_error(atoms, Y, codes):
    return float(np.sum((Y - codes @ atoms.T) ** 2))


def ksvd_train(patches, cfg, history=None):
    """Learn a dictionary from clean training patches.

    patches: (N, atom_dim) array with N >= num_atoms.  Returns the
    Dictionary; if `history` is a list, per-iteration representation
    errors (measured after the atom-update stage) are appended to it.
    """
    Y = np.atleast_2d(np.asarray(patches, dtype=np.float64))
    N, n = Y.shape
    if N < cfg.num_atoms:
        raise ValueError("need at least num_atoms training patches")
    if not np.any(Y):
        raise ValueError("training set is identically zero")
    if cfg.sparsity > n:
        raise ValueError("sparsity cannot exceed atom_dim")

    rng = np.random.default_rng(cfg.seed)
    atoms = rng.standard_normal((n, cfg.num_atoms))
    atoms /= np.linalg.norm(atoms, axis=0)

    for _ in range(cfg.iterations):
        codes = omp_batch(atoms, Y, cfg.sparsity)
        for k in range(cfg.num_atoms):
            users = np.abs(codes[:, k]) > 1e-12
            if not np.any(users):
                if cfg.replace_unused:
                    resid = np.sum((Y - codes @ atoms.T) ** 2, axis=1)
                    worst = int(np.argmax(resid))
                    cand = Y[worst]
                    nrm = np.linalg.norm(cand)
                    if nrm > 1e-12:
                        atoms[:, k] = cand / nrm
                continue
            # residual without atom k's contribution, on its users
            sub_codes = codes[users]
            E = Y[users] - sub_codes @ atoms.T \
                + np.outer(sub_codes[:, k], atoms[:, k])
            u, coef = _dominant_pair(E.T, atoms[:, k])
            atoms[:, k] = u
            codes[users, k] = coef
        if history is not None:
            history.append(representation_error(atoms, Y, codes))

    return Dictionary(atoms=atoms)
