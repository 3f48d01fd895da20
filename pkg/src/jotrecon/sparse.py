"""Nonlinear sparse synthesis model for jot-grid exposures.

A patch of the latent image is synthesized as rho(D z): a sparse code z
over a column-atom dictionary D pushed through an elementwise
nonnegativity-enforcing map rho (softplus by default; identity exists
for test configurations only).  Whole images are handled by extracting
overlapping patches on a stride grid and averaging the overlaps back.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import DimensionMismatchError


class Nonlinearity:
    """Elementwise map rho with derivative, curvature, and inverse.

    softplus: rho(t) = log(1 + exp(beta*t)) / beta, strictly positive
    derivative rho'(t) = sigmoid(beta*t) in (0, 1).  identity is intended
    for test configurations only.
    """

    def __init__(self, kind="softplus", beta=10.0):
        if kind not in ("softplus", "identity"):
            raise ValueError(f"unknown nonlinearity kind: {kind!r}")
        if kind == "softplus" and beta <= 0:
            raise ValueError("softplus sharpness must be positive")
        self.kind = kind
        self.beta = float(beta)

    @classmethod
    def softplus(cls, beta=10.0):
        return cls("softplus", beta)

    @classmethod
    def identity(cls):
        return cls("identity")

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "identity":
            return t.copy()
        bt = self.beta * t
        # max(t, 0) + log1p(exp(-|bt|))/beta never overflows on either side
        return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(bt))) / self.beta

    def prime(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "identity":
            return np.ones_like(t)
        return expit(self.beta * t)

    def second(self, t):
        """d^2 rho / dt^2 (needed to backpropagate through rho')."""
        t = np.asarray(t, dtype=np.float64)
        if self.kind == "identity":
            return np.zeros_like(t)
        s = expit(self.beta * t)
        return self.beta * s * (1.0 - s)

    def inverse(self, y):
        """t with rho(t) = y; requires y > 0 for softplus."""
        y = np.asarray(y, dtype=np.float64)
        if self.kind == "identity":
            return y.copy()
        if np.any(y <= 0):
            raise ValueError("softplus inverse needs positive inputs")
        by = self.beta * y
        # log(exp(by) - 1)/beta, split to avoid overflow for large by
        return np.where(by > 30.0,
                        y + np.log1p(-np.exp(-np.minimum(by, 700.0))) / self.beta,
                        np.log(np.expm1(np.minimum(by, 30.0))) / self.beta)


@dataclass
class Dictionary:
    """Column-atom matrix over vectorized patches; atoms have unit norm."""

    atoms: np.ndarray

    def __post_init__(self):
        self.atoms = np.asarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise ValueError("atoms must form a 2-D matrix")
        if not np.all(np.isfinite(self.atoms)):
            raise ValueError("atoms must be finite")
        norms = np.linalg.norm(self.atoms, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-10):
            raise ValueError("every atom must have unit Euclidean norm")
        self._norm2 = None

    @property
    def atom_dim(self):
        return self.atoms.shape[0]

    @property
    def num_atoms(self):
        return self.atoms.shape[1]

    @classmethod
    def random_unit(cls, atom_dim, num_atoms, seed=0):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal((atom_dim, num_atoms))
        a /= np.linalg.norm(a, axis=0)
        return cls(atoms=a)

    def norm2(self):
        """Spectral norm of the atom matrix."""
        if self._norm2 is None:
            self._norm2 = float(np.linalg.norm(self.atoms, 2))
        return self._norm2


def synthesize(dictionary, z, rho):
    """Patch intensities rho(D z) for a single code vector."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (dictionary.num_atoms,):
        raise DimensionMismatchError(
            f"code length {z.shape} does not match {dictionary.num_atoms} atoms")
    return rho(dictionary.atoms @ z)


@dataclass
class PatchGrid:
    """Stride-spaced overlapping patch positions covering the image.

    Positions are clamped so the final patch in each axis touches the
    border; every pixel is covered by at least one patch.
    """

    image_shape: tuple
    patch_side: int = 8
    stride: int = 1

    def __post_init__(self):
        h, w = self.image_shape
        if self.patch_side < 1 or self.stride < 1:
            raise ValueError("patch side and stride must be >= 1")
        if h < self.patch_side or w < self.patch_side:
            raise ValueError("image is smaller than the patch")
        self.image_shape = (int(h), int(w))

    def axis_positions(self, dim):
        last = dim - self.patch_side
        pos = list(range(0, last + 1, self.stride))
        if pos[-1] != last:
            pos.append(last)
        return np.asarray(pos)

    @property
    def row_positions(self):
        return self.axis_positions(self.image_shape[0])

    @property
    def col_positions(self):
        return self.axis_positions(self.image_shape[1])

    @property
    def positions(self):
        """(P, 2) array of top-left corners in row-major order."""
        rp, cp = self.row_positions, self.col_positions
        rr, cc = np.meshgrid(rp, cp, indexing="ij")
        return np.stack([rr.ravel(), cc.ravel()], axis=1)

    @property
    def num_patches(self):
        return len(self.row_positions) * len(self.col_positions)


def _as_array(img):
    return np.asarray(getattr(img, "data", img), dtype=np.float64)


def extract_patches(img, grid):
    """Row-major vectorized patches at every grid position: (P, side^2)."""
    data = _as_array(img)
    if data.shape != grid.image_shape:
        raise DimensionMismatchError(
            f"image {data.shape} does not match grid {grid.image_shape}")
    side = grid.patch_side
    pos = grid.positions
    out = np.empty((len(pos), side * side))
    for i, (r, c) in enumerate(pos):
        out[i] = data[r:r + side, c:c + side].ravel()
    return out


def average_patches(patches, grid):
    """Image whose pixels are the uniform mean of all covering patches."""
    patches = np.asarray(patches, dtype=np.float64)
    pos = grid.positions
    if patches.shape != (len(pos), grid.patch_side ** 2):
        raise DimensionMismatchError(
            f"patch array {patches.shape} does not match grid "
            f"({len(pos)} patches of {grid.patch_side ** 2})")
    side = grid.patch_side
    mean = np.zeros(grid.image_shape)
    cov = np.zeros(grid.image_shape)
    # Incremental mean over a fixed patch order: consistent overlaps stay
    # bit-exact (the update is 0 when the new value equals the mean), so
    # extract -> average is the identity.
    for i, (r, c) in enumerate(pos):
        rs, cs = slice(r, r + side), slice(c, c + side)
        cov[rs, cs] += 1.0
        mean[rs, cs] += (patches[i].reshape(side, side) - mean[rs, cs]) / cov[rs, cs]
    return mean
