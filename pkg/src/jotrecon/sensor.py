"""Physical forward model of the dense one-bit sensor.

The latent image x lives on a coarse grid; the sensor's jots live on a
grid oversampled by an integer factor s per axis.  The optical operator
is nearest-neighbor replication upsampling followed by convolution with
a normalized nonnegative PSF (default: separable Gaussian, sigma = 0.5*s,
truncated at 3 sigma) with symmetric (half-sample reflective) boundary
handling.  Setting s = 1 and sigma = 0 makes the operator the identity.

Each exposure draws an independent Poisson photoelectron count per jot at
rate lam = (Hx)_j and compares it against that jot's integer threshold;
the frame records the one-bit outcomes.  Sampling is exact over the full
rate range: inversion by sequential search below rate 30, PTRS-style
transformed rejection above it.  Frames use independent seed-derived RNG
streams so simulation is reproducible regardless of scheduling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatchError


@dataclass
class IntensityImage:
    """Nonnegative latent image in expected photoelectrons per frame.

    peak is the dynamic-range maximum, used for solver initialization and
    PSNR normalization; it must dominate the data.
    """

    data: np.ndarray
    peak: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ValueError("image data must be 2-D")
        if np.any(self.data < 0) or not np.all(np.isfinite(self.data)):
            raise ValueError("image data must be finite and nonnegative")
        self.peak = float(self.peak)
        if self.peak <= 0 or self.peak < self.data.max() - 1e-12:
            raise ValueError("peak must be positive and >= max(data)")

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]


@dataclass
class RngState:
    """Seed wrapper producing deterministic per-stream generators."""

    seed: int

    def stream(self, stream_id=0):
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, stream_id])
        return np.random.Generator(np.random.PCG64(ss))


def gaussian_kernel(sigma):
    """Normalized 2-D Gaussian kernel truncated at 3 sigma (1x1 for sigma=0)."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    if sigma == 0:
        return np.ones((1, 1))
    r = max(1, int(math.ceil(3.0 * sigma)))
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-0.5 * (d / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def load_kernel(path):
    """Read a PSF from a plain-text matrix file and renormalize it."""
    k = np.atleast_2d(np.loadtxt(path, dtype=np.float64))
    if np.any(k < 0) or not np.all(np.isfinite(k)):
        raise ValueError("PSF entries must be finite and nonnegative")
    s = k.sum()
    if s <= 0:
        raise ValueError("PSF must have positive mass")
    return k / s


def _reflect_indices(idx, n):
    """Half-sample symmetric reflection of indices into [0, n)."""
    period = 2 * n
    j = np.mod(idx, period)
    return np.where(j >= n, period - 1 - j, j)


class ForwardOperator:
    """Linear map H from the image grid to the jot-grid exposure.

    Assembled once as a sparse matrix (replication upsampling composed
    with PSF convolution), so apply and adjoint are exact algebraic
    transposes of each other.
    """

    def __init__(self, image_shape, oversampling=1, psf_sigma=None, psf=None):
        h, w = int(image_shape[0]), int(image_shape[1])
        s = int(oversampling)
        if h < 1 or w < 1 or s < 1:
            raise ValueError("image dims and oversampling must be >= 1")
        if psf is None:
            sigma = 0.5 * s if psf_sigma is None else float(psf_sigma)
            psf = gaussian_kernel(sigma)
        psf = np.asarray(psf, dtype=np.float64)
        if psf.ndim != 2 or np.any(psf < 0):
            raise ValueError("PSF must be a nonnegative 2-D kernel")
        if abs(psf.sum() - 1.0) > 1e-9:
            raise ValueError("PSF must sum to 1")
        self.image_shape = (h, w)
        self.oversampling = s
        self.jot_shape = (h * s, w * s)
        self.psf = psf
        self._matrix = self._assemble()
        self._matrix_t = self._matrix.T.tocsr()
        self._norm2 = None

    def _assemble(self):
        h, w = self.image_shape
        s = self.oversampling
        jh, jw = self.jot_shape
        # Replication upsampling: jot (r, c) reads image (r//s, c//s).
        rows = np.arange(jh * jw)
        jr, jc = rows // jw, rows % jw
        cols = (jr // s) * w + (jc // s)
        up = sp.csr_matrix((np.ones(rows.size), (rows, cols)),
                           shape=(jh * jw, h * w))
        if self.psf.size == 1:
            return (self.psf[0, 0] * up).tocsr()
        kr, kc = self.psf.shape
        rr, cc = kr // 2, kc // 2
        out_r = np.repeat(np.arange(jh), jw)
        out_c = np.tile(np.arange(jw), jh)
        rows_l, cols_l, vals_l = [], [], []
        for dr in range(-rr, kr - rr):
            for dc in range(-cc, kc - cc):
                wgt = self.psf[dr + rr, dc + cc]
                if wgt == 0.0:
                    continue
                src_r = _reflect_indices(out_r + dr, jh)
                src_c = _reflect_indices(out_c + dc, jw)
                rows_l.append(np.arange(jh * jw))
                cols_l.append(src_r * jw + src_c)
                vals_l.append(np.full(out_r.size, wgt))
        blur = sp.coo_matrix(
            (np.concatenate(vals_l),
             (np.concatenate(rows_l), np.concatenate(cols_l))),
            shape=(jh * jw, jh * jw)).tocsr()
        return (blur @ up).tocsr()

    def apply(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.image_shape:
            raise DimensionMismatchError(
                f"input {x.shape} does not match image grid {self.image_shape}")
        return (self._matrix @ x.ravel()).reshape(self.jot_shape)

    def adjoint(self, v):
        v = np.asarray(v, dtype=np.float64)
        if v.shape != self.jot_shape:
            raise DimensionMismatchError(
                f"input {v.shape} does not match jot grid {self.jot_shape}")
        return (self._matrix_t @ v.ravel()).reshape(self.image_shape)

    def dense(self):
        """Dense (jot_pixels x image_pixels) matrix; for small local ops."""
        return self._matrix.toarray()

    def norm2(self, iters=100, tol=1e-12):
        """Spectral norm ||H||_2 via power iteration on H^T H."""
        if self._norm2 is None:
            v = np.ones(self._matrix.shape[1])
            v /= np.linalg.norm(v)
            prev = 0.0
            for _ in range(iters):
                v = self._matrix_t @ (self._matrix @ v)
                nrm = np.linalg.norm(v)
                if nrm == 0:
                    prev = 0.0
                    break
                v /= nrm
                if abs(nrm - prev) <= tol * max(nrm, 1.0):
                    prev = nrm
                    break
                prev = nrm
            self._norm2 = math.sqrt(prev)
        return self._norm2


def apply_forward(op, x):
    """Jot-grid exposure field lam = Hx for an IntensityImage or array."""
    data = x.data if isinstance(x, IntensityImage) else x
    return op.apply(data)


def apply_adjoint(op, v):
    """Image-grid field H^T v."""
    return op.adjoint(v)


def make_threshold_pattern(jot_shape, values, layout="raster"):
    """Tile integer thresholds over the jot grid.

    Cycles through values in flat row-major raster order: jot (r, c) gets
    values[(r*W + c) % len(values)].
    """
    if layout != "raster":
        raise ValueError(f"unknown threshold layout: {layout!r}")
    vals = np.asarray(values)
    if vals.size == 0:
        raise ValueError("threshold values must be nonempty")
    if not np.issubdtype(vals.dtype, np.integer) or np.any(vals < 1):
        raise ValueError("threshold values must be integers >= 1")
    h, w = int(jot_shape[0]), int(jot_shape[1])
    idx = np.arange(h * w) % vals.size
    return vals[idx].reshape(h, w).astype(np.int64)


@dataclass
class BinaryFrameStack:
    """K one-bit frames on the jot grid plus the thresholds that made them."""

    frames: np.ndarray
    thresholds: np.ndarray

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        self.thresholds = np.asarray(self.thresholds)
        if self.frames.ndim != 3 or self.frames.shape[0] < 1:
            raise ValueError("frames must be a (K, H, W) array with K >= 1")
        if self.thresholds.shape != self.frames.shape[1:]:
            raise DimensionMismatchError(
                "thresholds do not match the frame grid")
        if not np.issubdtype(self.thresholds.dtype, np.integer) \
                or np.any(self.thresholds < 1):
            raise ValueError("thresholds must be integers >= 1")
        vals = np.unique(self.frames)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("frames must be strictly binary")
        self.frames = self.frames.astype(np.uint8)

    @property
    def num_frames(self):
        return self.frames.shape[0]

    @property
    def jot_shape(self):
        return self.thresholds.shape

    def on_counts(self):
        """Per-jot number of frames with b = 1."""
        return self.frames.sum(axis=0, dtype=np.int64)


_PTRS_SWITCH = 30.0


def sample_poisson(lam, gen):
    """Exact Poisson draws for an array of rates from one Generator.

    Inversion by sequential search for rates below 30, Hormann's PTRS
    transformed rejection above.  Consumes uniforms in a fixed order
    (all inversion lanes first), so results are reproducible.
    """
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise ValueError("rates must be finite and nonnegative")
    flat = lam.ravel()
    out = np.zeros(flat.shape, dtype=np.int64)
    small = flat < _PTRS_SWITCH
    if np.any(small):
        out[small] = _poisson_inversion(flat[small], gen)
    if np.any(~small):
        out[~small] = _poisson_ptrs(flat[~small], gen)
    return out.reshape(lam.shape)


def _poisson_inversion(lam, gen, max_k=400):
    u = gen.random(lam.size)
    return _inversion_from_uniforms(lam, u[None, :], max_k)[0]


def _inversion_from_uniforms(lam, u, max_k=400):
    """Sequential-search inversion for rates (n,) against uniforms (C, n).

    Each row of u is one frame's uniform draws; the search runs jointly
    over all rows, so the per-step numpy overhead is shared.
    """
    k = np.zeros(u.shape, dtype=np.int64)
    p = np.broadcast_to(np.exp(-lam), u.shape).copy()
    cum = p.copy()
    active = u >= cum
    while np.any(active):
        k[active] += 1
        p[active] *= np.broadcast_to(lam, u.shape)[active] / k[active]
        cum[active] += p[active]
        # mass beyond max_k is < 1e-100 for lam < 30
        active &= (u >= cum) & (k < max_k)
    return k


def _poisson_ptrs(lam, gen):
    n = lam.size
    out = np.empty(n, dtype=np.int64)
    todo = np.arange(n)
    b = 0.931 + 2.53 * np.sqrt(lam)
    a = -0.059 + 0.02483 * b
    inv_alpha = 1.1239 + 1.1328 / (b - 3.4)
    v_r = 0.9277 - 3.6224 / (b - 2.0)
    log_lam = np.log(lam)
    from scipy.special import gammaln  # local: keeps module import light

    while todo.size:
        lt = lam[todo]
        u = gen.random(todo.size) - 0.5
        v = gen.random(todo.size)
        us = 0.5 - np.abs(u)
        k = np.floor((2.0 * a[todo] / us + b[todo]) * u + lt + 0.43).astype(np.int64)
        accept = (us >= 0.07) & (v <= v_r[todo])
        reject = (k < 0) | ((us < 0.013) & (v > us))
        check = ~(accept | reject)
        if np.any(check):
            kc = k[check].astype(np.float64)
            lhs = (np.log(v[check] * inv_alpha[todo][check]
                          / (a[todo][check] / us[check] ** 2 + b[todo][check])))
            rhs = kc * log_lam[todo][check] - lt[check] - gammaln(kc + 1.0)
            acc2 = lhs <= rhs
            sel = np.where(check)[0][acc2]
            accept[sel] = True
        out[todo[accept]] = k[accept]
        todo = todo[~accept]
    return out


def simulate(x, op, thresholds, num_frames, rng):
    """Expose the sensor num_frames times and return the binary stack.

    Frame k uses the seed-derived stream k, so any scheduling of frames
    yields bit-identical output for a fixed seed.  Frames are processed
    in memory-bounded chunks: each frame's uniforms come from its own
    stream in the same order as sample_poisson would draw them, so the
    bits are identical to per-frame sampling.
    """
    if num_frames < 1:
        raise ValueError("frame count must be >= 1")
    thresholds = np.asarray(thresholds)
    lam = apply_forward(op, x)
    if thresholds.shape != lam.shape:
        raise DimensionMismatchError(
            f"thresholds {thresholds.shape} do not match jot grid {lam.shape}")
    lam_flat = lam.ravel()
    thr_flat = thresholds.ravel()
    n = lam_flat.size
    small = lam_flat < _PTRS_SWITCH
    large = ~small
    frames = np.empty((num_frames, n), dtype=np.uint8)
    chunk = max(1, 4_000_000 // max(n, 1))
    for start in range(0, num_frames, chunk):
        stop = min(start + chunk, num_frames)
        gens = [rng.stream(k) for k in range(start, stop)]
        counts = np.zeros((stop - start, n), dtype=np.int64)
        if np.any(small):
            u = np.stack([g.random(int(small.sum())) for g in gens])
            counts[:, small] = _inversion_from_uniforms(lam_flat[small], u)
        if np.any(large):
            for i, g in enumerate(gens):
                counts[i, large] = _poisson_ptrs(lam_flat[large], g)
        frames[start:stop] = counts >= thr_flat
    frames = frames.reshape((num_frames,) + lam.shape)
    return BinaryFrameStack(frames=frames, thresholds=thresholds)
