"""Desk-scale experiment reproduction.

Three experiments mirror the reference results: a low-light benchmark
(few binary frames, thresholds tiling 1..10), a high-dynamic-range
benchmark (a single frame, log-spaced thresholds, synthetic scenes
spanning five decades), and a latency comparison (quality of ISTA /
FISTA stopped after a given number of iterations against trained
networks with the equivalent number of layers).

Every experiment is a pure function of its spec: scene generation,
simulation, dictionary training, and network training all derive their
randomness from the spec seed, and no wall-clock values are written, so
reruns are byte-identical.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import mlnet
from .formats import (read_dict, read_mlnet, write_dict, write_mlnet,
                      write_pfm, write_pgm)
from .ksvd import KsvdConfig, ksvd_train
from .metrics import psnr, quality_curve
from .sensor import (ForwardOperator, IntensityImage, RngState,
                     make_threshold_pattern, simulate)
from .solvers import (PatchBinaryModel, SolverConfig, code_datafit_grad,
                      code_rates, default_code_init, fista_reconstruct,
                      ista_reconstruct, ml_reconstruct, _seed_eta)
from .sparse import Nonlinearity, PatchGrid, extract_patches


@dataclass
class ExperimentSpec:
    """Everything an experiment needs; outputs are a pure function of it."""

    name: str = "lowlight"
    out_dir: str = "out"
    seed: int = 0
    image_shape: tuple = (64, 64)
    peak: float = 10.0
    num_frames: int = 4
    threshold_values: tuple = tuple(range(1, 11))
    oversampling: int = 2
    psf_sigma: float | None = None      # None: 0.5 * oversampling
    decades: float = 5.0                # HDR dynamic range, log10 units
    patch_side: int = 8
    stride: int = 2
    num_atoms: int = 256
    ksvd_sparsity: int = 8
    ksvd_iterations: int = 30
    dict_scenes: int = 8
    net_scenes: int = 8
    solver_iters: int = 200
    latency_iters: int = 1000
    mlnet_layers: int = 10
    layer_sweep: tuple = (1, 2, 5, 10, 20)
    epochs: int = 40
    batch_size: int = 64
    lr: float = 1e-3
    rho_beta: float = 10.0

    def __post_init__(self):
        if self.peak <= 0:
            raise ValueError("peak must be positive")
        if self.num_frames < 1:
            raise ValueError("num_frames must be >= 1")

    def rng(self, *tag):
        """Deterministic generator for a named sub-stream of the seed."""
        return np.random.default_rng([self.seed & 0xFFFFFFFF, *tag])


@dataclass
class ExperimentReport:
    out_dir: str
    psnrs: dict = field(default_factory=dict)
    files: list = field(default_factory=list)


def lowlight_spec(out_dir, seed=0, **overrides):
    """Default low-light benchmark: peak 10, K=4, thresholds 1..10."""
    return ExperimentSpec(name="lowlight", out_dir=out_dir, seed=seed,
                          **overrides)


def hdr_spec(out_dir, seed=0, **overrides):
    """Default HDR benchmark: five decades, one frame, log-spaced
    thresholds reaching past the peak so bright jots keep off-bits."""
    base = dict(name="hdr", out_dir=out_dir, seed=seed, peak=1e3,
                num_frames=1, decades=5.0,
                threshold_values=(1, 3, 10, 30, 100, 300, 1000, 3000))
    base.update(overrides)
    return ExperimentSpec(**base)


def latency_spec(out_dir, seed=0, **overrides):
    base = dict(name="latency", out_dir=out_dir, seed=seed)
    base.update(overrides)
    return ExperimentSpec(**base)


# ------------------------------------------------------------------
# Synthetic scenes
# ------------------------------------------------------------------


def synthetic_scene(shape, peak, rng):
    """Piecewise-smooth scene: a gradient base plus gaussian bumps and
    constant-valued rectangles and disks (edges for the prior to learn)."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    img = np.clip(rng.uniform(0.1, 0.5)
                  + rng.uniform(-0.3, 0.3) * xx / w
                  + rng.uniform(-0.3, 0.3) * yy / h, 0.05, None)
    for _ in range(int(rng.integers(3, 7))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        sig = rng.uniform(4, 12)
        img += rng.uniform(0.2, 1.0) * np.exp(
            -((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig ** 2))
    for _ in range(int(rng.integers(2, 5))):
        r0 = int(rng.integers(0, max(h - 8, 1)))
        c0 = int(rng.integers(0, max(w - 8, 1)))
        rh = int(rng.integers(6, max(h // 2, 7)))
        cw = int(rng.integers(6, max(w // 2, 7)))
        val = rng.uniform(0.1, 1.0)
        if rng.random() < 0.5:
            img[r0:min(r0 + rh, h), c0:min(c0 + cw, w)] += val
        else:
            cy, cx = r0 + rh / 2, c0 + cw / 2
            rad = min(rh, cw) / 2
            img[(yy - cy) ** 2 + (xx - cx) ** 2 <= rad ** 2] += val
    img = np.clip(img, 0, None)
    return img / img.max() * peak


def hdr_scene(shape, peak, decades, rng):
    """Log-uniform intensities over the requested number of decades with
    the same piecewise-smooth structure."""
    base = synthetic_scene(shape, 1.0, rng)
    lo = np.log10(peak) - decades
    return 10.0 ** (lo + base * decades)


def _scene_for(spec, rng, hdr=False):
    if hdr:
        return hdr_scene(spec.image_shape, spec.peak, spec.decades, rng)
    return synthetic_scene(spec.image_shape, spec.peak, rng)


# ------------------------------------------------------------------
# Shared assets: operator, dictionary, trained networks
# ------------------------------------------------------------------


def make_operator(spec):
    return ForwardOperator(spec.image_shape, oversampling=spec.oversampling,
                           psf_sigma=spec.psf_sigma)


def make_grid(spec):
    return PatchGrid(image_shape=spec.image_shape,
                     patch_side=spec.patch_side, stride=spec.stride)


def make_thresholds(spec, op):
    return make_threshold_pattern(op.jot_shape, list(spec.threshold_values))


def make_rho(spec):
    return Nonlinearity.softplus(beta=spec.rho_beta)


def training_patches(spec, hdr=False):
    """Clean patches from scenes disjoint from the benchmark scene."""
    grid = PatchGrid(image_shape=spec.image_shape,
                     patch_side=spec.patch_side, stride=3)
    parts = [extract_patches(_scene_for(spec, spec.rng(100, i), hdr), grid)
             for i in range(spec.dict_scenes)]
    return np.concatenate(parts)


def build_dictionary(spec, hdr=False, cache_dir=None):
    """Train (or load from cache) the k-SVD dictionary for this spec."""
    path = None
    if cache_dir is not None:
        path = os.path.join(cache_dir, "dictionary.dict")
        if os.path.exists(path):
            return read_dict(path)
    cfg = KsvdConfig(num_atoms=spec.num_atoms, sparsity=spec.ksvd_sparsity,
                     iterations=spec.ksvd_iterations, seed=spec.seed + 17)
    dictionary = ksvd_train(training_patches(spec, hdr), cfg)
    if path is not None:
        write_dict(path, dictionary)
    return dictionary


def build_training_set(spec, op, thresholds, grid, hdr=False):
    """Simulated (window, clean patch) pairs from held-out scenes."""
    models, targets = [], []
    for i in range(spec.net_scenes):
        scene = _scene_for(spec, spec.rng(200, i), hdr)
        truth = IntensityImage(data=scene, peak=spec.peak)
        stack = simulate(truth, op, thresholds, spec.num_frames,
                         RngState(seed=(spec.seed << 8) + 300 + i))
        models.append(PatchBinaryModel.from_stack(stack, grid, op))
        targets.append(extract_patches(scene, grid))
    model = PatchBinaryModel(models[0].hmat,
                             np.concatenate([m.q for m in models]),
                             np.concatenate([m.n_on for m in models]),
                             spec.num_frames)
    return mlnet.PatchDataset(model=model, targets=np.concatenate(targets))


def ista_hyperparams(spec, dataset, dictionary, rho):
    """Step size and sparsity weight matching the solvers' defaults."""
    z0 = default_code_init(dictionary, rho, spec.peak)
    Z0 = np.tile(z0, (len(dataset), 1))
    lam0 = code_rates(dataset.model, dictionary, rho, Z0)
    eta = _seed_eta(dataset.model, dictionary, rho, lam0)
    _, g0 = code_datafit_grad(dataset.model, dictionary, rho, Z0)
    mu = max(0.05 * float(np.abs(g0).max()), 1e-12)
    return eta, mu, z0


def build_network(spec, dataset, dictionary, rho, num_layers,
                  cache_dir=None):
    """Train (or load) an unrolled network with the given depth."""
    path = None
    if cache_dir is not None:
        path = os.path.join(cache_dir, f"mlnet_T{num_layers}.mlnet")
        if os.path.exists(path):
            return read_mlnet(path), None
    eta, mu, z0 = ista_hyperparams(spec, dataset, dictionary, rho)
    params = mlnet.init_from_ista(dictionary, eta, mu, num_layers)
    cfg = mlnet.TrainConfig(batch_size=spec.batch_size, epochs=spec.epochs,
                            seed=spec.seed + 23, lr=spec.lr)
    trained, curve = mlnet.train(params, dataset, cfg, dictionary, rho, z0=z0)
    if path is not None:
        write_mlnet(path, trained)
    return trained, curve


# ------------------------------------------------------------------
# Report plumbing
# ------------------------------------------------------------------


def _write_manifest(spec, report, extra=()):
    """Echo every spec field except the output location (so reruns into
    different directories stay byte-identical)."""
    path = os.path.join(report.out_dir, "manifest.txt")
    with open(path, "w") as f:
        f.write(f"experiment: {spec.name}\n")
        for fld in sorted(dataclasses.fields(spec), key=lambda x: x.name):
            if fld.name in ("out_dir", "name"):
                continue
            f.write(f"{fld.name}: {getattr(spec, fld.name)}\n")
        for line in extra:
            f.write(line + "\n")
    report.files.append(path)


def _write_image(report, name, data, log_display=False):
    path = os.path.join(report.out_dir, name + ".pfm")
    write_pfm(path, np.asarray(data, dtype=np.float32))
    report.files.append(path)
    if log_display:
        disp = np.log10(np.maximum(np.asarray(data, dtype=np.float64), 1e-12))
        path = os.path.join(report.out_dir, name + "_log.pfm")
        write_pfm(path, disp.astype(np.float32))
        report.files.append(path)


def _write_binary_preview(report, stack):
    path = os.path.join(report.out_dir, "binary_frame0.pgm")
    write_pgm(path, stack.frames[0].astype(np.uint8) * 255, maxval=255)
    report.files.append(path)


def _write_psnr_table(report):
    path = os.path.join(report.out_dir, "psnr.csv")
    with open(path, "w") as f:
        f.write("method,psnr\n")
        for k in sorted(report.psnrs):
            f.write(f"{k},{report.psnrs[k]:.6f}\n")
    report.files.append(path)


def _prepare(spec):
    os.makedirs(spec.out_dir, exist_ok=True)
    report = ExperimentReport(out_dir=spec.out_dir)
    return report


# ------------------------------------------------------------------
# Experiments
# ------------------------------------------------------------------


def run_lowlight(spec):
    """Low-light benchmark: K frames, thresholds tiling the value list;
    ML, FISTA-with-prior, and MLNet reconstructions with PSNR for each."""
    report = _prepare(spec)
    op = make_operator(spec)
    grid = make_grid(spec)
    rho = make_rho(spec)
    thresholds = make_thresholds(spec, op)
    scene = _scene_for(spec, spec.rng(1), hdr=False)
    truth = IntensityImage(data=scene, peak=spec.peak)
    stack = simulate(truth, op, thresholds, spec.num_frames,
                     RngState(seed=(spec.seed << 8) + 1))

    dictionary = build_dictionary(spec, cache_dir=spec.out_dir)
    dataset = build_training_set(spec, op, thresholds, grid)
    params, _ = build_network(spec, dataset, dictionary, rho,
                              spec.mlnet_layers, cache_dir=spec.out_dir)

    cfg = SolverConfig(max_iters=spec.solver_iters, peak=spec.peak)
    img_ml, _ = ml_reconstruct(stack, op, cfg, ground_truth=truth)
    img_fista, _ = fista_reconstruct(stack, dictionary, rho, op, grid, cfg,
                                     ground_truth=truth)
    img_net = mlnet.reconstruct(params, stack, op, grid, dictionary, rho,
                                peak=spec.peak)

    report.psnrs = {
        "ml": psnr(img_ml, truth, spec.peak).psnr,
        "fista": psnr(img_fista, truth, spec.peak).psnr,
        "mlnet": psnr(img_net, truth, spec.peak).psnr,
    }
    _write_image(report, "truth", truth.data)
    _write_binary_preview(report, stack)
    _write_image(report, "ml", img_ml.data)
    _write_image(report, "fista", img_fista.data)
    _write_image(report, "mlnet", img_net.data)
    _write_psnr_table(report)
    _write_manifest(spec, report)
    return report


def run_hdr(spec):
    """HDR benchmark: synthetic five-decade scenes, log-spaced thresholds,
    a single frame by default; images also written on a log scale."""
    report = _prepare(spec)
    op = make_operator(spec)
    grid = make_grid(spec)
    rho = make_rho(spec)
    thresholds = make_thresholds(spec, op)
    scene = _scene_for(spec, spec.rng(1), hdr=True)
    truth = IntensityImage(data=scene, peak=spec.peak)
    stack = simulate(truth, op, thresholds, spec.num_frames,
                     RngState(seed=(spec.seed << 8) + 1))

    dictionary = build_dictionary(spec, hdr=True, cache_dir=spec.out_dir)
    cfg = SolverConfig(max_iters=spec.solver_iters, peak=spec.peak)
    img_ml, _ = ml_reconstruct(stack, op, cfg, ground_truth=truth)
    img_fista, _ = fista_reconstruct(stack, dictionary, rho, op, grid, cfg,
                                     ground_truth=truth)

    report.psnrs = {
        "ml": psnr(img_ml, truth, spec.peak).psnr,
        "fista": psnr(img_fista, truth, spec.peak).psnr,
    }
    _write_image(report, "truth", truth.data, log_display=True)
    _write_binary_preview(report, stack)
    _write_image(report, "ml", img_ml.data, log_display=True)
    _write_image(report, "fista", img_fista.data, log_display=True)
    _write_psnr_table(report)
    _write_manifest(spec, report)
    return report


def run_latency(spec):
    """Quality versus iteration count: ISTA and FISTA traces, trained
    networks at each depth in the sweep, and the flat ML reference."""
    report = _prepare(spec)
    op = make_operator(spec)
    grid = make_grid(spec)
    rho = make_rho(spec)
    thresholds = make_thresholds(spec, op)
    scene = _scene_for(spec, spec.rng(1), hdr=False)
    truth = IntensityImage(data=scene, peak=spec.peak)
    stack = simulate(truth, op, thresholds, spec.num_frames,
                     RngState(seed=(spec.seed << 8) + 1))

    dictionary = build_dictionary(spec, cache_dir=spec.out_dir)
    dataset = build_training_set(spec, op, thresholds, grid)

    iter_cfg = SolverConfig(max_iters=spec.latency_iters, peak=spec.peak,
                            stop_tol=1e-9)
    _, tr_ista = ista_reconstruct(stack, dictionary, rho, op, grid, iter_cfg,
                                  ground_truth=truth)
    _, tr_fista = fista_reconstruct(stack, dictionary, rho, op, grid,
                                    iter_cfg, ground_truth=truth)
    ml_cfg = SolverConfig(max_iters=spec.solver_iters, peak=spec.peak)
    img_ml, _ = ml_reconstruct(stack, op, ml_cfg, ground_truth=truth)
    ml_psnr = psnr(img_ml, truth, spec.peak).psnr

    net_points = []
    for layers in spec.layer_sweep:
        params, _ = build_network(spec, dataset, dictionary, rho, layers,
                                  cache_dir=spec.out_dir)
        img = mlnet.reconstruct(params, stack, op, grid, dictionary, rho,
                                peak=spec.peak)
        net_points.append((layers, psnr(img, truth, spec.peak).psnr))

    curve = quality_curve([tr_ista, tr_fista, [ml_psnr]],
                          ["ista", "fista", "ml"])
    curve_path = os.path.join(spec.out_dir, "quality_iterations.csv")
    curve.to_csv(curve_path)
    report.files.append(curve_path)
    net_path = os.path.join(spec.out_dir, "mlnet_layers.csv")
    with open(net_path, "w") as f:
        f.write("layers,psnr\n")
        for layers, val in net_points:
            f.write(f"{layers},{val:.6f}\n")
    report.files.append(net_path)

    report.psnrs = {"ml": ml_psnr,
                    "ista_final": tr_ista.psnr[-1],
                    "fista_final": tr_fista.psnr[-1]}
    for layers, val in net_points:
        report.psnrs[f"mlnet_T{layers}"] = val
    _write_psnr_table(report)
    _write_manifest(spec, report)
    return report
