"""Command-line surface: simulate, reconstruct, train-dict, train-net,
evaluate, experiment.

Exit codes: 0 success, 2 bad arguments or unmet preconditions, 3 I/O
failure, 4 dimension mismatches.  A TOML config file may supply defaults
for any flag of the invoked command (command-line flags win).
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import harness, mlnet
from .errors import DimensionMismatchError, DivergenceError, NonFiniteError
from .formats import (read_bfs, read_dict, read_mlnet, read_pfm, read_pgm,
                      write_bfs, write_dict, write_mlnet, write_pfm)
from .ksvd import KsvdConfig, ksvd_train
from .metrics import psnr
from .sensor import (ForwardOperator, IntensityImage, RngState, load_kernel,
                     make_threshold_pattern, simulate)
from .solvers import (SolverConfig, fista_reconstruct, ista_reconstruct,
                      ml_reconstruct)
from .sparse import Nonlinearity, PatchGrid, extract_patches


def parse_thresholds(text):
    """"1..10" -> 1,...,10; "2,5,7" -> that list; "3" -> [3]."""
    text = text.strip()
    if ".." in text:
        lo, hi = text.split("..", 1)
        vals = list(range(int(lo), int(hi) + 1))
    else:
        vals = [int(v) for v in text.split(",") if v]
    if not vals or any(v < 1 for v in vals):
        raise ValueError(f"invalid threshold list: {text!r}")
    return vals


def read_image(path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        return read_pfm(path).astype(np.float64)
    if ext == ".pgm":
        return read_pgm(path).astype(np.float64)
    raise ValueError(f"unsupported image format: {path}")


def _operator_for(args, image_shape):
    psf = load_kernel(args.psf_file) if getattr(args, "psf_file", None) \
        else None
    return ForwardOperator(image_shape, oversampling=args.oversample,
                           psf_sigma=args.psf_sigma, psf=psf)


def cmd_simulate(args):
    data = read_image(args.input)
    peak = args.peak if args.peak is not None else max(float(data.max()), 1.0)
    img = IntensityImage(data=data, peak=peak)
    if args.frames < 1:
        raise ValueError("--frames must be >= 1")
    op = _operator_for(args, img.data.shape)
    thr = make_threshold_pattern(op.jot_shape, parse_thresholds(args.thresholds))
    stack = simulate(img, op, thr, args.frames, RngState(seed=args.seed))
    write_bfs(args.out, stack)
    frac = stack.frames.mean()
    print(f"wrote {args.out}: {stack.num_frames} frames "
          f"{stack.jot_shape[1]}x{stack.jot_shape[0]} jots, "
          f"on-bit fraction {frac:.4f}")
    return 0


def cmd_reconstruct(args):
    stack = read_bfs(args.input)
    jh, jw = stack.jot_shape
    s = args.oversample
    if jh % s or jw % s:
        raise DimensionMismatchError(
            f"jot grid {jh}x{jw} is not divisible by oversampling {s}")
    op = _operator_for(args, (jh // s, jw // s))
    if args.peak is None:
        raise ValueError("--peak is required (dynamic-range initialization)")
    cfg = SolverConfig(mu=args.mu, max_iters=args.iters, peak=args.peak,
                       step_policy="fixed" if args.eta else "backtracking",
                       eta=args.eta,
                       stop_tol=args.stop_tol)
    if args.method == "ml":
        img, trace = ml_reconstruct(stack, op, cfg)
    else:
        if args.dict is None:
            raise ValueError(f"--method {args.method} requires --dict")
        dictionary = read_dict(args.dict)
        rho = Nonlinearity.softplus(beta=args.beta)
        grid = PatchGrid(image_shape=op.image_shape,
                         patch_side=args.patch_side, stride=args.stride)
        if args.method == "fista":
            img, trace = fista_reconstruct(stack, dictionary, rho, op, grid,
                                           cfg)
        elif args.method == "ista":
            img, trace = ista_reconstruct(stack, dictionary, rho, op, grid,
                                          cfg)
        else:  # mlnet
            if args.mlnet is None:
                raise ValueError("--method mlnet requires --mlnet")
            params = read_mlnet(args.mlnet)
            img = mlnet.reconstruct(params, stack, op, grid, dictionary, rho,
                                    peak=args.peak)
            trace = None
    write_pfm(args.out, img.data.astype(np.float32))
    if trace is not None and args.trace:
        trace.to_csv(args.trace)
    print(f"wrote {args.out} ({args.method})")
    return 0


def _corpus_patches(directory, patch_side, stride):
    files = sorted(f for f in os.listdir(directory)
                   if f.lower().endswith((".pgm", ".pfm")))
    if not files:
        raise ValueError(f"no .pgm/.pfm images found in {directory}")
    parts = []
    for fname in files:
        data = read_image(os.path.join(directory, fname))
        grid = PatchGrid(image_shape=data.shape, patch_side=patch_side,
                         stride=stride)
        parts.append(extract_patches(data, grid))
    return np.concatenate(parts)


def cmd_train_dict(args):
    patches = _corpus_patches(args.corpus, args.patch_side, args.stride)
    if len(patches) < args.atoms:
        raise ValueError(
            f"corpus yields {len(patches)} patches < {args.atoms} atoms")
    cfg = KsvdConfig(num_atoms=args.atoms, sparsity=args.sparsity,
                     iterations=args.iters, seed=args.seed)
    dictionary = ksvd_train(patches, cfg)
    write_dict(args.out, dictionary)
    print(f"wrote {args.out}: {dictionary.atom_dim}x{dictionary.num_atoms} "
          f"atoms from {len(patches)} patches")
    return 0


def cmd_train_net(args):
    from .solvers import PatchBinaryModel

    dictionary = read_dict(args.dict)
    rho = Nonlinearity.softplus(beta=args.beta)
    thr_values = parse_thresholds(args.thresholds)
    files = sorted(f for f in os.listdir(args.corpus)
                   if f.lower().endswith((".pgm", ".pfm")))
    if not files:
        raise ValueError(f"no .pgm/.pfm images found in {args.corpus}")
    models, targets = [], []
    for i, fname in enumerate(files):
        data = read_image(os.path.join(args.corpus, fname))
        img = IntensityImage(data=data, peak=max(args.peak, float(data.max())))
        op = _operator_for(args, data.shape)
        thr = make_threshold_pattern(op.jot_shape, thr_values)
        stack = simulate(img, op, thr, args.frames,
                         RngState(seed=(args.seed << 8) + i))
        grid = PatchGrid(image_shape=data.shape, patch_side=args.patch_side,
                         stride=args.stride)
        models.append(PatchBinaryModel.from_stack(stack, grid, op))
        targets.append(extract_patches(data, grid))
    model = PatchBinaryModel(models[0].hmat,
                             np.concatenate([m.q for m in models]),
                             np.concatenate([m.n_on for m in models]),
                             args.frames)
    dataset = mlnet.PatchDataset(model=model,
                                 targets=np.concatenate(targets))
    spec = harness.ExperimentSpec(out_dir=".", seed=args.seed,
                                  peak=args.peak)
    eta, mu, z0 = harness.ista_hyperparams(spec, dataset, dictionary, rho)
    params = mlnet.init_from_ista(dictionary, eta, mu, args.layers)
    cfg = mlnet.TrainConfig(batch_size=args.batch, epochs=args.epochs,
                            seed=args.seed, lr=args.lr)
    trained, curve = mlnet.train(params, dataset, cfg, dictionary, rho, z0=z0)
    write_mlnet(args.out, trained)
    if args.curve:
        with open(args.curve, "w") as f:
            f.write("epoch,train_loss,val_loss\n")
            for epoch, tl, vl in curve:
                f.write(f"{epoch},{tl:.10e},{vl:.10e}\n")
    print(f"wrote {args.out}: {args.layers} layers trained on "
          f"{len(dataset)} patches")
    return 0


def cmd_evaluate(args):
    a = read_image(args.image)
    b = read_image(args.reference)
    result = psnr(a, b, peak=args.peak)
    if result.infinite:
        print("psnr: inf")
    else:
        print(f"psnr: {result.psnr:.4f}")
    return 0


def cmd_experiment(args):
    overrides = {}
    if args.size is not None:
        overrides["image_shape"] = (args.size, args.size)
    for key in ("num_frames", "solver_iters", "epochs", "mlnet_layers",
                "latency_iters", "dict_scenes", "net_scenes",
                "ksvd_iterations", "stride"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    maker = {"lowlight": harness.lowlight_spec, "hdr": harness.hdr_spec,
             "latency": harness.latency_spec}[args.kind]
    spec = maker(args.out, seed=args.seed, **overrides)
    runner = {"lowlight": harness.run_lowlight, "hdr": harness.run_hdr,
              "latency": harness.run_latency}[args.kind]
    report = runner(spec)
    for k in sorted(report.psnrs):
        print(f"{k}: {report.psnrs[k]:.4f}")
    print(f"report in {report.out_dir}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="jotrecon",
                                description="one-bit sensor simulation and "
                                            "sparse ML reconstruction")
    p.add_argument("--config", help="TOML file with per-command defaults")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("simulate", help="expose a binary frame stack")
    sp.add_argument("input", help="ground-truth image (.pfm/.pgm)")
    sp.add_argument("--out", required=True, help="output .bfs path")
    sp.add_argument("--frames", type=int, default=4)
    sp.add_argument("--thresholds", default="1..10")
    sp.add_argument("--oversample", type=int, default=1)
    sp.add_argument("--psf-sigma", type=float, default=None)
    sp.add_argument("--psf-file", default=None,
                    help="plain-text PSF matrix (overrides --psf-sigma)")
    sp.add_argument("--peak", type=float, default=None)
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_simulate)

    rp = sub.add_parser("reconstruct", help="reconstruct from a .bfs stack")
    rp.add_argument("input", help=".bfs stack")
    rp.add_argument("--method", choices=("ml", "fista", "ista", "mlnet"),
                    required=True)
    rp.add_argument("--out", required=True, help="output .pfm image")
    rp.add_argument("--trace", default=None, help="per-iteration CSV")
    rp.add_argument("--dict", default=None)
    rp.add_argument("--mlnet", default=None)
    rp.add_argument("--mu", type=float, default=None)
    rp.add_argument("--eta", type=float, default=None,
                    help="fixed step size (default: backtracking)")
    rp.add_argument("--iters", type=int, default=200)
    rp.add_argument("--stop-tol", type=float, default=1e-6)
    rp.add_argument("--peak", type=float, default=None)
    rp.add_argument("--oversample", type=int, default=1)
    rp.add_argument("--psf-sigma", type=float, default=None)
    rp.add_argument("--psf-file", default=None)
    rp.add_argument("--patch-side", type=int, default=8)
    rp.add_argument("--stride", type=int, default=1)
    rp.add_argument("--beta", type=float, default=10.0)
    rp.set_defaults(func=cmd_reconstruct)

    dp = sub.add_parser("train-dict", help="k-SVD on an image corpus")
    dp.add_argument("corpus", help="directory of .pgm/.pfm images")
    dp.add_argument("--out", required=True, help="output .dict path")
    dp.add_argument("--atoms", type=int, default=256)
    dp.add_argument("--sparsity", type=int, default=8)
    dp.add_argument("--iters", type=int, default=30)
    dp.add_argument("--patch-side", type=int, default=8)
    dp.add_argument("--stride", type=int, default=3)
    dp.add_argument("--seed", type=int, default=0)
    dp.set_defaults(func=cmd_train_dict)

    np_ = sub.add_parser("train-net", help="train an unrolled network")
    np_.add_argument("corpus", help="directory of clean training images")
    np_.add_argument("--dict", required=True)
    np_.add_argument("--out", required=True, help="output .mlnet path")
    np_.add_argument("--curve", default=None, help="loss-curve CSV")
    np_.add_argument("--layers", type=int, default=10)
    np_.add_argument("--epochs", type=int, default=30)
    np_.add_argument("--batch", type=int, default=64)
    np_.add_argument("--lr", type=float, default=1e-3)
    np_.add_argument("--frames", type=int, default=4)
    np_.add_argument("--thresholds", default="1..10")
    np_.add_argument("--oversample", type=int, default=1)
    np_.add_argument("--psf-sigma", type=float, default=None)
    np_.add_argument("--psf-file", default=None)
    np_.add_argument("--patch-side", type=int, default=8)
    np_.add_argument("--stride", type=int, default=2)
    np_.add_argument("--peak", type=float, default=10.0)
    np_.add_argument("--beta", type=float, default=10.0)
    np_.add_argument("--seed", type=int, default=0)
    np_.set_defaults(func=cmd_train_net)

    ep = sub.add_parser("evaluate", help="PSNR between two images")
    ep.add_argument("image")
    ep.add_argument("reference")
    ep.add_argument("--peak", type=float, required=True)
    ep.set_defaults(func=cmd_evaluate)

    xp = sub.add_parser("experiment", help="run a harness experiment")
    xp.add_argument("kind", choices=("lowlight", "hdr", "latency"))
    xp.add_argument("--out", required=True, help="report directory")
    xp.add_argument("--seed", type=int, default=0)
    xp.add_argument("--size", type=int, default=None)
    xp.add_argument("--num-frames", type=int, default=None, dest="num_frames")
    xp.add_argument("--solver-iters", type=int, default=None,
                    dest="solver_iters")
    xp.add_argument("--latency-iters", type=int, default=None,
                    dest="latency_iters")
    xp.add_argument("--epochs", type=int, default=None)
    xp.add_argument("--mlnet-layers", type=int, default=None,
                    dest="mlnet_layers")
    xp.add_argument("--dict-scenes", type=int, default=None,
                    dest="dict_scenes")
    xp.add_argument("--net-scenes", type=int, default=None, dest="net_scenes")
    xp.add_argument("--ksvd-iterations", type=int, default=None,
                    dest="ksvd_iterations")
    xp.add_argument("--stride", type=int, default=None)
    xp.set_defaults(func=cmd_experiment)

    return p, {"simulate": sp, "reconstruct": rp, "train-dict": dp,
               "train-net": np_, "evaluate": ep, "experiment": xp}


def _apply_config(argv, parser, subparsers):
    """Config-file values become defaults of the invoked subcommand."""
    if "--config" not in argv:
        return
    path = argv[argv.index("--config") + 1]
    with open(path, "rb") as f:
        cfg = tomllib.load(f)
    for name, sp in subparsers.items():
        if name not in argv:
            continue
        section = cfg.get(name, cfg)
        dests = {a.dest for a in sp._actions}
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in section.items()
                           if k.replace("-", "_") in dests})


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subparsers = build_parser()
    try:
        _apply_config(argv, parser, subparsers)
        args = parser.parse_args(argv)
        return args.func(args)
    except DimensionMismatchError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, DivergenceError, NonFiniteError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
