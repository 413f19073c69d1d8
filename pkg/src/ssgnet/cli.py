"""Command-line surface.

Subcommands map one-to-one onto the library stages: ``graph`` builds and
inspects pixel graphs, ``eigs`` runs the spectral reference, ``train`` fits
the network, ``infer`` renders guidance maps from a checkpoint, ``fuse``
mixes a checkpoint's maps into a single guidance channel, ``gradcheck``
verifies gradients.  Every command that produces tabular data drops a small
matplotlib report next to it unless ``--no-figures`` is given.

Exit codes: 0 on success, 1 on runtime failure (bad file, failed check),
2 on usage errors (argparse's convention).

``SSG_THREADS`` pins the BLAS thread pools; it is applied before numpy is
imported, which is why all numeric imports in this module live inside the
command handlers.  The default is single-threaded, which keeps results
reproducible run to run.
"""

from __future__ import annotations

import argparse
import os
import sys

_BLAS_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS",
              "NUMEXPR_NUM_THREADS", "VECLIB_MAXIMUM_THREADS")


def _configure_threads() -> None:
    raw = os.environ.get("SSG_THREADS")
    if raw is None:
        for var in _BLAS_VARS:
            os.environ.setdefault(var, "1")
        return
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        print(f"error: SSG_THREADS must be a positive integer, got {raw!r}",
              file=sys.stderr)
        raise SystemExit(2)
    for var in _BLAS_VARS:
        os.environ[var] = str(n)


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _weights_list(text: str):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad weight list {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssgnet",
        description="Scene-structure guidance maps from single images.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("graph", help="build a pixel graph, report its size, "
                                     "optionally dump it")
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--out", default=None,
                   help="write the matrix in MatrixMarket coordinate format")
    p.add_argument("--what", choices=("laplacian", "affinity"),
                   default="laplacian", help="which matrix --out dumps")
    p.add_argument("--resolution", type=_positive_int, default=None,
                   help="resize the image to this square size first")
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("eigs", help="reference soft segmentation via the "
                                    "spectral solvers")
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n", type=_positive_int, default=3,
                   help="number of maps (n+1 eigenpairs are solved)")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--solver", choices=("auto", "dense", "lanczos"),
                   default="auto")
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=_positive_int, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eigs)

    p = sub.add_parser("train", help="fit the guidance network without labels")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--images", nargs="+",
                     help="a directory of PNG/PPM images, or explicit image "
                          "paths")
    src.add_argument("--builtin", type=_positive_int, metavar="N",
                     help="use N built-in synthetic scenes")
    p.add_argument("--steps", type=_positive_int, required=True)
    p.add_argument("--batch", type=_positive_int, default=4)
    p.add_argument("--lambda", dest="lam", type=float, default=40.0)
    p.add_argument("--gamma", type=float, default=0.9)
    p.add_argument("--n-eigen", type=_positive_int, default=3)
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resolution", type=_positive_int, default=256)
    p.add_argument("--crop-mode", choices=("resize-bilinear", "center-crop"),
                   default="resize-bilinear")
    p.add_argument("--normalize-per-pixel", action="store_true")
    p.add_argument("--checkpoint-out", required=True)
    p.add_argument("--trace-out", default=None,
                   help="loss trace CSV (default: <checkpoint>_trace.csv)")
    p.add_argument("--checkpoint-every", type=int, default=0,
                   help="also write numbered checkpoints every N steps")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="render guidance maps from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resolution", type=_positive_int, default=None)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("fuse", help="run a checkpoint on an image and mix "
                                    "its maps into one guidance channel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--weights", type=_weights_list, default=None,
                   help="comma-separated mixing weights (default: uniform)")
    p.add_argument("--resolution", type=_positive_int, default=None)
    p.add_argument("--raw-out", default=None,
                   help="also write the fused map losslessly")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gradcheck", help="finite-difference gradient "
                                         "verification")
    p.add_argument("--bits", choices=("32", "64", "all"), default="all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("version", help="print the package version")
    p.set_defaults(func=cmd_version)
    return parser


def _load_single_image(path, resolution):
    from .dataio import bilinear_resize, load_image

    img = load_image(path)
    if resolution is not None:
        img = bilinear_resize(img, resolution, resolution)
    return img


def cmd_graph(args) -> int:
    from .graph import build_image_graph, write_matrix_market

    img = _load_single_image(args.image, args.resolution)
    aff, lap = build_image_graph(img, k=args.k, eta=args.eta)
    print(f"nodes={aff.n_nodes} edges={aff.nnz // 2}")
    if args.out:
        g = lap if args.what == "laplacian" else aff
        write_matrix_market(g, args.out)
        print(f"wrote {args.what} ({g.nnz} stored entries) -> {args.out}")
    return 0


def cmd_eigs(args) -> int:
    import numpy as np

    from .dataio import save_maps
    from .graph import build_image_graph
    from .spectral import (dense_smallest_eigs, lanczos_smallest_eigs,
                           reference_softseg)

    img = _load_single_image(args.image, args.resolution)
    _, h, w = img.shape
    _, lap = build_image_graph(img, k=args.k, eta=args.eta)
    m = args.n + 1
    solver = args.solver
    if solver == "auto":
        solver = "dense" if lap.n_nodes <= 4096 else "lanczos"
    if solver == "dense":
        pairs = dense_smallest_eigs(lap, m)
    else:
        pairs = lanczos_smallest_eigs(lap, m, tol=args.tol, seed=args.seed)
    maps = reference_softseg(pairs, args.n, (h, w))
    os.makedirs(args.out_dir, exist_ok=True)
    written = save_maps(maps.astype(np.float32), args.out_dir,
                        basename="eigmap")
    table = os.path.join(args.out_dir, "eigenvalues.csv")
    with open(table, "w", encoding="ascii", newline="\n") as fh:
        fh.write("index,eigenvalue,residual\n")
        for i in range(pairs.values.shape[0]):
            fh.write(f"{i},{pairs.values[i]:.17g},{pairs.residuals[i]:.3e}\n")
    if not args.no_figures:
        from .figures import save_map_panel

        fig_path = os.path.join(args.out_dir, "eigmaps.png")
        save_map_panel(maps, fig_path, image=img,
                       title=f"spectral reference ({solver})")
    tag = "" if pairs.converged else " [NOT CONVERGED]"
    print(f"{solver} solver: {lap.n_nodes} nodes, eigenvalues "
          + ", ".join(f"{v:.5g}" for v in pairs.values) + tag)
    print(f"wrote {len(written)} map files + {table}")
    return 0 if pairs.converged else 1


def cmd_train(args) -> int:
    from .dataio import (DatasetSpec, dataset_from_dir, load_dataset,
                         save_checkpoint, write_trace_csv)
    from .losses import LossConfig, train
    from .model import SsgNet, param_count

    if args.builtin is not None:
        from .assets import builtin_images

        images = builtin_images(count=args.builtin, size=args.resolution)
    else:
        if len(args.images) == 1 and os.path.isdir(args.images[0]):
            spec = dataset_from_dir(args.images[0], args.resolution,
                                    args.crop_mode)
        else:
            spec = DatasetSpec(root=".", files=tuple(args.images),
                               resolution=args.resolution,
                               crop_mode=args.crop_mode)
        images = load_dataset(spec)
    cfg = LossConfig(lam=args.lam, gamma=args.gamma,
                     normalize_per_pixel=args.normalize_per_pixel)
    net = SsgNet.build(n_eigenmaps=args.n_eigen, seed=args.seed)
    print(f"training on {len(images)} images at {images[0].shape[1]}x"
          f"{images[0].shape[2]}, {param_count(net)} parameters")
    report_every = max(1, args.steps // 10)
    ckpt_dir = os.path.dirname(os.path.abspath(args.checkpoint_out))
    os.makedirs(ckpt_dir, exist_ok=True)

    def hook(row, net_, adam_):
        if row.step % report_every == 0 or row.step == args.steps:
            print(f"step {row.step}/{args.steps}  l_eigen={row.l_eigen:.5g}  "
                  f"l_spatial={row.l_spatial:.5g}  l_ssg={row.l_ssg:.5g}")
        if args.checkpoint_every > 0 and row.step % args.checkpoint_every == 0:
            from .dataio import checkpoint_from_model

            model, opt = checkpoint_from_model(net_, adam_)
            save_checkpoint(os.path.join(
                ckpt_dir, f"checkpoint_step{row.step:06d}.ssgn"), model, opt)

    result = train(net, images, cfg, steps=args.steps, batch=args.batch,
                   seed=args.seed, k=args.k, eta=args.eta, lr=args.lr,
                   step_hook=hook)
    model, opt = result.checkpoint()
    save_checkpoint(args.checkpoint_out, model, opt)
    stem = os.path.splitext(os.path.abspath(args.checkpoint_out))[0]
    trace_out = args.trace_out or stem + "_trace.csv"
    write_trace_csv(result.trace, trace_out)
    print(f"wrote {args.checkpoint_out} and {trace_out}")
    if not args.no_figures:
        from .figures import save_loss_curves

        fig_path = os.path.splitext(trace_out)[0] + ".png"
        save_loss_curves(result.trace, fig_path)
        print(f"wrote {fig_path}")
    return 0


def cmd_infer(args) -> int:
    import numpy as np

    from .dataio import load_checkpoint, model_from_checkpoint, save_maps
    from .model import forward_padded
    from .tensor import no_grad

    entries, _ = load_checkpoint(args.checkpoint)
    net = model_from_checkpoint(entries)
    img = _load_single_image(args.image, args.resolution)
    with no_grad():
        maps = forward_padded(net, img[None]).data[0]
    os.makedirs(args.out_dir, exist_ok=True)
    written = save_maps(maps.astype(np.float32), args.out_dir, basename="map")
    if not args.no_figures:
        from .figures import save_map_panel

        save_map_panel(maps, os.path.join(args.out_dir, "maps.png"),
                       image=img, title="guidance maps")
    print(f"wrote {len(written)} map files to {args.out_dir}")
    return 0


def cmd_fuse(args) -> int:
    import cv2
    import numpy as np

    from .dataio import load_checkpoint, model_from_checkpoint, save_raw_maps
    from .model import FusionLayer, forward_padded, fuse_guidance
    from .tensor import no_grad

    entries, _ = load_checkpoint(args.checkpoint)
    net = model_from_checkpoint(entries)
    n = net.n_eigenmaps
    if args.weights is None:
        fusion = FusionLayer.uniform(n)
    else:
        if len(args.weights) != n:
            print(f"error: got {len(args.weights)} weights for {n} maps",
                  file=sys.stderr)
            return 1
        fusion = FusionLayer.from_weights(args.weights)
    img = _load_single_image(args.image, args.resolution)
    with no_grad():
        maps = forward_padded(net, img[None])
        fused = fuse_guidance(fusion, maps).data[0, 0]
    u8 = np.rint(np.clip(fused, 0.0, 1.0) * 255.0).astype(np.uint8)
    if not cv2.imwrite(str(args.out), u8):
        print(f"error: could not write {args.out}", file=sys.stderr)
        return 1
    if args.raw_out:
        save_raw_maps(args.raw_out, fused[None].astype(np.float32))
    print(f"fused {n} maps -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all, run_end_to_end, run_fusion_end_to_end, \
        run_op_checks

    if args.bits == "all":
        results = run_all(seed=args.seed)
    else:
        results = run_op_checks(int(args.bits), seed=args.seed)
        results.append(run_fusion_end_to_end(seed=args.seed))
        results.append(run_end_to_end(seed=args.seed))
    ok = True
    for r in results:
        print(r.line())
        ok = ok and r.passed
    print(f"{sum(r.passed for r in results)}/{len(results)} gradient checks "
          f"passed")
    return 0 if ok else 1


def cmd_version(args) -> int:
    from . import __version__

    print(f"ssgnet {__version__}")
    return 0


def cli(argv=None) -> int:
    """Run one command and return its exit code (argparse exits included)."""
    try:
        _configure_threads()
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        if code is None:
            return 0
        return code if isinstance(code, int) else 1
    from .errors import SsgError

    try:
        return args.func(args)
    except SsgError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


main = cli


def entry() -> None:
    raise SystemExit(cli())


if __name__ == "__main__":
    entry()
