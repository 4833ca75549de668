"""``darc`` command line.

Exit codes: 0 success, 2 bad arguments or inputs, 3 numerical failure.
Every subcommand writes ``manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import glob
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, kernels
from . import io as dio
from .atlas import LOG_FIELDS, OptimConfig, StageError, build_atlas
from .fields import same_grid
from .loss import LossConfig, NumericalError
from .segmentation import dice, propagate_labels
from .shapegen import fit_pca, marching_cubes, mode_shape, sample_pca, synthesis_metrics
from .synthetic import annotate_by_thresholds, ellipsoid_phantom, gen_synthetic_population
from .transform import exp_velocity, folding_fraction, warp_mesh

log = logging.getLogger("darc")

EXIT_OK, EXIT_ARGS, EXIT_NUMERIC = 0, 2, 3


class UsageError(ValueError):
    pass


def _triple(text, cast=int):
    parts = [p for p in text.replace("x", ",").split(",") if p]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated values, got {text!r}")
    return tuple(cast(p) for p in parts)


def _floats(text):
    return tuple(float(p) for p in text.split(",") if p)


def _expand(pattern):
    paths = sorted(glob.glob(pattern))
    if not paths and Path(pattern).is_dir():
        paths = sorted(str(p) for p in Path(pattern).glob("*.vol"))
    return paths


def _dir_files(directory, suffixes):
    d = Path(directory)
    if not d.is_dir():
        raise UsageError(f"not a directory: {directory}")
    return sorted(str(p) for p in d.iterdir() if any(p.name.endswith(s) for s in suffixes))


def _manifest(args, out_dir, config=None, inputs=(), outputs=(), extra=None):
    manifest = {
        "tool": "darc",
        "version": __version__,
        "command": args.command_path,
        "argv": args.argv,
        "seed": getattr(args, "seed", None),
        "config": config or {},
        "inputs": [{"path": str(p), "sha256": dio.sha256_file(p)} for p in inputs],
        "outputs": [str(p) for p in outputs],
        "kernel_backend": kernels.BACKEND,
    }
    if extra:
        manifest.update(extra)
    return dio.write_manifest(Path(out_dir) / "manifest.json", manifest)


# --- subcommands --------------------------------------------------------------


def cmd_gen(args):
    out = Path(args.out)
    try:
        pop = gen_synthetic_population(args.seed, args.n, args.dims, args.sigma, args.amp)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    phantom, phantom_labels = ellipsoid_phantom(args.dims)
    outputs = [
        dio.write_volume(out / "phantom.vol", phantom),
        dio.write_volume(out / "phantom_labels.vol", phantom_labels),
    ]
    for i in range(args.n):
        outputs.append(dio.write_volume(out / "images" / f"img_{i:03d}.vol", pop.images[i]))
        outputs.append(dio.write_volume(out / "labels" / f"lab_{i:03d}.vol", pop.labels[i]))
        outputs.append(dio.write_volume(out / "velocities" / f"v_{i:03d}.vol", pop.velocities[i], "vector3"))
        outputs.append(dio.write_volume(out / "displacements" / f"u_{i:03d}.vol", pop.displacements[i], "vector3"))
    _manifest(args, out, {"n": args.n, "dims": list(args.dims), "deform_sigma": args.sigma,
                          "deform_amp": args.amp}, outputs=outputs)
    print(f"wrote {args.n} subjects to {out}")


def _load_images(paths):
    images, spacing = [], None
    for p in paths:
        V, grid, kind = dio.load_volume(p)
        if kind != "scalar":
            raise UsageError(f"{p}: expected a scalar volume, got {kind}")
        images.append(dio.normalize_intensity(V))
        spacing = spacing or grid.spacing
    try:
        same_grid(*images)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return images, spacing


def cmd_build(args):
    paths = _expand(args.inputs)
    if len(paths) < 2:
        raise UsageError(f"atlas construction needs n >= 2 input volumes; {args.inputs!r} matched {len(paths)}")
    try:
        cfg = LossConfig(metric=args.metric, lam=args.lam, regularize_on=args.regularize_on)
        opt = OptimConfig(outer_iters=args.k1, inner_iters=args.k2, atlas_epochs=args.k3, learn_rate=args.lr,
                          batch_size=args.batch, exp_steps=args.exp_steps, seed=args.seed,
                          warm_start=args.warm_start, n_jobs=args.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    images, spacing = _load_images(paths)
    out = Path(args.out)
    renders = out / "renders"
    mid = images[0].shape[2] // 2

    def on_iteration(k, atlas, record):
        dio.render_slices(atlas, 2, mid, renders / f"atlas_iter_{k:02d}.pgm")

    result = build_atlas(images, cfg, opt, callback=on_iteration)
    outputs = [dio.write_volume(out / "atlas.vol", result.atlas, spacing=spacing)]
    for i, (v, u) in enumerate(zip(result.velocities, result.forward_deformations)):
        outputs.append(dio.write_volume(out / "velocities" / f"v_{i:03d}.vol", v, "vector3", spacing))
        outputs.append(dio.write_volume(out / "deformations" / f"phi_{i:03d}.vol", u, "vector3", spacing))
    outputs.append(dio.write_csv(out / "log.csv", result.log, LOG_FIELDS))
    outputs.append(dio.write_csv(out / "timing.csv", result.timings, list(result.timings[0])))
    outputs += sorted(renders.glob("*.pgm"))
    _manifest(args, out, {"loss": cfg.to_dict(), "optim": opt.to_dict()}, inputs=paths, outputs=outputs,
              extra={"intensity_normalization": "min-max to [0, 1] per volume at load"})
    print(f"atlas written to {out / 'atlas.vol'}")


def cmd_annotate(args):
    A, grid, _ = dio.load_volume(args.atlas)
    labels = annotate_by_thresholds(dio.normalize_intensity(A), args.thresholds)
    path = dio.save_volume(args.out, labels, "labels-u16", grid.spacing)
    _manifest(args, Path(args.out).parent, {"thresholds": list(args.thresholds)}, inputs=[args.atlas], outputs=[path])


def cmd_segment(args):
    atlas_labels, grid, kind = dio.load_volume(args.atlas_labels)
    if kind != "labels-u16":
        raise UsageError(f"{args.atlas_labels}: expected a label volume, got {kind}")
    vpaths = _dir_files(args.velocities, (".vol",))
    if not vpaths:
        raise UsageError(f"no velocity fields in {args.velocities}")
    truth = _expand(args.ground_truth) if args.ground_truth else []
    if truth and len(truth) != len(vpaths):
        raise UsageError(f"{len(truth)} ground-truth volumes for {len(vpaths)} velocity fields")
    label_set = sorted(int(x) for x in np.unique(atlas_labels) if x != 0)
    out = Path(args.out)
    outputs, rows = [], []
    for i, vp in enumerate(vpaths):
        v, _, _ = dio.read_volume(vp)
        seg = propagate_labels(atlas_labels, v.astype(np.float64), args.exp_steps)
        outputs.append(dio.write_volume(out / f"seg_{i:03d}.vol", seg, "labels-u16", grid.spacing))
        if truth:
            gt, _, _ = dio.load_volume(truth[i])
            per, mean = dice(seg, gt, label_set)
            row = {"subject": i, "velocity": Path(vp).name, "mean": mean}
            row.update({f"label_{k}": d for k, d in per.items()})
            rows.append(row)
    if rows:
        fields = ["subject", "velocity", "mean"] + [f"label_{k}" for k in label_set]
        outputs.append(dio.write_csv(out / "dice.csv", rows, fields))
        print(f"mean Dice {np.nanmean([r['mean'] for r in rows]):.4f} over {len(rows)} subjects")
    _manifest(args, out, {"exp_steps": args.exp_steps, "labels": label_set},
              inputs=[args.atlas_labels] + vpaths + truth, outputs=outputs)


def cmd_mesh(args):
    L, _, kind = dio.load_volume(args.labels)
    if kind == "labels-u16":
        mask = (L >= args.label) if args.inclusive else (L == args.label)
        V = mask.astype(np.float64)
    else:
        V = np.asarray(L, dtype=np.float64)
    mesh = marching_cubes(V, args.iso)
    path = dio.write_ply(args.out, mesh, binary=not args.ascii)
    _manifest(args, Path(args.out).parent, {"label": args.label, "iso": args.iso, "inclusive": args.inclusive},
              inputs=[args.labels], outputs=[path])
    print(f"{mesh.n_vertices} vertices, {mesh.n_faces} faces -> {path}")


def cmd_warp_mesh(args):
    mesh = dio.read_ply(args.mesh)
    fields = _dir_files(args.fields, (".vol",)) if Path(args.fields).is_dir() else [args.fields]
    out = Path(args.out)
    outputs = []
    for i, fp in enumerate(fields):
        u, _, kind = dio.read_volume(fp)
        if kind != "vector3":
            raise UsageError(f"{fp}: expected a vector field")
        if args.velocity:
            u = exp_velocity(u.astype(np.float64), args.exp_steps)
        outputs.append(dio.write_ply(out / f"mesh_{i:03d}.ply", warp_mesh(mesh, u), binary=not args.ascii))
    _manifest(args, out, {"velocity": args.velocity}, inputs=[args.mesh] + fields, outputs=outputs)


def cmd_synth_fit(args):
    vpaths = _dir_files(args.velocities, (".vol",))
    vs = [dio.read_volume(p)[0].astype(np.float64) for p in vpaths]
    try:
        model = fit_pca(vs, args.p)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    path = dio.save_pca(args.out, model)
    _manifest(args, Path(args.out).parent, {"p": args.p, "eigenvalues": model.eigenvalues.tolist()},
              inputs=vpaths, outputs=[path])


def cmd_synth_sample(args):
    model = dio.load_pca(args.model)
    mesh = dio.read_ply(args.atlas_mesh)
    out = Path(args.out)
    outputs, rows = [], []
    for k in range(args.count):
        v, u = sample_pca(model, [args.seed, k], args.exp_steps)
        fold = folding_fraction(u)
        outputs.append(dio.write_ply(out / f"sample_{k:03d}.ply", warp_mesh(mesh, u), binary=not args.ascii))
        if args.save_fields:
            outputs.append(dio.write_volume(out / "velocities" / f"v_{k:03d}.vol", v, "vector3"))
        rows.append({"sample": k, "folding_pct": fold})
    outputs.append(dio.write_csv(out / "samples.csv", rows, ["sample", "folding_pct"]))
    _manifest(args, out, {"count": args.count, "exp_steps": args.exp_steps},
              inputs=[args.model, args.atlas_mesh], outputs=outputs)


def cmd_synth_mode(args):
    model = dio.load_pca(args.model)
    try:
        v = mode_shape(model, args.j, args.t)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    inputs = [args.model]
    if args.atlas_mesh:
        inputs.append(args.atlas_mesh)
        mesh = warp_mesh(dio.read_ply(args.atlas_mesh), exp_velocity(v, args.exp_steps))
        path = dio.write_ply(args.out, mesh, binary=not args.ascii)
    else:
        path = dio.write_volume(args.out, v, "vector3")
    _manifest(args, Path(args.out).parent, {"j": args.j, "t": args.t}, inputs=inputs, outputs=[path])


def cmd_eval(args):
    gen_paths = _dir_files(args.generated, (".ply",))
    real_paths = _dir_files(args.real, (".ply",))
    if not gen_paths or not real_paths:
        raise UsageError("both --generated and --real must contain .ply meshes")
    generated = [dio.read_ply(p) for p in gen_paths]
    real = [dio.read_ply(p) for p in real_paths]
    report = synthesis_metrics(generated, real, correspondence=args.correspondence)
    rows = [{"metric": k, "value": v} for k, v in report.items()]
    path = dio.write_csv(args.out, rows, ["metric", "value"])
    _manifest(args, Path(args.out).parent, {"correspondence": args.correspondence},
              inputs=gen_paths + real_paths, outputs=[path])
    for k, v in report.items():
        print(f"{k:12s} {v:.6g}")


# --- parser -------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="darc", description="Groupwise diffeomorphic atlas construction.")
    p.add_argument("--version", action="version", version=f"darc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic phantom population")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--dims", type=_triple, default=(32, 32, 32))
    g.add_argument("--sigma", type=float, default=4.0, help="deformation smoothness (voxels)")
    g.add_argument("--amp", type=float, default=3.0, help="max velocity norm (voxels)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    b = sub.add_parser("build", help="construct an atlas")
    b.add_argument("--inputs", required=True, help="glob of input volumes (.vol/.nii)")
    b.add_argument("--metric", choices=["mse", "l1", "ncc", "ssim"], default="mse")
    b.add_argument("--lambda", dest="lam", type=float, default=None)
    b.add_argument("--k1", type=int, default=10)
    b.add_argument("--k2", type=int, default=300)
    b.add_argument("--k3", type=int, default=20)
    b.add_argument("--lr", type=float, default=1e-2)
    b.add_argument("--batch", type=int, default=4)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--exp-steps", type=int, default=7)
    b.add_argument("--regularize-on", choices=["deformation", "velocity"], default="deformation")
    b.add_argument("--warm-start", action="store_true")
    b.add_argument("--jobs", type=int, default=None)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build)

    a = sub.add_parser("annotate", help="label an atlas by intensity thresholds")
    a.add_argument("--atlas", required=True)
    a.add_argument("--thresholds", type=_floats, default=(1 / 6, 0.5, 5 / 6))
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_annotate)

    s = sub.add_parser("segment", help="propagate atlas labels to every subject")
    s.add_argument("--atlas-labels", required=True)
    s.add_argument("--velocities", required=True)
    s.add_argument("--ground-truth", default=None, help="glob of subject label volumes")
    s.add_argument("--exp-steps", type=int, default=7)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_segment)

    m = sub.add_parser("mesh", help="extract an iso-surface mesh from a label volume")
    m.add_argument("--labels", required=True)
    m.add_argument("--label", type=int, default=1)
    m.add_argument("--inclusive", action="store_true", help="use label >= L (nested structures)")
    m.add_argument("--iso", type=float, default=0.5)
    m.add_argument("--ascii", action="store_true")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mesh)

    w = sub.add_parser("warp-mesh", help="warp a mesh by displacement (or velocity) fields")
    w.add_argument("--mesh", required=True)
    w.add_argument("--fields", required=True, help="a .vol field or a directory of them")
    w.add_argument("--velocity", action="store_true", help="fields are velocities; exponentiate first")
    w.add_argument("--exp-steps", type=int, default=7)
    w.add_argument("--ascii", action="store_true")
    w.add_argument("--out", required=True)
    w.set_defaults(func=cmd_warp_mesh)

    syn = sub.add_parser("synth", help="PCA shape synthesis")
    ssub = syn.add_subparsers(dest="synth_command", required=True)
    f = ssub.add_parser("fit")
    f.add_argument("--velocities", required=True)
    f.add_argument("--p", type=int, required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_synth_fit)
    sm = ssub.add_parser("sample")
    sm.add_argument("--model", required=True)
    sm.add_argument("--count", type=int, default=10)
    sm.add_argument("--seed", type=int, default=0)
    sm.add_argument("--atlas-mesh", required=True)
    sm.add_argument("--exp-steps", type=int, default=7)
    sm.add_argument("--save-fields", action="store_true")
    sm.add_argument("--ascii", action="store_true")
    sm.add_argument("--out", required=True)
    sm.set_defaults(func=cmd_synth_sample)
    mo = ssub.add_parser("mode")
    mo.add_argument("--model", required=True)
    mo.add_argument("--j", type=int, required=True)
    mo.add_argument("--t", type=float, required=True)
    mo.add_argument("--atlas-mesh", default=None)
    mo.add_argument("--exp-steps", type=int, default=7)
    mo.add_argument("--ascii", action="store_true")
    mo.add_argument("--out", required=True)
    mo.set_defaults(func=cmd_synth_mode)

    e = sub.add_parser("eval", help="shape-synthesis metrics between two mesh sets")
    e.add_argument("--generated", required=True)
    e.add_argument("--real", required=True)
    e.add_argument("--correspondence", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    args.argv = argv
    args.command_path = " ".join(x for x in (args.command, getattr(args, "synth_command", None)) if x)
    stage = args.command_path
    try:
        args.func(args)
    except StageError as exc:
        print(f"darc {stage}: {exc}", file=sys.stderr)
        return EXIT_ARGS if exc.stage == "input" else EXIT_NUMERIC
    except NumericalError as exc:
        print(f"darc {stage}: [numerical] {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, dio.FormatError, FileNotFoundError, ValueError) as exc:
        print(f"darc {stage}: [input] {exc}", file=sys.stderr)
        return EXIT_ARGS
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
