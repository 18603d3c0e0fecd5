"""Command-line interface.

Subcommands cover the full pipeline: mesh generation and inspection,
Laplacian eigenbasis computation, synthetic dataset generation, training,
evaluation, mode-count sweeps, built-in verification suites, and VTK export.

Thread control: BLAS thread pools are capped before numpy is imported,
from ``--threads`` if given, else the ``NORM_THREADS`` environment
variable, else 1.  This module therefore imports only the standard
library at module scope; numerical imports happen inside handlers.

Exit codes: 0 on success, 1 on any runtime failure (bad data, failed
verification, numerical errors), 2 on usage errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

_THREAD_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _configure_threads(argv: list[str]) -> int:
    """Cap BLAS threads before any numpy import.

    Precedence: ``--threads N`` on the command line, then the
    ``NORM_THREADS`` environment variable, then 1.
    """
    threads = None
    for i, tok in enumerate(argv):
        if tok == "--threads" and i + 1 < len(argv):
            try:
                threads = int(argv[i + 1])
            except ValueError:
                pass
        elif tok.startswith("--threads="):
            try:
                threads = int(tok.split("=", 1)[1])
            except ValueError:
                pass
    if threads is None:
        try:
            threads = int(os.environ.get("NORM_THREADS", "1"))
        except ValueError:
            threads = 1
    threads = max(1, threads)
    for var in _THREAD_VARS:
        os.environ[var] = str(threads)
    return threads


def _print_report(report: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(report, indent=2, sort_keys=True))
        return
    for key, value in report.items():
        if isinstance(value, (dict, list)):
            value = json.dumps(value, sort_keys=True)
        print(f"{key}: {value}")


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------

def _cmd_mesh_grid(args) -> dict:
    from .mesh import grid_mesh, save_mesh

    mesh = grid_mesh(args.n)
    out = args.out or f"grid{args.n}.json"
    save_mesh(mesh, out)
    return {"command": "mesh grid", "path": out, **mesh.describe()}


def _cmd_mesh_notch(args) -> dict:
    from .mesh import notch_mesh, save_mesh

    mesh = notch_mesh(args.n)
    out = args.out or f"notch{args.n}.json"
    save_mesh(mesh, out)
    return {"command": "mesh notch", "path": out, **mesh.describe()}


def _cmd_mesh_info(args) -> dict:
    from .mesh import load_mesh

    mesh = load_mesh(args.mesh)
    return {"command": "mesh info", "path": args.mesh, **mesh.describe()}


def _cmd_lbo_compute(args) -> dict:
    from .mesh import cotangent_stiffness, load_mesh, lumped_mass
    from .spectral import lbo_basis, save_basis

    mesh = load_mesh(args.mesh)
    t0 = time.perf_counter()
    basis = lbo_basis(cotangent_stiffness(mesh), lumped_mass(mesh),
                      args.modes, source_id=mesh.content_hash())
    elapsed = time.perf_counter() - t0
    save_basis(basis, args.out)
    return {
        "command": "lbo compute",
        "path": args.out,
        "n_x": basis.n_x,
        "d_m": basis.d_m,
        "eigenvalue_min": float(basis.eigenvalues[0]),
        "eigenvalue_max": float(basis.eigenvalues[-1]),
        "seconds": round(elapsed, 3),
    }


def _cmd_data_darcy(args) -> dict:
    from .datagen import make_darcy_dataset, save_dataset
    from .mesh import cotangent_stiffness, load_mesh, lumped_mass
    from .spectral import lbo_basis

    mesh = load_mesh(args.mesh)
    t0 = time.perf_counter()
    grf_basis = lbo_basis(
        cotangent_stiffness(mesh), lumped_mass(mesh),
        min(args.grf_modes, mesh.n_vertices),
        source_id=mesh.content_hash())
    data = make_darcy_dataset(mesh, grf_basis, args.n, seed=args.seed)
    elapsed = time.perf_counter() - t0
    save_dataset(data, args.out)
    return {
        "command": "data gen darcy",
        "path": args.out,
        "n_samples": data.n_samples,
        "n_x": data.inputs.shape[1],
        "split": {k: len(v) for k, v in data.split.items()},
        "seconds": round(elapsed, 3),
    }


def _cmd_data_heat(args) -> dict:
    from .datagen import make_heat_dataset, save_dataset
    from .mesh import load_mesh

    mesh = load_mesh(args.mesh)
    t0 = time.perf_counter()
    data = make_heat_dataset(mesh, args.n, t=args.t, seed=args.seed,
                             grf_modes=args.grf_modes)
    elapsed = time.perf_counter() - t0
    save_dataset(data, args.out)
    return {
        "command": "data gen heat",
        "path": args.out,
        "n_samples": data.n_samples,
        "n_x": data.inputs.shape[1],
        "t": args.t,
        "split": {k: len(v) for k, v in data.split.items()},
        "seconds": round(elapsed, 3),
    }


def _load_truncated_basis(path: str, modes: int):
    from .spectral import load_basis

    basis = load_basis(path)
    if modes and modes < basis.d_m:
        basis = basis.truncate(modes)
    return basis


def _cmd_train(args) -> dict:
    from .datagen import load_dataset
    from .errors import DimensionMismatch
    from .operator import ModelSpec, build_model, save_checkpoint
    from .training import TrainConfig, train

    data = load_dataset(args.data)
    basis_in = _load_truncated_basis(args.basis_in, args.modes)
    basis_out = None
    wiring = "same"
    if args.basis_out:
        basis_out = _load_truncated_basis(args.basis_out, args.modes)
        if basis_out.source_id != basis_in.source_id:
            wiring = "cross"
    if basis_in.n_x != data.inputs.shape[1]:
        raise DimensionMismatch(
            f"input basis has {basis_in.n_x} nodes but dataset samples "
            f"have {data.inputs.shape[1]}")
    spec = ModelSpec(
        wiring=wiring,
        d_a=data.inputs.shape[2],
        d_v=args.width,
        d_u=data.outputs.shape[2],
        n_layers=args.layers,
        basis_in=basis_in,
        basis_out=basis_out,
        activation=args.activation,
        seed=args.seed,
    )
    model = build_model(spec)
    config = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch,
        lr=args.lr,
        lr_halve_every=args.lr_halve_every,
        seed=args.seed,
        normalization=args.normalization,
        eval_every=args.eval_every,
    )
    def _progress(epoch, loss, test_rel, seconds):
        if not args.json:
            rel = "-" if test_rel is None else f"{test_rel:.6f}"
            print(f"epoch {epoch + 1}/{args.epochs}  "
                  f"train_loss {loss:.6f}  test_rel_l2 {rel}  "
                  f"({seconds:.2f}s)", file=sys.stderr)

    t0 = time.perf_counter()
    history = train(model, data, config, callback=_progress)
    elapsed = time.perf_counter() - t0
    save_checkpoint(model, args.out)
    hist_path = os.path.join(args.out, "history.json")
    with open(hist_path, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "train_loss": history["train_loss"],
                "test_rel_l2": history["test_rel_l2"],
            },
            fh, indent=2, sort_keys=True)
    return {
        "command": "train",
        "checkpoint": args.out,
        "epochs": args.epochs,
        "parameters": model.param_count(),
        "final_train_loss": history["train_loss"][-1],
        "final_test_rel_l2": history["test_rel_l2"][-1],
        "seconds": round(elapsed, 3),
    }


def _cmd_eval(args) -> dict:
    from .datagen import load_dataset
    from .operator import load_checkpoint
    from .training import evaluate

    model = load_checkpoint(args.ckpt)
    data = load_dataset(args.data)
    indices = data.split[args.split]
    metrics = evaluate(model, data, split=args.split)
    report = {
        "rel_l2": metrics.rel_l2,
        "mme": metrics.mme,
        "per_sample": {
            "rel_l2": [float(v) for v in metrics.per_sample_rel_l2],
            "max_err": [float(v) for v in metrics.per_sample_max_err],
        },
        "config": {
            "checkpoint": os.path.basename(os.path.normpath(args.ckpt)),
            "split": args.split,
            "n_samples": len(indices),
            "parameters": model.param_count(),
        },
    }
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    return {"command": "eval", "report": args.report or "",
            "rel_l2": metrics.rel_l2, "mme": metrics.mme,
            "split": args.split, "n_samples": len(indices)}


def _sweep_train_eval(data, basis_in, basis_out, wiring, args):
    from .operator import ModelSpec, build_model
    from .training import TrainConfig, evaluate, train

    spec = ModelSpec(
        wiring=wiring,
        d_a=data.inputs.shape[2],
        d_v=args.width,
        d_u=data.outputs.shape[2],
        n_layers=args.layers,
        basis_in=basis_in,
        basis_out=basis_out,
        activation=args.activation,
        seed=args.seed,
    )
    model = build_model(spec)
    config = TrainConfig(
        epochs=args.epochs, batch_size=args.batch, lr=args.lr,
        lr_halve_every=args.lr_halve_every, seed=args.seed,
        normalization=args.normalization, eval_every=args.eval_every,
    )
    t0 = time.perf_counter()
    train(model, data, config)
    elapsed = time.perf_counter() - t0
    metrics = evaluate(model, data, split="test")
    return metrics, elapsed


def _cmd_sweep(args) -> dict:
    from .datagen import load_dataset
    from .errors import DimensionMismatch
    from .mesh import cotangent_stiffness, load_mesh, lumped_mass
    from .spectral import lbo_basis, pod_basis

    data = load_dataset(args.data)
    mesh = load_mesh(args.mesh)
    if mesh.n_vertices != data.inputs.shape[1]:
        raise DimensionMismatch(
            f"mesh has {mesh.n_vertices} nodes but dataset samples have "
            f"{data.inputs.shape[1]}")
    values = [int(v) for v in args.grid.split(",") if v.strip()]
    if not values:
        raise ValueError("empty --grid")
    full = lbo_basis(cotangent_stiffness(mesh), lumped_mass(mesh),
                     max(values), source_id=mesh.content_hash())
    train_idx = data.split["train"]
    rows = []
    for value in values:
        basis = full.truncate(value) if value < full.d_m else full
        metrics, elapsed = _sweep_train_eval(data, basis, None, "same", args)
        rows.append({"value": value, "basis": "lbo",
                     "rel_l2": metrics.rel_l2, "mme": metrics.mme,
                     "seconds": round(elapsed, 3)})
        if not args.json:
            print(f"modes={value} basis=lbo rel_l2={metrics.rel_l2:.6f} "
                  f"mme={metrics.mme:.6f} ({elapsed:.1f}s)")
        if args.compare_pod:
            pod_in = pod_basis(data.inputs[train_idx], value, center=False)
            pod_out = pod_basis(data.outputs[train_idx], value, center=False)
            wiring = "same" if pod_in.source_id == pod_out.source_id \
                else "cross"
            metrics, elapsed = _sweep_train_eval(
                data, pod_in, pod_out, wiring, args)
            rows.append({"value": value, "basis": "pod",
                         "rel_l2": metrics.rel_l2, "mme": metrics.mme,
                         "seconds": round(elapsed, 3)})
            if not args.json:
                print(f"modes={value} basis=pod rel_l2={metrics.rel_l2:.6f} "
                      f"mme={metrics.mme:.6f} ({elapsed:.1f}s)")
    fields = ["value", "rel_l2", "mme", "seconds"]
    if args.compare_pod:
        fields = ["value", "basis", "rel_l2", "mme", "seconds"]
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
    return {"command": "sweep", "path": args.out, "rows": len(rows)}


def _cmd_verify(args) -> dict:
    from .verify import run_suite

    t0 = time.perf_counter()
    results = run_suite(args.suite)
    elapsed = time.perf_counter() - t0
    if not args.json:
        for res in results:
            print(res.line())
    n_fail = sum(1 for r in results if not r.passed)
    report = {
        "command": "verify",
        "suite": args.suite,
        "checks": [
            {"name": r.name, "passed": r.passed, "value": r.value,
             "tolerance": r.tolerance}
            for r in results
        ],
        "failed": n_fail,
        "seconds": round(elapsed, 3),
    }
    if n_fail:
        report["status"] = "failed"
    return report


def _cmd_gradcheck(args) -> dict:
    from .verify import gradcheck_suite

    results = gradcheck_suite(n_params=args.params, step=args.step,
                              tol=args.tol, seed=args.seed)
    res = results[0]
    if not args.json:
        print(res.line())
    report = {
        "command": "gradcheck",
        "max_rel_error": res.value,
        "tolerance": res.tolerance,
        "passed": res.passed,
    }
    if not res.passed:
        report["status"] = "failed"
    return report


def _cmd_export_vtk(args) -> dict:
    import numpy as np

    from .errors import DimensionMismatch
    from .mesh import load_mesh
    from .vtk import export_vtk

    mesh = load_mesh(args.mesh)
    if args.field:
        values = np.load(args.field)
        name = args.name or "field"
    else:
        from .datagen import load_dataset

        data = load_dataset(args.data)
        if not 0 <= args.sample < data.n_samples:
            raise IndexError(
                f"sample {args.sample} out of range for dataset with "
                f"{data.n_samples} samples")
        arr = data.inputs if args.which == "input" else data.outputs
        values = arr[args.sample]
        name = args.name or args.which
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] != mesh.n_vertices:
        raise DimensionMismatch(
            f"field has {values.shape[0]} values but mesh has "
            f"{mesh.n_vertices} vertices")
    export_vtk(mesh, values, args.out, field_name=name)
    return {"command": "export-vtk", "path": args.out,
            "n_points": mesh.n_vertices, "n_channels": values.shape[1]}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--threads", type=int, default=None,
                        help="BLAS thread cap (default: NORM_THREADS or 1)")
    parser.add_argument("--json", action="store_true",
                        help="print the report as JSON")


def _add_train_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--width", type=int, default=32,
                        help="channel width d_v")
    parser.add_argument("--layers", type=int, default=4,
                        help="number of L-layers")
    parser.add_argument("--epochs", type=int, default=100)
    parser.add_argument("--batch", type=int, default=20)
    parser.add_argument("--lr", type=float, default=1e-3)
    parser.add_argument("--lr-halve-every", type=int, default=100,
                        help="halve the learning rate every this many epochs")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--activation", default="gelu",
                        choices=["gelu", "relu", "identity"])
    parser.add_argument("--normalization", default="global_per_channel",
                        choices=["global_per_channel", "none"])
    parser.add_argument("--eval-every", type=int, default=1,
                        help="compute the test metric every this many epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="norm",
        description="Neural operators on Riemannian manifolds: meshes, "
                    "Laplacian eigenbases, spectral operator models, and "
                    "synthetic PDE benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_mesh = sub.add_parser("mesh", help="generate or inspect meshes")
    mesh_sub = p_mesh.add_subparsers(dest="mesh_command", required=True)

    p = mesh_sub.add_parser("grid", help="regular unit-square grid mesh")
    p.add_argument("--n", type=int, required=True,
                   help="cells per side (produces (n+1)^2 vertices)")
    p.add_argument("--out", default=None, help="output path (.json/.off/.obj)")
    _add_common(p)
    p.set_defaults(func=_cmd_mesh_grid)

    p = mesh_sub.add_parser("notch", help="unit square with a slit removed")
    p.add_argument("--n", type=int, required=True, help="cells per side")
    p.add_argument("--out", default=None, help="output path (.json/.off/.obj)")
    _add_common(p)
    p.set_defaults(func=_cmd_mesh_notch)

    p = mesh_sub.add_parser("info", help="print mesh statistics")
    p.add_argument("mesh", help="mesh file (.json/.off/.obj)")
    _add_common(p)
    p.set_defaults(func=_cmd_mesh_info)

    p_lbo = sub.add_parser("lbo", help="Laplacian eigenbasis computation")
    lbo_sub = p_lbo.add_subparsers(dest="lbo_command", required=True)
    p = lbo_sub.add_parser("compute", help="solve for the leading eigenpairs")
    p.add_argument("--mesh", required=True)
    p.add_argument("--modes", type=int, required=True,
                   help="number of eigenpairs")
    p.add_argument("--out", required=True, help="output basis file (.nsb)")
    _add_common(p)
    p.set_defaults(func=_cmd_lbo_compute)

    p_data = sub.add_parser("data", help="synthetic dataset generation")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p_gen = data_sub.add_parser("gen", help="generate a dataset")
    gen_sub = p_gen.add_subparsers(dest="gen_command", required=True)

    p = gen_sub.add_parser("darcy", help="Darcy flow with thresholded "
                           "random coefficients")
    p.add_argument("--mesh", required=True)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grf-modes", type=int, default=256,
                   help="random-field eigenmodes")
    p.add_argument("--out", required=True, help="output dataset file (.nds)")
    _add_common(p)
    p.set_defaults(func=_cmd_data_darcy)

    p = gen_sub.add_parser("heat", help="heat semigroup at a fixed time")
    p.add_argument("--mesh", required=True)
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--t", type=float, default=0.05, help="diffusion time")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grf-modes", type=int, default=256,
                   help="random-field eigenmodes")
    p.add_argument("--out", required=True, help="output dataset file (.nds)")
    _add_common(p)
    p.set_defaults(func=_cmd_data_heat)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset file (.nds)")
    p.add_argument("--basis-in", required=True, help="input basis (.nsb)")
    p.add_argument("--basis-out", default=None,
                   help="output basis (.nsb) for cross-domain problems")
    p.add_argument("--modes", type=int, default=0,
                   help="truncate bases to this many modes (0 keeps all)")
    p.add_argument("--out", required=True, help="checkpoint directory")
    _add_train_options(p)
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset file (.nds)")
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--report", default=None, help="write metrics JSON here")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="train across a grid of mode counts")
    p.add_argument("--kind", default="modes", choices=["modes"])
    p.add_argument("--grid", required=True,
                   help="comma-separated mode counts, e.g. 16,32,64,128")
    p.add_argument("--data", required=True, help="dataset file (.nds)")
    p.add_argument("--mesh", required=True, help="mesh the dataset lives on")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--compare-pod", action="store_true",
                   help="also train with data-driven POD bases")
    _add_train_options(p)
    _add_common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("verify", help="run built-in verification suites")
    p.add_argument("--suite", default="all",
                   choices=["spectrum", "bound", "gradcheck", "tensor-oracle",
                            "all"])
    _add_common(p)
    p.set_defaults(func=_cmd_verify)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--params", type=int, default=30,
                   help="number of sampled parameters")
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("export-vtk", help="write a nodal field as legacy VTK")
    p.add_argument("--mesh", required=True)
    p.add_argument("--out", required=True, help="output .vtk path")
    p.add_argument("--field", default=None,
                   help=".npy array of nodal values")
    p.add_argument("--data", default=None, help="dataset file (.nds)")
    p.add_argument("--sample", type=int, default=0,
                   help="sample index within --data")
    p.add_argument("--which", default="output", choices=["input", "output"],
                   help="which side of the dataset sample to export")
    p.add_argument("--name", default=None, help="field name in the VTK file")
    _add_common(p)
    p.set_defaults(func=_cmd_export_vtk)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    _configure_threads(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.func is _cmd_export_vtk and not args.field and not args.data:
        parser.error("export-vtk needs --field or --data")
    from .errors import NormError

    try:
        report = args.func(args)
    except (NormError, OSError, ValueError, IndexError, KeyError) as exc:
        message = f"error: {exc}"
        if args.json:
            print(json.dumps({"status": "failed", "error": str(exc)}))
        else:
            print(message, file=sys.stderr)
        return 1
    status = report.pop("status", "ok")
    _print_report(report, args.json)
    return 0 if status == "ok" else 1


if __name__ == "__main__":
    sys.exit(main())
