"""Command-line interface: dataset generation, training, evaluation,
verification, and glyph export.

Subcommands: ``generate charged|gravity``, ``train``, ``evaluate``,
``verify equivariance|gradients|invariance``, ``glyph``.  ``--config``
takes a JSON run config whose keys individual flags override.  ``verify``
exits nonzero when a tolerance fails, so CI can gate on it.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .nbody import (generate_charged_dataset, generate_gravity_dataset,
                    read_dataset, write_dataset)
from .o3 import IrrepsLayout, fibonacci_sphere
from .segnn import Graph, ModelConfig, build_model, complete_edges
from .steerable import SteerableTensor, sample_on_sphere
from .tensor import rng_from_seed
from .training import RunConfig, evaluate, extra_scalars_for, train
from . import harness

__all__ = ["main"]


def _add_model_flags(ap):
    ap.add_argument("--variant", choices=["segnn", "se_nonlinear", "se_linear"])
    ap.add_argument("--l-f", type=int, dest="l_f")
    ap.add_argument("--l-a", type=int, dest="l_a")
    ap.add_argument("--hidden-dim", type=int, dest="hidden_dim")
    ap.add_argument("--hidden-mode", choices=["copies", "balanced"],
                    dest="hidden_mode")
    ap.add_argument("--num-layers", type=int, dest="num_layers")
    ap.add_argument("--loss", choices=["mse", "mae"])
    ap.add_argument("--lr", type=float)
    ap.add_argument("--no-velocity-attr", action="store_true")
    ap.add_argument("--instance-norm", action="store_true")
    ap.add_argument("--head", choices=["node_vector", "graph_scalar"])


def _model_overrides(args):
    out = {}
    for key in ("variant", "l_f", "l_a", "hidden_dim", "hidden_mode",
                "num_layers", "loss", "lr", "head"):
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    if getattr(args, "no_velocity_attr", False):
        out["velocity_attr"] = False
    if getattr(args, "instance_norm", False):
        out["use_instance_norm"] = True
    return out


def _load_run_config(args) -> RunConfig:
    if args.config:
        run = RunConfig.from_json(Path(args.config).read_text())
    else:
        run = RunConfig()
    for key in ("dataset_dir", "out_dir", "epochs", "batch_size",
                "lr_schedule", "target", "max_train_samples", "val_every",
                "seed"):
        v = getattr(args, key, None)
        if v is not None:
            setattr(run, key, v)
    overrides = _model_overrides(args)
    if overrides:
        run.model = replace(run.model, **overrides)
    if getattr(args, "seed", None) is not None:
        run.model = replace(run.model, seed=args.seed)
    return run


def _cmd_generate(args):
    counts = (args.train, args.val, args.test)
    bodies = args.bodies or (5 if args.system == "charged" else 100)
    if args.system == "charged":
        ds = generate_charged_dataset(*counts, seed=args.seed, n=bodies,
                                      dt=args.dt, steps=args.steps,
                                      softening=args.softening)
    else:
        ds = generate_gravity_dataset(*counts, seed=args.seed, n=bodies,
                                      dt=args.dt, softening=args.softening)
    manifest = write_dataset(ds, args.out)
    print(json.dumps({"manifest": str(manifest), "samples": ds.n_samples,
                      "particles": ds.n_particles, "seed": ds.seed}))
    return 0


def _cmd_train(args):
    run = _load_run_config(args)
    if not run.dataset_dir:
        print("error: no dataset (use --dataset or a config file)",
              file=sys.stderr)
        return 2
    res = train(run)
    print(json.dumps({"best_val": res.best_val, "test_metric": res.test_metric,
                      "epochs_run": res.epochs_run, "diverged": res.diverged,
                      "params": res.params_path, "metrics": res.metrics_path},
                     sort_keys=True))
    return 1 if res.diverged else 0


def _cmd_evaluate(args):
    run = _load_run_config(args)
    ds = read_dataset(run.dataset_dir)
    model = build_model(run.model, extra_scalars_for(ds.kind))
    if args.params:
        model.store.load_npz(args.params)
    out = evaluate(model, ds, split=args.split, metric=args.metric,
                   target=run.target)
    print(json.dumps(out, sort_keys=True))
    return 0


def _random_check_graph(n_nodes, seed, charged=True):
    rng = rng_from_seed(seed)
    pos = rng.standard_normal((n_nodes, 3))
    vel = rng.standard_normal((n_nodes, 3))
    edges = complete_edges(n_nodes)
    e_sc = {}
    if charged:
        q = rng.integers(0, 2, size=n_nodes) * 2.0 - 1.0
        rel = pos[edges[:, 1]] - pos[edges[:, 0]]
        e_sc = {"charge_product": q[edges[:, 0]] * q[edges[:, 1]],
                "distance": np.linalg.norm(rel, axis=-1)}
    return Graph(pos, edges, edge_scalars=e_sc,
                 node_vectors={"velocity": vel})


def _cmd_verify(args):
    overrides = _model_overrides(args)
    cfg = ModelConfig(**overrides) if overrides else ModelConfig()
    if args.check == "invariance":
        cfg = replace(cfg, l_f=0, l_a=0, head="graph_scalar")
    if args.check == "gradients":
        cfg = replace(cfg, num_layers=min(cfg.num_layers, 2),
                      hidden_dim=min(cfg.hidden_dim, 8))
    cfg = replace(cfg, seed=args.seed)
    model = build_model(cfg, n_extra_scalars=3)
    graph = _random_check_graph(args.nodes, args.seed + 1)

    if args.check == "equivariance":
        report = harness.check_equivariance(model, graph, args.samples,
                                            args.tol, seed=args.seed)
        passed = report.passed
    elif args.check == "invariance":
        report = harness.check_invariance(model, graph, args.samples,
                                          args.tol, seed=args.seed)
        passed = report.passed
    else:
        report = harness.check_gradients(model, graph, eps=args.eps,
                                         seed=args.seed)
        passed = report.max_rel_error < args.tol
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(json.dumps({"check": args.check, "passed": passed,
                          "max_rel_error": report.max_rel_error,
                          "report": args.out}, sort_keys=True))
    else:
        print(text)
    return 0 if passed else 1


def _cmd_glyph(args):
    if args.coeffs_file:
        coeffs = np.asarray(json.loads(Path(args.coeffs_file).read_text()),
                            dtype=np.float64)
        lmax = int(round(np.sqrt(coeffs.size))) - 1
        if (lmax + 1) ** 2 != coeffs.size:
            print(f"error: {coeffs.size} coefficients do not fill degrees "
                  "0..L for any L", file=sys.stderr)
            return 2
    else:
        from .o3 import spherical_harmonics
        v = np.asarray([float(x) for x in args.vector.split(",")])
        lmax = args.lmax
        coeffs = spherical_harmonics(lmax, v)
    from .o3 import sh_layout
    vec = SteerableTensor(sh_layout(lmax), coeffs)
    dirs = fibonacci_sphere(args.directions)
    vals = sample_on_sphere(vec, dirs)
    out = Path(args.out)
    with open(out, "w") as f:
        f.write("nx,ny,nz,f\n")
        for d, v in zip(dirs, vals):
            f.write(f"{d[0]!r},{d[1]!r},{d[2]!r},{v!r}\n")
    print(json.dumps({"out": str(out), "directions": args.directions,
                      "lmax": lmax}))
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="steermp",
                                 description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate an N-body dataset")
    g.add_argument("system", choices=["charged", "gravity"])
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=3000)
    g.add_argument("--val", type=int, default=2000)
    g.add_argument("--test", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--bodies", type=int, default=None)
    g.add_argument("--dt", type=float, default=1e-3)
    g.add_argument("--steps", type=int, default=1000)
    g.add_argument("--softening", type=float, default=0.1)
    g.set_defaults(fn=_cmd_generate)

    t = sub.add_parser("train", help="train a model on a dataset")
    t.add_argument("--config", help="run config JSON; flags override")
    t.add_argument("--dataset", dest="dataset_dir")
    t.add_argument("--out", dest="out_dir")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int, dest="batch_size")
    t.add_argument("--lr-schedule", choices=["constant", "step"],
                   dest="lr_schedule")
    t.add_argument("--target", choices=["position", "force"])
    t.add_argument("--max-train-samples", type=int, dest="max_train_samples")
    t.add_argument("--val-every", type=int, dest="val_every")
    t.add_argument("--seed", type=int)
    _add_model_flags(t)
    t.set_defaults(fn=_cmd_train)

    e = sub.add_parser("evaluate", help="evaluate saved parameters")
    e.add_argument("--config", help="run config JSON; flags override")
    e.add_argument("--params", help="params.npz from training")
    e.add_argument("--dataset", dest="dataset_dir")
    e.add_argument("--split", default="test",
                   choices=["train", "val", "test"])
    e.add_argument("--metric", default="mse", choices=["mse", "mae"])
    e.add_argument("--target", choices=["position", "force"])
    e.add_argument("--seed", type=int)
    _add_model_flags(e)
    e.set_defaults(fn=_cmd_evaluate)

    v = sub.add_parser("verify", help="equivariance / gradient / invariance "
                                      "certification")
    v.add_argument("check", choices=["equivariance", "gradients", "invariance"])
    v.add_argument("--samples", type=int, default=100)
    v.add_argument("--tol", type=float, default=None)
    v.add_argument("--eps", type=float, default=1e-6)
    v.add_argument("--nodes", type=int, default=5)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="write the JSON report here")
    _add_model_flags(v)
    v.set_defaults(fn=_cmd_verify)

    gl = sub.add_parser("glyph", help="sample a steerable vector on a sphere "
                                      "grid and write CSV")
    gl.add_argument("--vector", default="1,1,1",
                    help="embed this 3-vector (x,y,z) in spherical harmonics")
    gl.add_argument("--lmax", type=int, default=3)
    gl.add_argument("--coeffs-file",
                    help="JSON list of coefficients 1x0e+1x1o+... instead")
    gl.add_argument("--directions", type=int, default=512)
    gl.add_argument("--out", required=True)
    gl.set_defaults(fn=_cmd_glyph)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "tol", None) is None and args.command == "verify":
        args.tol = {"equivariance": 1e-8, "gradients": 1e-4,
                    "invariance": 1e-12}[args.check]
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
