"""Benchmark drivers for the N-body studies: the charged-system variant
ordering, the data-efficiency sweep, and the gravitational 100-body
comparison.

Every driver writes a JSON results file that records the full protocol
(splits, epochs, seeds, per-variant configs and parameter counts) next to
the per-seed test MSEs, so downstream checks can verify both the numbers
and the protocol they came from.  Runs are independent and can be spread
over worker processes.
"""

from __future__ import annotations

import argparse
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .nbody import generate_charged_dataset, generate_gravity_dataset, \
    read_dataset, write_dataset
from .segnn import ModelConfig, count_parameters
from .training import RunConfig, predict_zero_baseline, train, extra_scalars_for

__all__ = [
    "variant_config", "matched_config", "charged_ordering",
    "data_efficiency", "gravity_comparison", "ensure_dataset",
]

# criterion-scale protocol defaults; hidden_dim is the width of the ordinary
# linear layer whose weight budget the reference model matches
CHARGED_HIDDEN = 12
GRAVITY_HIDDEN = 8
CHARGED_EPOCHS = 1000
EFFICIENCY_EPOCHS = 300
GRAVITY_EPOCHS = 100


def variant_config(name: str, l: int, hidden_dim: int, kind: str,
                   seed: int = 0) -> ModelConfig:
    """Model configs for the named experiment arms.

    ``segnn_gp`` uses geometric+velocity node attributes, ``segnn_g`` only
    geometric ones; the point-convolution ablations keep geometric
    attributes for their embedding/readout conditioning.
    """
    base = dict(l_f=l, l_a=l, hidden_mode="copies", hidden_dim=hidden_dim,
                num_layers=4, attr_aggregation="mean", head="node_vector",
                seed=seed, lr=1e-4, weight_decay=1e-8, loss="mse")
    if kind == "gravity":
        base.update(neighbor_rule="knn", neighbor_k=20)
    else:
        base.update(neighbor_rule="complete")
    if name == "segnn_gp":
        return ModelConfig(variant="segnn", velocity_attr=True, **base)
    if name == "segnn_g":
        return ModelConfig(variant="segnn", velocity_attr=False, **base)
    if name == "se_nonlinear":
        return ModelConfig(variant="se_nonlinear", velocity_attr=False, **base)
    if name == "se_linear":
        return ModelConfig(variant="se_linear", velocity_attr=False, **base)
    raise ValueError(f"unknown arm {name!r}")


def matched_config(name: str, l: int, kind: str, ref_params: int,
                   seed: int = 0, lo: int = 4, hi: int = 64) -> ModelConfig:
    """Pick the hidden width whose total parameter count is closest to the
    reference budget (the paper matches all arms to one budget)."""
    n_extra = extra_scalars_for(kind)
    best = None
    for hd in range(lo, hi + 1):
        cfg = variant_config(name, l, hd, kind, seed)
        try:
            p = count_parameters(cfg, n_extra)
        except ValueError:
            continue
        gap = abs(p - ref_params)
        if best is None or gap < best[0]:
            best = (gap, hd, p)
    _, hd, p = best
    return variant_config(name, l, hd, kind, seed)


def ensure_dataset(kind: str, directory, counts, seed, **kw):
    directory = Path(directory)
    if (directory / "manifest.json").exists():
        ds = read_dataset(directory)
        if ds.counts == tuple(counts) and ds.seed == seed:
            return ds
        raise ValueError(f"{directory} holds a different dataset "
                         f"(counts {ds.counts}, seed {ds.seed})")
    gen = generate_charged_dataset if kind == "charged" else generate_gravity_dataset
    ds = gen(*counts, seed=seed, **kw)
    write_dataset(ds, directory)
    return ds


def _run_one(args):
    run_json, data_dir = args
    # keep worker BLAS single-threaded; runs are parallelised per process
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    run = RunConfig.from_json(run_json)
    run.dataset_dir = data_dir
    t0 = time.time()
    res = train(run)
    return {"run": json.loads(run_json), "best_val": res.best_val,
            "test_mse": res.test_metric, "epochs_run": res.epochs_run,
            "diverged": res.diverged, "seconds": round(time.time() - t0, 1)}


def _launch(runs, data_dir, workers):
    args = [(r.to_json(), str(data_dir)) for r in runs]
    if workers <= 1:
        return [_run_one(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_one, args))


def _collect(results, key_of):
    table = {}
    for r in results:
        k = key_of(r)
        table.setdefault(k, []).append(r)
    return table


def charged_ordering(data_dir, out_path, seeds=(0, 1, 2),
                     epochs=CHARGED_EPOCHS, hidden_dim=CHARGED_HIDDEN,
                     workers=2, arms=None, val_every=5):
    """Train the four variants at l=1 plus their l=0 counterparts on the
    charged 3000/2000/2000 splits, all at matched parameter budgets."""
    data_dir = Path(data_dir)
    ensure_dataset("charged", data_dir, (3000, 2000, 2000), seed=2024)
    arm_names = arms or ["segnn_gp", "segnn_g", "se_nonlinear", "se_linear"]
    ref = count_parameters(variant_config("segnn_gp", 1, hidden_dim, "charged"),
                           extra_scalars_for("charged"))
    runs, meta = [], {}
    for name in arm_names:
        for l in (1, 0):
            cfg = matched_config(name, l, "charged", ref)
            meta[f"{name}_l{l}"] = {
                "hidden_dim": cfg.hidden_dim,
                "params": count_parameters(cfg, extra_scalars_for("charged")),
            }
            for s in seeds:
                out = Path(out_path).parent / "runs" / f"{name}_l{l}_s{s}"
                runs.append(RunConfig(model=replace(cfg, seed=s),
                                      dataset_dir=str(data_dir),
                                      out_dir=str(out), epochs=epochs,
                                      batch_size=100, val_every=val_every,
                                      seed=s))
    results = _launch(runs, data_dir, workers)
    table = _collect(results, lambda r: f"{r['run']['model']['variant']}"
                     f"{'_gp' if r['run']['model']['velocity_attr'] and r['run']['model']['variant']=='segnn' else ''}"
                     f"_l{r['run']['model']['l_f']}")
    summary = {}
    for k, rs in table.items():
        mses = [r["test_mse"] for r in rs]
        summary[k] = {"test_mse_per_seed": mses,
                      "mean_test_mse": float(np.mean(mses)),
                      "seconds": [r["seconds"] for r in rs]}
    out = {
        "experiment": "charged_ordering",
        "protocol": {"splits": [3000, 2000, 2000], "epochs": epochs,
                     "batch_size": 100, "num_layers": 4,
                     "seeds": list(seeds), "reference_params": ref,
                     "dataset_seed": 2024, "arms": meta},
        "results": summary,
    }
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    return out


def data_efficiency(data_dir, out_path, sizes=(1000, 3000, 10000),
                    seeds=(0, 1, 2), epochs=EFFICIENCY_EPOCHS,
                    hidden_dim=CHARGED_HIDDEN, workers=2, val_every=5):
    """SEGNN_G+P vs its l=0 counterpart across training-set sizes (one
    10000/2000/2000 dataset, truncated train split per size)."""
    data_dir = Path(data_dir)
    ensure_dataset("charged", data_dir, (10000, 2000, 2000), seed=2025)
    ref = count_parameters(variant_config("segnn_gp", 1, hidden_dim, "charged"),
                           extra_scalars_for("charged"))
    runs = []
    for size in sizes:
        for l in (1, 0):
            cfg = matched_config("segnn_gp", l, "charged", ref)
            for s in seeds:
                out = Path(out_path).parent / "runs" / f"eff_l{l}_n{size}_s{s}"
                runs.append(RunConfig(model=replace(cfg, seed=s),
                                      dataset_dir=str(data_dir),
                                      out_dir=str(out), epochs=epochs,
                                      batch_size=100, val_every=val_every,
                                      max_train_samples=size, seed=s))
    results = _launch(runs, data_dir, workers)
    table = _collect(results, lambda r: (r["run"]["max_train_samples"],
                                         r["run"]["model"]["l_f"]))
    summary = {}
    for (size, l), rs in table.items():
        mses = [r["test_mse"] for r in rs]
        summary[f"n{size}_l{l}"] = {"test_mse_per_seed": mses,
                                    "mean_test_mse": float(np.mean(mses))}
    out = {
        "experiment": "data_efficiency",
        "protocol": {"sizes": list(sizes), "epochs": epochs,
                     "batch_size": 100, "seeds": list(seeds),
                     "dataset_seed": 2025},
        "results": summary,
    }
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    return out


def gravity_comparison(data_dir, out_path, seeds=(0, 1, 2),
                       epochs=GRAVITY_EPOCHS, hidden_dim=GRAVITY_HIDDEN,
                       workers=2, val_every=10, batch_size=25):
    """SEGNN l=1 vs l=0 vs the predict-zero baseline on the gravitational
    system (20 neighbours, 1000 training trajectories), both for position
    and force targets."""
    data_dir = Path(data_dir)
    ds = ensure_dataset("gravity", data_dir, (1000, 200, 500), seed=2026)
    ref = count_parameters(variant_config("segnn_gp", 1, hidden_dim, "gravity"),
                           extra_scalars_for("gravity"))
    runs = []
    for target in ("position", "force"):
        for l in (1, 0):
            cfg = matched_config("segnn_gp", l, "gravity", ref)
            for s in seeds:
                out = Path(out_path).parent / "runs" / f"grav_{target}_l{l}_s{s}"
                runs.append(RunConfig(model=replace(cfg, seed=s),
                                      dataset_dir=str(data_dir),
                                      out_dir=str(out), epochs=epochs,
                                      batch_size=batch_size, target=target,
                                      val_every=val_every, seed=s))
    results = _launch(runs, data_dir, workers)
    table = _collect(results, lambda r: (r["run"]["target"],
                                         r["run"]["model"]["l_f"]))
    summary = {}
    for (target, l), rs in table.items():
        mses = [r["test_mse"] for r in rs]
        summary[f"{target}_l{l}"] = {"test_mse_per_seed": mses,
                                     "mean_test_mse": float(np.mean(mses))}
    summary["position_zero_baseline"] = predict_zero_baseline(ds, "test",
                                                              "position")
    summary["force_zero_baseline"] = predict_zero_baseline(ds, "test", "force")
    out = {
        "experiment": "gravity_comparison",
        "protocol": {"splits": [1000, 200, 500], "epochs": epochs,
                     "batch_size": batch_size, "neighbors": 20,
                     "num_layers": 4, "seeds": list(seeds),
                     "dataset_seed": 2026},
        "results": summary,
    }
    Path(out_path).parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w") as f:
        json.dump(out, f, indent=2, sort_keys=True)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description="N-body benchmark drivers")
    ap.add_argument("experiment",
                    choices=["charged", "efficiency", "gravity", "all"])
    ap.add_argument("--data-root", default="data")
    ap.add_argument("--out-root", default="results")
    ap.add_argument("--workers", type=int, default=2)
    ap.add_argument("--epochs", type=int, default=0,
                    help="override the per-experiment default")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = ap.parse_args(argv)
    root, out = Path(args.data_root), Path(args.out_root)
    if args.experiment in ("charged", "all"):
        charged_ordering(root / "charged3k", out / "charged_ordering.json",
                         seeds=args.seeds, workers=args.workers,
                         epochs=args.epochs or CHARGED_EPOCHS)
    if args.experiment in ("efficiency", "all"):
        data_efficiency(root / "charged10k", out / "data_efficiency.json",
                        seeds=args.seeds, workers=args.workers,
                        epochs=args.epochs or EFFICIENCY_EPOCHS)
    if args.experiment in ("gravity", "all"):
        gravity_comparison(root / "gravity1k", out / "gravity_comparison.json",
                           seeds=args.seeds, workers=args.workers,
                           epochs=args.epochs or GRAVITY_EPOCHS)


if __name__ == "__main__":
    main()
