"""Training and evaluation loops for the N-body tasks.

A run is described by a :class:`RunConfig` (model config + dataset path +
optimisation schedule).  Metrics are written as JSON lines, one per epoch,
with the wall-clock seconds field excluded from reproducibility comparisons
(see ``canonical_metrics_bytes``): with a fixed seed and config the numeric
trajectory is bit-reproducible on one platform, wall time is not.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .nbody import TrajectoryDataset, read_dataset
from .o3 import vector_from_m, vector_to_m
from .segnn import (BatchedGraph, Graph, Model, ModelConfig, build_model,
                    complete_edges, knn_edges, radius_edges)
from .tensor import OptimState, adam_step, rng_from_seed

__all__ = ["RunConfig", "Batcher", "train", "evaluate", "TrainResult",
           "canonical_metrics_bytes", "extra_scalars_for"]


@dataclass
class RunConfig:
    """One training run: model, data, and optimisation schedule."""

    model: ModelConfig = field(default_factory=ModelConfig)
    dataset_dir: str = ""
    out_dir: str = ""
    epochs: int = 1000
    batch_size: int = 100
    lr_schedule: str = "constant"   # constant | step (x0.1 at 80% and 90%)
    target: str = "position"        # position | force
    max_train_samples: int = 0      # 0 = use the full train split
    val_every: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.target not in ("position", "force"):
            raise ValueError(f"unknown target {self.target!r}")
        if isinstance(self.model, dict):
            self.model = ModelConfig(**self.model)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**data)


def extra_scalars_for(kind: str) -> int:
    """Edge invariants fed to messages: squared distance always; the charged
    system appends the charge product and the plain distance."""
    return 3 if kind == "charged" else 1


class Batcher:
    """Turns dataset rows into batched graphs.

    Edges are built once per sample (complete graph or k-nearest neighbours
    of the input positions) and reused across epochs; batches are assembled
    by concatenation with node offsets.
    """

    def __init__(self, ds: TrajectoryDataset, config: ModelConfig):
        self.ds = ds
        self.config = config
        n = ds.n_particles
        if config.neighbor_rule == "complete":
            self._template = complete_edges(n)
            self._edges = None
        elif config.neighbor_rule == "knn":
            self._template = None
            self._edges = [knn_edges(ds.positions[s], config.neighbor_k)
                           for s in range(ds.n_samples)]
        else:
            self._template = None
            self._edges = [radius_edges(ds.positions[s], config.neighbor_radius)
                           for s in range(ds.n_samples)]

    def edges_of(self, s: int) -> np.ndarray:
        return self._template if self._template is not None else self._edges[s]

    def graph(self, s: int) -> Graph:
        pos = self.ds.positions[s]
        edges = self.edges_of(s)
        e_sc = {}
        if self.ds.kind == "charged":
            q = self.ds.charges[s]
            rel = pos[edges[:, 1]] - pos[edges[:, 0]]
            e_sc = {"charge_product": q[edges[:, 0]] * q[edges[:, 1]],
                    "distance": np.linalg.norm(rel, axis=-1)}
        n_sc = {"charge": self.ds.charges[s]} if self.ds.kind == "charged" \
            else {"mass": self.ds.masses[s]}
        return Graph(pos, edges,
                     edge_scalars=e_sc,
                     node_vectors={"velocity": self.ds.velocities[s]},
                     node_scalars=n_sc)

    def batch(self, indices) -> BatchedGraph:
        return BatchedGraph.from_graphs([self.graph(s) for s in indices])

    def targets(self, indices, target: str) -> np.ndarray:
        """Regression targets in m-order: displacement from the input
        positions, or the force vectors."""
        idx = np.asarray(indices)
        if target == "force":
            t = self.ds.targets_force[idx]
        else:
            t = self.ds.targets_pos[idx] - self.ds.positions[idx]
        return vector_to_m(t.reshape(-1, 3))


@dataclass
class TrainResult:
    best_val: float
    test_metric: float
    epochs_run: int
    diverged: bool
    metrics_path: str
    params_path: str


def _lr_at(run: RunConfig, epoch: int) -> float:
    lr = run.model.lr
    if run.lr_schedule == "step":
        if epoch >= int(0.9 * run.epochs):
            lr *= 0.01
        elif epoch >= int(0.8 * run.epochs):
            lr *= 0.1
    return lr


def _eval_batches(model, batcher, indices, target, batch_size=500):
    """Mean squared / absolute error over a split, plus mean wall time per
    forward batch."""
    sq_sum = abs_sum = count = 0.0
    times = []
    for lo in range(0, len(indices), batch_size):
        chunk = indices[lo:lo + batch_size]
        b = batcher.batch(chunk)
        tgt = batcher.targets(chunk, target)
        t0 = time.perf_counter()
        out = model.forward(b)
        times.append(time.perf_counter() - t0)
        diff = out - tgt
        sq_sum += float(np.sum(diff * diff))
        abs_sum += float(np.sum(np.abs(diff)))
        count += diff.size
    return sq_sum / count, abs_sum / count, float(np.mean(times))


def train(run: RunConfig, dataset: TrajectoryDataset = None) -> TrainResult:
    """Minimise the configured loss with Adam; write per-epoch JSON-lines
    metrics and save the best-validation parameters.

    A non-finite loss aborts immediately; the checkpoint of the best epoch
    seen so far is retained.
    """
    ds = dataset if dataset is not None else read_dataset(run.dataset_dir)
    out_dir = Path(run.out_dir) if run.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    model = build_model(run.model, extra_scalars_for(ds.kind))
    batcher = Batcher(ds, run.model)
    state = OptimState(lr=run.model.lr, beta1=run.model.beta1,
                       beta2=run.model.beta2, eps=run.model.eps,
                       weight_decay=run.model.weight_decay)
    rng = rng_from_seed(run.seed)

    train_idx = ds.split_indices("train")
    if run.max_train_samples:
        train_idx = train_idx[:run.max_train_samples]
    val_idx = ds.split_indices("val")
    test_idx = ds.split_indices("test")

    metrics_path = (out_dir / "metrics.jsonl") if out_dir else None
    metrics_f = open(metrics_path, "w") if metrics_path else None
    best_val = np.inf
    best_state = model.store.state_arrays()
    last_val = np.inf
    diverged = False
    epochs_run = 0

    try:
        for epoch in range(run.epochs):
            t0 = time.perf_counter()
            state.lr = _lr_at(run, epoch)
            order = rng.permutation(len(train_idx))
            loss_sum = 0.0
            n_batches = 0
            for lo in range(0, len(order), run.batch_size):
                idx = train_idx[order[lo:lo + run.batch_size]]
                b = batcher.batch(idx)
                tgt = batcher.targets(idx, run.target)
                tape = ad.Tape()
                loss = model.loss(b, tgt, tape)
                lv = float(loss.value)
                if not np.isfinite(lv):
                    diverged = True
                    break
                grads = ad.differentiate(loss, model.store, tape)
                model.store.set_grads(grads)
                adam_step(model.store, state)
                loss_sum += lv
                n_batches += 1
            if diverged:
                break
            epochs_run = epoch + 1
            if epoch % run.val_every == 0 or epoch == run.epochs - 1:
                val_mse, val_mae, _ = _eval_batches(model, batcher, val_idx,
                                                    run.target)
                last_val = val_mae if run.model.loss == "mae" else val_mse
                if last_val < best_val:
                    best_val = last_val
                    best_state = model.store.state_arrays()
            if metrics_f:
                rec = {"epoch": epoch, "train_loss": loss_sum / max(n_batches, 1),
                       "val_mse": last_val,
                       "seconds": round(time.perf_counter() - t0, 3)}
                metrics_f.write(json.dumps(rec, sort_keys=True) + "\n")
                metrics_f.flush()
    finally:
        if metrics_f:
            metrics_f.close()

    model.store.load_state(best_state)
    test_mse, test_mae, _ = _eval_batches(model, batcher, test_idx, run.target)
    test_metric = test_mae if run.model.loss == "mae" else test_mse
    params_path = ""
    if out_dir:
        params_path = str(out_dir / "params.npz")
        model.store.save_npz(params_path)
        with open(out_dir / "run_config.json", "w") as f:
            f.write(run.to_json())
        with open(out_dir / "result.json", "w") as f:
            json.dump({"best_val": best_val, "test_metric": test_metric,
                       "epochs_run": epochs_run, "diverged": diverged},
                      f, indent=2, sort_keys=True)
    return TrainResult(best_val, test_metric, epochs_run, diverged,
                       str(metrics_path) if metrics_path else "", params_path)


def evaluate(model: Model, ds: TrajectoryDataset, split="test",
             metric="mse", target="position"):
    """Metric of a trained model over a dataset split; also reports the mean
    forward wall time per batch."""
    batcher = Batcher(ds, model.config)
    mse, mae, t = _eval_batches(model, batcher, ds.split_indices(split), target)
    return {"metric": mae if metric == "mae" else mse,
            "mse": mse, "mae": mae, "mean_forward_seconds_per_batch": t}


def predict_zero_baseline(ds: TrajectoryDataset, split="test",
                          target="position") -> float:
    """MSE of predicting zero displacement (or zero force)."""
    idx = ds.split_indices(split)
    if target == "force":
        diff = ds.targets_force[idx]
    else:
        diff = ds.targets_pos[idx] - ds.positions[idx]
    return float(np.mean(diff * diff))


def canonical_metrics_bytes(path) -> bytes:
    """Metrics log with the wall-time field stripped, for byte comparisons."""
    out = []
    with open(path) as f:
        for line in f:
            rec = json.loads(line)
            rec.pop("seconds", None)
            out.append(json.dumps(rec, sort_keys=True))
    return ("\n".join(out) + "\n").encode()
