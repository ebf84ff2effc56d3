"""Charged 5-body and gravitational 100-body data generation.

Both systems integrate softened inverse-square interactions with a
kick-drift-kick leapfrog in natural units (G = 1, m = 1, softening 0.1).
Pairwise displacements are computed as a single antisymmetric array, so
total momentum is conserved to rounding.

Datasets are written as flat little-endian float64 binaries next to a
manifest carrying counts, shapes, simulation parameters, the master seed
and per-file SHA-256 checksums; ``read_dataset`` verifies all of them.
Generation draws each trajectory's initial conditions from its own PRNG
stream spawned from the master seed, so chunked or parallel generation
produces bit-identical data.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import assert_finite

__all__ = [
    "SimState", "TrajectoryDataset", "leapfrog_step",
    "gravity_acceleration", "charged_acceleration",
    "init_gravity", "init_charged", "gravity_energy", "total_momentum",
    "simulate_gravity", "simulate_charged",
    "generate_gravity_dataset", "generate_charged_dataset",
    "write_dataset", "read_dataset",
]

SOFTENING = 0.1


@dataclass
class SimState:
    """Positions/velocities of shape (..., n, 3) plus per-particle charges
    or masses of shape (..., n); supports batched trajectories."""

    positions: np.ndarray
    velocities: np.ndarray
    charges: np.ndarray = None
    masses: np.ndarray = None
    time: float = 0.0

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        self.velocities = np.asarray(self.velocities, dtype=np.float64)
        assert_finite(self.positions, "positions")
        assert_finite(self.velocities, "velocities")


def _pair_displacements(pos):
    """d[..., i, j, :] = x_j - x_i (exactly antisymmetric in i, j)."""
    return pos[..., None, :, :] - pos[..., :, None, :]


def _softened_inv_cube(d, softening):
    r2 = np.einsum("...ijc,...ijc->...ij", d, d) + softening * softening
    with np.errstate(divide="ignore"):
        inv = 1.0 / (r2 * np.sqrt(r2))
    idx = np.arange(d.shape[-2])
    inv[..., idx, idx] = 0.0  # no self-interaction, also safe for eps = 0
    return inv


def gravity_acceleration(pos, softening=SOFTENING):
    """a_i = sum_j (x_j - x_i) / (|x_ij|^2 + eps^2)^(3/2), unit masses."""
    d = _pair_displacements(pos)
    inv = _softened_inv_cube(d, softening)
    return np.einsum("...ij,...ijc->...ic", inv, d)


def charged_acceleration(pos, charges, softening=SOFTENING):
    """Coulomb-like: a_i = sum_j q_i q_j (x_i - x_j) / (|x_ij|^2 + eps^2)^(3/2);
    like charges repel."""
    d = _pair_displacements(pos)
    inv = _softened_inv_cube(d, softening)
    qq = charges[..., :, None] * charges[..., None, :]
    return -np.einsum("...ij,...ijc->...ic", qq * inv, d)


def leapfrog_step(state: SimState, accel_fn, dt: float) -> SimState:
    """One kick-drift-kick step: v half-kick, x drift, v half-kick."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    a = accel_fn(state.positions)
    if not np.all(np.isfinite(a)):
        bad = np.argwhere(~np.all(np.isfinite(a), axis=-1))
        raise FloatingPointError(f"non-finite acceleration for particle "
                                 f"{bad[0].tolist()}")
    v_half = state.velocities + (0.5 * dt) * a
    x_new = state.positions + dt * v_half
    a_new = accel_fn(x_new)
    if not np.all(np.isfinite(a_new)):
        bad = np.argwhere(~np.all(np.isfinite(a_new), axis=-1))
        raise FloatingPointError(f"non-finite acceleration for particle "
                                 f"{bad[0].tolist()}")
    v_new = v_half + (0.5 * dt) * a_new
    return SimState(x_new, v_new, charges=state.charges, masses=state.masses,
                    time=state.time + dt)


def _integrate(state, accel_fn, dt, steps, snapshot_every=None):
    """Integrate in place-free steps; optionally collect snapshots (including
    the initial state)."""
    snaps = [] if snapshot_every else None
    if snapshot_every:
        snaps.append(state)
    for k in range(steps):
        state = leapfrog_step(state, accel_fn, dt)
        if snapshot_every and (k + 1) % snapshot_every == 0:
            snaps.append(state)
    return state, snaps


def gravity_energy(state, softening=SOFTENING):
    """Kinetic plus softened pairwise potential (unit masses)."""
    kin = 0.5 * np.sum(state.velocities ** 2)
    d = _pair_displacements(state.positions)
    r = np.sqrt(np.einsum("...ijc,...ijc->...ij", d, d)
                + softening * softening)
    n = state.positions.shape[-2]
    iu = np.triu_indices(n, k=1)
    return kin - np.sum(r[..., iu[0], iu[1]] ** -1)


def total_momentum(state):
    return state.velocities.sum(axis=-2)


# ---------------------------------------------------------------------------
# simulations
# ---------------------------------------------------------------------------

def init_gravity(rng, n=100):
    """Positions from a unit Gaussian, unit-speed random-direction
    velocities, unit masses."""
    pos = rng.standard_normal((n, 3))
    v = rng.standard_normal((n, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    return SimState(pos, v, masses=np.ones(n))


def init_charged(rng, n=5):
    """Charges +-1 uniform; positions and velocities ~ N(0, 0.5^2)."""
    q = rng.integers(0, 2, size=n) * 2.0 - 1.0
    pos = 0.5 * rng.standard_normal((n, 3))
    v = 0.5 * rng.standard_normal((n, 3))
    return SimState(pos, v, charges=q)


def simulate_gravity(rng, n=100, dt=1e-3, steps=5000, softening=SOFTENING):
    """Integrate a 100-body cluster over t in [0, 5], snapshotting at integer
    times.  Returns (snapshots, sample) where the sample maps the state at
    t=3 to position and force (= acceleration, unit masses) at t=4."""
    if n < 2:
        raise ValueError("need at least two bodies")
    state = init_gravity(rng, n)
    accel = lambda x: gravity_acceleration(x, softening)
    per_unit = int(round(1.0 / dt))
    _, snaps = _integrate(state, accel, dt, steps, snapshot_every=per_unit)
    s3, s4 = snaps[3], snaps[4]
    sample = {
        "positions": s3.positions, "velocities": s3.velocities,
        "target_pos": s4.positions, "target_force": accel(s4.positions),
    }
    return snaps, sample


def simulate_charged(rng, n=5, dt=1e-3, steps=1000, softening=SOFTENING):
    """One charged trajectory: initial state plus the positions after
    ``steps`` leapfrog steps."""
    state = init_charged(rng, n)
    accel = lambda x: charged_acceleration(x, state.charges, softening)
    final, _ = _integrate(state, accel, dt, steps)
    sample = {
        "positions": state.positions, "velocities": state.velocities,
        "charges": state.charges, "target_pos": final.positions,
    }
    return state, sample


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class TrajectoryDataset:
    """Input states and targets for one system, stacked [sample, particle,
    xyz], with the train/val/test counts and generation parameters."""

    kind: str                     # "charged" | "gravity"
    counts: tuple                 # (n_train, n_val, n_test)
    positions: np.ndarray
    velocities: np.ndarray
    targets_pos: np.ndarray
    charges: np.ndarray = None    # charged only, [sample, particle]
    masses: np.ndarray = None     # gravity only
    targets_force: np.ndarray = None  # gravity only
    params: dict = field(default_factory=dict)
    seed: int = 0

    @property
    def n_samples(self):
        return self.positions.shape[0]

    @property
    def n_particles(self):
        return self.positions.shape[1]

    def split_indices(self, split: str) -> np.ndarray:
        tr, va, te = self.counts
        lo, hi = {"train": (0, tr), "val": (tr, tr + va),
                  "test": (tr + va, tr + va + te)}[split]
        return np.arange(lo, hi)


def _batched_charged(seeds, n, dt, steps, softening):
    states = [init_charged(np.random.Generator(np.random.PCG64(s)), n)
              for s in seeds]
    pos = np.stack([s.positions for s in states])
    vel = np.stack([s.velocities for s in states])
    q = np.stack([s.charges for s in states])
    state = SimState(pos.copy(), vel.copy(), charges=q)
    accel = lambda x: charged_acceleration(x, q, softening)
    final, _ = _integrate(state, accel, dt, steps)
    return pos, vel, q, final.positions


def generate_charged_dataset(n_train, n_val, n_test, seed, n=5, dt=1e-3,
                             steps=1000, softening=SOFTENING,
                             chunk=2000) -> TrajectoryDataset:
    total = n_train + n_val + n_test
    seeds = np.random.SeedSequence(seed).spawn(total)
    pos, vel, q, tgt = [], [], [], []
    for lo in range(0, total, chunk):
        p, v, c, t = _batched_charged(seeds[lo:lo + chunk], n, dt, steps,
                                      softening)
        pos.append(p), vel.append(v), q.append(c), tgt.append(t)
    return TrajectoryDataset(
        kind="charged", counts=(n_train, n_val, n_test),
        positions=np.concatenate(pos), velocities=np.concatenate(vel),
        charges=np.concatenate(q), targets_pos=np.concatenate(tgt),
        params={"n_particles": n, "dt": dt, "steps": steps,
                "softening": softening}, seed=seed)


def _batched_gravity(seeds, n, dt, steps, softening):
    states = [init_gravity(np.random.Generator(np.random.PCG64(s)), n)
              for s in seeds]
    pos = np.stack([s.positions for s in states])
    vel = np.stack([s.velocities for s in states])
    state = SimState(pos, vel)
    accel = lambda x: gravity_acceleration(x, softening)
    per_unit = int(round(1.0 / dt))
    s3, _ = _integrate(state, accel, dt, 3 * per_unit)
    s4, _ = _integrate(s3, accel, dt, per_unit)
    return (s3.positions, s3.velocities, s4.positions, accel(s4.positions))


def generate_gravity_dataset(n_train, n_val, n_test, seed, n=100, dt=1e-3,
                             softening=SOFTENING, chunk=25) -> TrajectoryDataset:
    """Samples map the state at t=3 to position and force at t=4 (the
    trajectory itself spans t in [0, 5] in the single-trajectory API)."""
    total = n_train + n_val + n_test
    seeds = np.random.SeedSequence(seed).spawn(total)
    pos, vel, tgt_p, tgt_f = [], [], [], []
    for lo in range(0, total, chunk):
        p, v, tp, tf = _batched_gravity(seeds[lo:lo + chunk], n, dt, 5000,
                                        softening)
        pos.append(p), vel.append(v), tgt_p.append(tp), tgt_f.append(tf)
    total_pos = np.concatenate(pos)
    return TrajectoryDataset(
        kind="gravity", counts=(n_train, n_val, n_test),
        positions=total_pos, velocities=np.concatenate(vel),
        masses=np.ones(total_pos.shape[:2]),
        targets_pos=np.concatenate(tgt_p), targets_force=np.concatenate(tgt_f),
        params={"n_particles": n, "dt": dt, "steps": 5000,
                "softening": softening}, seed=seed)


# ---------------------------------------------------------------------------
# on-disk format
# ---------------------------------------------------------------------------

_FILE_FIELDS = {
    "charged": [("positions.bin", "positions"), ("velocities.bin", "velocities"),
                ("charges.bin", "charges"), ("targets_pos.bin", "targets_pos")],
    "gravity": [("positions.bin", "positions"), ("velocities.bin", "velocities"),
                ("masses.bin", "masses"), ("targets_pos.bin", "targets_pos"),
                ("targets_force.bin", "targets_force")],
}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_dataset(ds: TrajectoryDataset, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    shapes = {}
    for fname, attr in _FILE_FIELDS[ds.kind]:
        arr = np.ascontiguousarray(getattr(ds, attr), dtype="<f8")
        path = directory / fname
        with open(path, "wb") as f:
            f.write(arr.tobytes())
        files[fname] = _sha256(path)
        shapes[fname] = list(arr.shape)
    manifest = {
        "kind": ds.kind,
        "counts": {"train": ds.counts[0], "val": ds.counts[1],
                   "test": ds.counts[2]},
        "dtype": "f64le",
        "shapes": shapes,
        "sha256": files,
        "sim_params": ds.params,
        "seed": ds.seed,
    }
    with open(directory / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return directory / "manifest.json"


def read_dataset(directory) -> TrajectoryDataset:
    directory = Path(directory)
    with open(directory / "manifest.json") as f:
        manifest = json.load(f)
    kind = manifest["kind"]
    arrays = {}
    for fname, attr in _FILE_FIELDS[kind]:
        path = directory / fname
        digest = _sha256(path)
        if digest != manifest["sha256"][fname]:
            raise IOError(f"checksum mismatch for {fname}: manifest "
                          f"{manifest['sha256'][fname][:12]}..., "
                          f"file {digest[:12]}...")
        shape = tuple(manifest["shapes"][fname])
        data = np.fromfile(path, dtype="<f8")
        if data.size != int(np.prod(shape)):
            raise IOError(f"size mismatch for {fname}")
        arrays[attr] = data.reshape(shape)
    counts = (manifest["counts"]["train"], manifest["counts"]["val"],
              manifest["counts"]["test"])
    return TrajectoryDataset(kind=kind, counts=counts,
                             params=manifest["sim_params"],
                             seed=manifest["seed"], **arrays)
