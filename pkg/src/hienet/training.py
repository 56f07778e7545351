"""Training harness: Huber losses, AdamW, cosine schedule, EMA, and a
shifted-force Lennard-Jones oracle that labels synthetic crystal datasets.

The oracle plays the role of the reference method: it is analytic, cheap,
and itself satisfies the smoothness/conservation constraints the model
enforces, so desk-scale training runs are fully reproducible.
"""

import copy
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import DiffTensor, Tape
from .crystal import CrystalStructure, apply_strain, build_graph
from .potential import (
    KBAR_PER_EV_A3,
    GraphBatch,
    HIENetPotential,
    ModelConfig,
    PredictionSet,
    forward_batch,
    gradients_from_energy,
    init_params,
    params_on_tape,
)


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    energy_weight: float = 1.0
    force_weight: float = 1.0
    stress_weight: float = 0.01
    huber_delta: float = 0.01

    def __post_init__(self):
        if min(self.energy_weight, self.force_weight,
               self.stress_weight, self.huber_delta) < 0:
            raise ValueError("loss weights and delta must be non-negative")


@dataclass(frozen=True)
class OptimizerConfig:
    max_lr: float = 0.01
    min_lr: float = 5e-6
    warmup_epochs: float = 0.1
    warmup_factor: float = 0.2
    weight_decay: float = 0.001
    batch_size: int = 8
    epochs: int = 200
    ema_decay: float = 0.999

    def __post_init__(self):
        if not 0 < self.min_lr <= self.max_lr:
            raise ValueError("need 0 < min_lr <= max_lr")
        if not 0 < self.ema_decay < 1:
            raise ValueError("ema_decay must be in (0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")


@dataclass
class LabeledSample:
    structure: CrystalStructure
    energy: float
    forces: np.ndarray
    stress: np.ndarray  # eV/A^3


def huber(e, delta=0.01):
    """0.5 e^2 inside |e| <= delta, linear with matched slope outside."""
    if delta <= 0:
        raise ValueError("delta must be positive")
    if isinstance(e, DiffTensor):
        a = ag.absval(e)
        return ag.where(a.value <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))
    e = np.asarray(e, dtype=np.float64)
    out = np.where(np.abs(e) <= delta, 0.5 * e * e, delta * (np.abs(e) - 0.5 * delta))
    return out if out.ndim else float(out)


def total_loss(pred: PredictionSet, ref: LabeledSample, cfg: LossConfig):
    """Weighted Huber loss of one prediction against its reference labels.

    Works on a plain PredictionSet (returns a float) or on one whose fields
    are DiffTensors (returns a differentiable scalar). Stress enters in kBar.
    """
    n = ref.structure.n_atoms
    on_tape = isinstance(pred.energy, DiffTensor)
    if on_tape:
        for part in (pred.energy, pred.forces, pred.stress):
            if not np.isfinite(part.value).all():
                raise ValueError("non-finite loss")
        e_term = huber((pred.energy - ref.energy) * (1.0 / n), cfg.huber_delta)
        loss = cfg.energy_weight * ag.sum_all(e_term)
        if cfg.force_weight > 0:
            f_term = huber(pred.forces - ref.forces, cfg.huber_delta)
            loss = loss + cfg.force_weight * ag.sum_all(f_term) * (1.0 / (3.0 * n))
        if cfg.stress_weight > 0:
            s_term = huber((pred.stress - ref.stress) * KBAR_PER_EV_A3, cfg.huber_delta)
            loss = loss + cfg.stress_weight * ag.sum_all(s_term) * (1.0 / 9.0)
        return loss
    for part in (pred.energy, pred.forces, pred.stress):
        if not np.isfinite(part).all():
            raise ValueError("non-finite loss")
    loss = cfg.energy_weight * huber((pred.energy - ref.energy) / n, cfg.huber_delta)
    if cfg.force_weight > 0:
        loss += cfg.force_weight * np.mean(huber(pred.forces - ref.forces, cfg.huber_delta))
    if cfg.stress_weight > 0:
        loss += cfg.stress_weight * np.mean(
            huber((pred.stress - ref.stress) * KBAR_PER_EV_A3, cfg.huber_delta)
        )
    return float(loss)


def adamw_step(params, grads, state, lr, weight_decay=0.001,
               beta1=0.9, beta2=0.999, eps=1e-8):
    """One decoupled-weight-decay Adam update; returns updated params.

    `state` carries first/second moments and the step counter and is updated
    in place. Parameters without a gradient entry are left untouched.
    """
    if not state:
        state["step"] = 0
        state["m"] = {k: np.zeros_like(np.asarray(v)) for k in grads
                      for v in (params[k],)}
        state["v"] = {k: np.zeros_like(np.asarray(v)) for k in grads
                      for v in (params[k],)}
    state["step"] += 1
    t = state["step"]
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    out = dict(params)
    for k, g in grads.items():
        theta = np.asarray(params[k], dtype=np.float64)
        theta = theta * (1.0 - lr * weight_decay)
        m = state["m"][k] = beta1 * state["m"][k] + (1.0 - beta1) * g
        v = state["v"][k] = beta2 * state["v"][k] + (1.0 - beta2) * (g * g)
        out[k] = theta - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return out


def cosine_schedule(step, total_steps, cfg: OptimizerConfig):
    """Linear warmup from warmup_factor*max_lr, then cosine decay to min_lr."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside schedule range")
    warmup_steps = total_steps * cfg.warmup_epochs / cfg.epochs
    if step < warmup_steps:
        frac = step / warmup_steps
        return cfg.max_lr * (cfg.warmup_factor + (1.0 - cfg.warmup_factor) * frac)
    span = total_steps - warmup_steps
    t = (step - warmup_steps) / span if span > 0 else 1.0
    return cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + np.cos(np.pi * t))


def ema_update(ema_params, params, decay):
    """theta_ema <- decay * theta_ema + (1 - decay) * theta."""
    return {k: decay * np.asarray(ema_params[k]) + (1.0 - decay) * np.asarray(v)
            for k, v in params.items()}


# ---------------------------------------------------------------------------
# analytic Lennard-Jones oracle (shifted-force truncation)


@dataclass(frozen=True)
class LJPotential:
    """Shifted-force Lennard-Jones reference potential over periodic pairs.

    Energy and forces are continuous at the cutoff by construction, so the
    ground truth satisfies the same smoothness constraint the learned model
    enforces. Argon-like defaults.
    """

    epsilon: float = 0.0104  # eV
    sigma: float = 3.40      # Angstrom
    r_cut: float = 5.0       # Angstrom

    def _pair(self, r):
        s6 = (self.sigma / r) ** 6
        v = 4.0 * self.epsilon * (s6 * s6 - s6)
        dv = (24.0 * self.epsilon / r) * (s6 - 2.0 * s6 * s6)
        return v, dv

    def predict(self, structure: CrystalStructure) -> PredictionSet:
        graph = build_graph(structure, self.r_cut)
        r_vec = graph.displacement
        r = np.linalg.norm(r_vec, axis=1)
        if r.size and r.min() < 1e-6:
            raise ValueError("atomic overlap")
        v_c, dv_c = self._pair(self.r_cut)
        if r.size:
            v, dv = self._pair(r)
            v_sf = v - v_c - (r - self.r_cut) * dv_c
            dv_sf = dv - dv_c
            energy = 0.5 * float(np.sum(v_sf))
            unit = r_vec / r[:, None]
            per_edge = dv_sf[:, None] * unit
            forces = np.zeros((structure.n_atoms, 3))
            np.add.at(forces, graph.dst, per_edge)
            virial = 0.5 * (r_vec.T @ ((dv_sf / r)[:, None] * r_vec))
        else:
            energy = 0.0
            forces = np.zeros((structure.n_atoms, 3))
            virial = np.zeros((3, 3))
        stress = (virial + virial.T) * (0.5 / structure.volume)
        return PredictionSet(energy=energy, forces=forces, stress=stress)


def lj_oracle(structure, epsilon=0.0104, sigma=3.40, r_cut=5.0) -> LabeledSample:
    """Label a structure with shifted-force Lennard-Jones energy/forces/stress."""
    pred = LJPotential(epsilon, sigma, r_cut).predict(structure)
    return LabeledSample(structure, pred.energy, pred.forces, pred.stress)


# ---------------------------------------------------------------------------
# synthetic datasets


def _prototype(kind, species, nn_dist):
    if kind == "fcc":
        a = nn_dist * np.sqrt(2.0)
        frac = np.array([[0, 0, 0], [0, .5, .5], [.5, 0, .5], [.5, .5, 0]])
        numbers = [species[0]] * 4
    elif kind == "bcc":
        a = nn_dist * 2.0 / np.sqrt(3.0)
        frac = np.array([[0, 0, 0], [.5, .5, .5]])
        numbers = [species[0]] * 2
    elif kind == "rocksalt":
        a = nn_dist * 2.0
        frac = np.array([
            [0, 0, 0], [0, .5, .5], [.5, 0, .5], [.5, .5, 0],
            [.5, .5, .5], [.5, 0, 0], [0, .5, 0], [0, 0, .5],
        ])
        numbers = [species[0]] * 4 + [species[1 % len(species)]] * 4
    else:
        raise ValueError(f"unknown prototype {kind!r}")
    lattice = np.eye(3) * a
    return CrystalStructure(numbers, frac @ lattice, lattice)


def generate_dataset(seed, n_samples, species_mix=(18,), perturbation=0.15,
                     cell_jitter=0.03, epsilon=0.0104, sigma=3.40, r_cut=5.0):
    """Randomly perturbed fcc/bcc/rocksalt cells labeled by the LJ oracle.

    Deterministic for a given seed. Displacements that bring any pair closer
    than 0.7 sigma are rejected and redrawn.
    """
    rng = np.random.default_rng(seed)
    species = [int(z) for z in species_mix]
    nn = 2.0 ** (1.0 / 6.0) * sigma
    kinds = ("fcc", "bcc", "rocksalt")
    min_dist = 0.7 * sigma
    samples = []
    for i in range(n_samples):
        base = _prototype(kinds[i % 3], _shuffled(rng, species), nn)
        if cell_jitter > 0:
            strain = cell_jitter * rng.uniform(-1.0, 1.0, size=(3, 3))
            base = apply_strain(base, 0.5 * (strain + strain.T))
        for _attempt in range(200):
            disp = rng.normal(scale=perturbation, size=base.positions.shape) \
                if perturbation > 0 else 0.0
            candidate = base.replace(positions=base.positions + disp)
            graph = build_graph(candidate, r_cut)
            if graph.n_edges == 0 or np.linalg.norm(
                    graph.displacement, axis=1).min() >= min_dist:
                break
        else:
            raise RuntimeError("could not draw a non-overlapping perturbation")
        samples.append(lj_oracle(candidate, epsilon, sigma, r_cut))
    return samples


def _shuffled(rng, species):
    order = rng.permutation(len(species))
    return [species[i] for i in order]


def split_dataset(samples, train_fraction=0.95):
    n_train = max(1, int(round(len(samples) * train_fraction)))
    n_train = min(n_train, len(samples) - 1) if len(samples) > 1 else 1
    return samples[:n_train], samples[n_train:]


def fit_scale_shift(params, train_samples):
    """Set the energy scale to the force RMS and per-element shifts by least
    squares on the reference energies; returns the covered element set."""
    forces = np.concatenate([s.forces.reshape(-1) for s in train_samples])
    scale = float(np.sqrt(np.mean(forces ** 2)))
    counts = np.zeros((len(train_samples), 118))
    targets = np.empty(len(train_samples))
    for i, s in enumerate(train_samples):
        for z in s.structure.atomic_numbers:
            counts[i, z - 1] += 1.0
        targets[i] = s.energy
    covered = np.nonzero(counts.sum(axis=0) > 0)[0]
    shifts = np.zeros(118)
    sol, *_ = np.linalg.lstsq(counts[:, covered], targets, rcond=None)
    shifts[covered] = sol
    params["scale"] = np.asarray(scale if scale > 0 else 1.0)
    params["shift.z"] = shifts
    return {int(z + 1) for z in covered}


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: dict
    ema_params: dict
    metrics: list
    covered_elements: set
    converged_epoch: int = -1

    def potential(self, config, use_ema=True):
        return HIENetPotential(config, self.ema_params if use_ema else self.params,
                               self.covered_elements)


def _mean_abs(x):
    return float(np.mean(np.abs(x))) if np.asarray(x).size else 0.0


def _batched(indices, size):
    for i in range(0, len(indices), size):
        yield indices[i:i + size]


def _cached_batch(samples, idx, graph_cache, r_cut):
    key = tuple(idx)
    if key not in graph_cache:
        graph_cache[key] = GraphBatch.from_structures(
            [samples[i].structure for i in idx], r_cut)
    return graph_cache[key]


def _batch_refs(samples, idx):
    e = np.array([samples[i].energy for i in idx])
    f = np.concatenate([samples[i].forces for i in idx])
    s = np.stack([samples[i].stress for i in idx])
    n = np.array([samples[i].structure.n_atoms for i in idx])
    return e, f, s, n


def _batch_loss(energies, forces, stress, refs, loss_cfg):
    e_ref, f_ref, s_ref, n_atoms = refs
    b = len(n_atoms)
    e_res = (energies - e_ref) * (1.0 / n_atoms)
    loss = loss_cfg.energy_weight * ag.sum_all(huber(e_res, loss_cfg.huber_delta)) * (1.0 / b)
    if loss_cfg.force_weight > 0:
        node_w = np.repeat(1.0 / (3.0 * n_atoms * b), n_atoms)[:, None]
        f_term = huber(forces - f_ref, loss_cfg.huber_delta) * node_w
        loss = loss + loss_cfg.force_weight * ag.sum_all(f_term)
    if loss_cfg.stress_weight > 0:
        s_term = huber((stress - s_ref) * KBAR_PER_EV_A3, loss_cfg.huber_delta)
        loss = loss + loss_cfg.stress_weight * ag.sum_all(s_term) * (1.0 / (9.0 * b))
    return loss


def evaluate_split(params, config, samples, graph_cache=None, batch_size=16):
    """MAE metrics (meV/atom, meV/A, kBar) of a parameter set on samples."""
    if not samples:
        return {"mae_e": 0.0, "mae_f": 0.0, "mae_s": 0.0}
    graph_cache = {} if graph_cache is None else graph_cache
    abs_e, abs_f, abs_s = [], [], []
    idx_all = list(range(len(samples)))
    for idx in _batched(idx_all, batch_size):
        batch = _cached_batch(samples, idx, graph_cache, config.r_cut)
        tape = Tape()
        pt = params_on_tape(tape, params)
        energies, positions, strain = forward_batch(tape, pt, batch, config)
        forces, stress = gradients_from_energy(energies, positions, strain, batch)
        e_ref, f_ref, s_ref, n_atoms = _batch_refs(samples, idx)
        abs_e.extend(np.abs((energies.value - e_ref) / n_atoms))
        abs_f.append(np.abs(forces.value - f_ref).reshape(-1))
        abs_s.append(np.abs((stress.value - s_ref) * KBAR_PER_EV_A3).reshape(-1))
    return {
        "mae_e": 1000.0 * float(np.mean(abs_e)),
        "mae_f": 1000.0 * float(np.mean(np.concatenate(abs_f))),
        "mae_s": float(np.mean(np.concatenate(abs_s))),
    }


def train(config: ModelConfig, dataset, loss_cfg=None, opt_cfg=None, seed=0,
          target_force_mae=None, checkpoint_path=None, log=None):
    """Fit a model on labeled samples; returns parameters and the metric log.

    Metrics are recorded per epoch for both splits: training metrics are
    running averages over the epoch's batches (live parameters), validation
    metrics use the EMA parameters. Raises TrainingDiverged if the loss
    explodes. `target_force_mae` (meV/A, validation) stops training early.
    """
    loss_cfg = loss_cfg or LossConfig()
    opt_cfg = opt_cfg or OptimizerConfig()
    train_samples, val_samples = split_dataset(dataset)

    rng = np.random.default_rng(seed + 1)
    params = init_params(config, seed)
    covered = fit_scale_shift(params, train_samples)
    trainable = [k for k in params if k not in ("scale", "shift.z")]
    ema_params = copy.deepcopy(params)
    state = {}
    graph_cache = {}
    val_cache = {}

    n_batches = (len(train_samples) + opt_cfg.batch_size - 1) // opt_cfg.batch_size
    total_steps = opt_cfg.epochs * n_batches
    metrics = []
    step = 0
    converged_epoch = -1

    for epoch in range(opt_cfg.epochs):
        order = rng.permutation(len(train_samples))
        run_e, run_f, run_s, lr = [], [], [], 0.0
        for idx in _batched(list(order), opt_cfg.batch_size):
            batch = _cached_batch(train_samples, idx, graph_cache, config.r_cut)
            refs = _batch_refs(train_samples, idx)
            tape = Tape()
            pt = params_on_tape(tape, params)
            energies, positions, strain = forward_batch(
                tape, pt, batch, config, training=True, rng=rng)
            need_grads = loss_cfg.force_weight > 0 or loss_cfg.stress_weight > 0
            if need_grads:
                forces, stress = gradients_from_energy(energies, positions, strain, batch)
            else:
                forces = tape.constant(np.zeros((batch.n_nodes, 3)))
                stress = tape.constant(np.zeros((batch.n_graphs, 3, 3)))
            loss = _batch_loss(energies, forces, stress, refs, loss_cfg)
            loss_val = float(loss.value)
            if not np.isfinite(loss_val) or loss_val > 1e6:
                raise TrainingDiverged(
                    f"loss {loss_val} at epoch {epoch} step {step}")

            grads_dt = ag.backward(loss, [pt[k] for k in trainable])
            grads = {k: g.value for k, g in zip(trainable, grads_dt)}
            lr = cosine_schedule(step, total_steps, opt_cfg)
            params = adamw_step(params, grads, state, lr, opt_cfg.weight_decay)
            ema_params = ema_update(ema_params, params, opt_cfg.ema_decay)
            step += 1

            e_ref, f_ref, s_ref, n_atoms = refs
            run_e.extend(np.abs((energies.value - e_ref) / n_atoms))
            run_f.append(np.abs(forces.value - f_ref).reshape(-1))
            run_s.append(np.abs((stress.value - s_ref) * KBAR_PER_EV_A3).reshape(-1))

        row_train = {
            "epoch": epoch, "split": "train",
            "mae_e": 1000.0 * float(np.mean(run_e)),
            "mae_f": 1000.0 * float(np.mean(np.concatenate(run_f))),
            "mae_s": float(np.mean(np.concatenate(run_s))),
            "lr": lr,
        }
        val = evaluate_split(ema_params, config, val_samples, val_cache)
        row_val = {"epoch": epoch, "split": "val", **val, "lr": lr}
        metrics.extend([row_train, row_val])
        if log is not None:
            log(row_train)
            log(row_val)
        if target_force_mae is not None and val_samples \
                and val["mae_f"] <= target_force_mae:
            converged_epoch = epoch
            break

    result = TrainResult(params, ema_params, metrics, covered, converged_epoch)
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint
        save_checkpoint(checkpoint_path, config, params, ema_params, covered)
    return result


def write_metrics_csv(metrics, path):
    lines = ["epoch,split,mae_e,mae_f,mae_s,lr"]
    for row in metrics:
        lines.append(f"{row['epoch']},{row['split']},{row['mae_e']:.8g},"
                     f"{row['mae_f']:.8g},{row['mae_s']:.8g},{row['lr']:.8g}")
    text = "\n".join(lines) + "\n"
    from .xyzio import atomic_write_text
    atomic_write_text(path, text)
