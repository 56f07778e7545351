"""Hybrid-architecture ablation: throughput and accuracy of hienet / eqvnet /
invnet variants across a model-size grid.

`hienet` mixes one invariant attention layer with equivariant layers,
`eqvnet` drops the invariant layer, and `invnet` uses invariant layers only
with its width chosen to match the hybrid's parameter count.
"""

import time

import numpy as np

from . import autograd as ag
from .autograd import Tape
from .equivariant import IrrepsFeature, IrrepsLayout, spherical_harmonics
from .potential import (
    GraphBatch,
    ModelConfig,
    eqv_layer_specs,
    equivariant_layer,
    forward_batch,
    gradients_from_energy,
    init_params,
    invariant_layer,
    n_parameters,
    params_on_tape,
)
from .training import LossConfig, OptimizerConfig, total_loss, train

VARIANTS = ("hienet", "eqvnet", "invnet")


def _irreps_for(size):
    return (size, max(1, size // 4), max(1, size // 8), max(1, size // 16))


def hienet_config(size, **overrides):
    base = dict(
        num_invariant_layers=1, num_equivariant_layers=2, hidden_dim=size,
        irreps_mult=_irreps_for(size), dropout=0.0, dropout_attn=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def eqvnet_config(size, **overrides):
    base = dict(
        num_invariant_layers=0, num_equivariant_layers=3, hidden_dim=size,
        irreps_mult=_irreps_for(size), dropout=0.0, dropout_attn=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def invnet_config(size, num_layers=3, **overrides):
    base = dict(
        num_invariant_layers=num_layers, num_equivariant_layers=0,
        hidden_dim=size, irreps_mult=(size,), l_max=0,
        dropout=0.0, dropout_attn=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def matched_invariant_config(reference: ModelConfig, num_layers=3, tolerance=0.1):
    """Invariant-only configuration whose parameter count best matches
    `reference`, found by scanning the hidden width."""
    target = n_parameters(init_params(reference, seed=0))
    best = None
    for width in range(8, 4096, 4):
        cfg = invnet_config(width, num_layers=num_layers,
                            n_bessel=reference.n_bessel,
                            envelope_p=reference.envelope_p,
                            r_cut=reference.r_cut)
        count = n_parameters(init_params(cfg, seed=0))
        gap = abs(count - target) / target
        if best is None or gap < best[0]:
            best = (gap, cfg, count)
        if count > target * (1.0 + tolerance) and gap > best[0]:
            break
    return best[1]


def variant_config(name, size, **overrides):
    if name == "hienet":
        return hienet_config(size, **overrides)
    if name == "eqvnet":
        return eqvnet_config(size, **overrides)
    if name == "invnet":
        return matched_invariant_config(hienet_config(size, **overrides))
    raise ValueError(f"unknown variant {name!r}")


def measure_throughput(config, params, structures, batch_size=1, n_iter=30,
                       warmup=10):
    """Forward+backward structure evaluations per second.

    The first `warmup` iterations are excluded from timing.
    """
    batches = []
    for start in range(0, max(batch_size, len(structures)), batch_size):
        chunk = [structures[(start + k) % len(structures)] for k in range(batch_size)]
        batches.append(GraphBatch.from_structures(chunk, config.r_cut))
    elapsed = 0.0
    counted = 0
    for it in range(n_iter):
        batch = batches[it % len(batches)]
        t0 = time.perf_counter()
        tape = Tape()
        pt = params_on_tape(tape, params)
        energies, positions, strain = forward_batch(tape, pt, batch, config)
        gradients_from_energy(energies, positions, strain, batch)
        dt = time.perf_counter() - t0
        if it >= warmup:
            elapsed += dt
            counted += batch.n_graphs
    return counted / elapsed if elapsed > 0 else float("inf")


def tensor_product_op_count(config, structure):
    """Number of tensor-product contractions recorded by one forward pass."""
    batch = GraphBatch.from_structures([structure], config.r_cut)
    tape = Tape()
    pt = params_on_tape(tape, init_params(config, seed=0))
    forward_batch(tape, pt, batch, config)
    counts = tape.op_counts()
    return counts.get("tp_fwd", 0) + counts.get("tp_edge", 0)


def layer_forward_times(width=64, n_nodes=64, n_edges=640, n_iter=20, seed=0):
    """Mean wall time of one invariant vs one equivariant layer forward pass
    at matched scalar width. Returns (t_invariant, t_equivariant) seconds."""
    rng = np.random.default_rng(seed)
    config = hienet_config(width)
    params = init_params(config, seed=seed)
    src = rng.integers(0, n_nodes, size=n_edges)
    dst = rng.integers(0, n_nodes, size=n_edges)
    edges = (src, dst, n_nodes)
    h_val = rng.normal(size=(n_nodes, width))
    he_val = rng.normal(size=(n_edges, config.n_bessel))
    u = rng.normal(size=(n_edges, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    env_val = rng.random((n_edges, 1))
    spec = eqv_layer_specs(config)[0]

    inv_w = {k[len("inv0."):]: None for k in params if k.startswith("inv0.")}
    eqv_w = {k[len("eqv0."):]: None for k in params if k.startswith("eqv0.")}

    t_inv = t_eqv = 0.0
    for _ in range(n_iter):
        tape = Tape()
        h = tape.leaf(h_val)
        he = tape.constant(he_val)
        env = tape.constant(env_val)
        for k in inv_w:
            inv_w[k] = tape.leaf(params["inv0." + k])
        for k in eqv_w:
            eqv_w[k] = tape.leaf(params["eqv0." + k])
        harmonics = spherical_harmonics(tape.constant(u), config.l_max)
        harmonics = [y * env for y in harmonics]
        f = IrrepsFeature(IrrepsLayout([(width, 0)]), h)

        t0 = time.perf_counter()
        invariant_layer(h, edges, he, env, inv_w, width)
        t_inv += time.perf_counter() - t0

        t0 = time.perf_counter()
        equivariant_layer(f, edges, harmonics, he, eqv_w, spec)
        t_eqv += time.perf_counter() - t0
    return t_inv / n_iter, t_eqv / n_iter


def validation_loss(potential, samples, loss_cfg=None):
    loss_cfg = loss_cfg or LossConfig()
    losses = [total_loss(potential.predict(s.structure), s, loss_cfg) for s in samples]
    return float(np.mean(losses))


def run_ablation(sizes, variants=VARIANTS, dataset=None, epochs=3, batch_size=1,
                 n_iter=30, warmup=10, seed=0, log=None):
    """Train each variant briefly, measure throughput, return CSV-ready rows."""
    from .training import split_dataset

    rows = []
    train_split, val_split = split_dataset(dataset)
    structures = [s.structure for s in val_split] or [s.structure for s in train_split]
    for size in sizes:
        for name in variants:
            config = variant_config(name, size)
            opt = OptimizerConfig(epochs=epochs, batch_size=8)
            result = train(config, dataset, opt_cfg=opt, seed=seed)
            params = result.ema_params
            throughput = measure_throughput(config, params, structures,
                                            batch_size=batch_size,
                                            n_iter=n_iter, warmup=warmup)
            val = validation_loss(result.potential(config), val_split or train_split)
            row = {
                "variant": name,
                "size": size,
                "n_params": n_parameters(params),
                "throughput": throughput,
                "val_loss": val,
            }
            rows.append(row)
            if log is not None:
                log(row)
    return rows


def ablation_csv(rows):
    lines = ["variant,size,n_params,throughput,val_loss"]
    for r in rows:
        lines.append(f"{r['variant']},{r['size']},{r['n_params']},"
                     f"{r['throughput']:.6g},{r['val_loss']:.8g}")
    return "\n".join(lines) + "\n"
