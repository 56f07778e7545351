"""Hybrid invariant/equivariant interatomic potential.

The model embeds a periodic radius graph, runs one or more invariant
attention layers on scalar features, hands the scalars to a stack of
equivariant tensor-product layers, and reads out a per-atom energy. Forces
are the negative position gradient and the stress is the strain derivative
of the energy, both taken with the reverse-mode tape, so the predictions are
conservative, sum to zero, and transform correctly under O(3) by
construction.

Every per-edge message (invariant and equivariant) is modulated by the
smooth cutoff envelope, and the equivariant aggregation is normalized by
1/(1 + sum of edge envelopes) instead of the raw neighbor count; both choices
keep the energy continuously differentiable as atoms cross the cutoff, which
the gradient-based force/stress heads rely on.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import DiffTensor, Tape
from .crystal import CrystalStructure, build_graph
from .equivariant import (
    IrrepsFeature,
    IrrepsLayout,
    clebsch_gordan,
    spherical_harmonics,
    tp_output_layout,
    tp_path_list,
)
from .featurize import bessel_embed, embed_nodes, envelope

KBAR_PER_EV_A3 = 1602.1766
N_ELEMENTS = 118


class CoverageError(ValueError):
    """Structure contains an element the model was not fitted for."""


@dataclass(frozen=True)
class ModelConfig:
    num_invariant_layers: int = 1
    num_equivariant_layers: int = 3
    hidden_dim: int = 512
    irreps_mult: tuple = (512, 128, 64, 32)
    l_max: int = 3
    n_bessel: int = 8
    envelope_p: int = 6
    r_cut: float = 5.0
    dropout: float = 0.06
    dropout_attn: float = 0.1
    radial_weights: bool = False

    def __post_init__(self):
        if self.num_invariant_layers < 0 or self.num_equivariant_layers < 0:
            raise ValueError("layer counts must be non-negative")
        if self.num_invariant_layers == 0 and self.num_equivariant_layers == 0:
            raise ValueError("model needs at least one message passing layer")
        if not 0 <= self.l_max <= 4:
            raise ValueError("l_max must be in 0..4")
        if len(self.irreps_mult) != self.l_max + 1:
            raise ValueError("irreps_mult must list one multiplicity per l <= l_max")
        if self.irreps_mult[0] < 1:
            raise ValueError("need at least one scalar channel")
        if self.hidden_dim < 1 or self.n_bessel < 1:
            raise ValueError("hidden_dim and n_bessel must be positive")
        if self.r_cut <= 0:
            raise ValueError("cutoff must be positive")

    @property
    def invariant_only(self):
        return self.num_equivariant_layers == 0

    @classmethod
    def desk_scale(cls, **overrides):
        """Small configuration that keeps test suites fast on a CPU."""
        base = dict(
            hidden_dim=64,
            irreps_mult=(64, 16, 8, 4),
            num_invariant_layers=1,
            num_equivariant_layers=2,
            dropout=0.0,
            dropout_attn=0.0,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        return {
            "num_invariant_layers": self.num_invariant_layers,
            "num_equivariant_layers": self.num_equivariant_layers,
            "hidden_dim": self.hidden_dim,
            "irreps_mult": list(self.irreps_mult),
            "l_max": self.l_max,
            "n_bessel": self.n_bessel,
            "envelope_p": self.envelope_p,
            "r_cut": self.r_cut,
            "dropout": self.dropout,
            "dropout_attn": self.dropout_attn,
            "radial_weights": self.radial_weights,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["irreps_mult"] = tuple(data["irreps_mult"])
        return cls(**data)


def _nonzero_irreps(config):
    return [(m, l) for l, m in enumerate(config.irreps_mult) if m > 0]


@dataclass(frozen=True)
class EqvLayerSpec:
    in_layout: IrrepsLayout
    msg_layout: IrrepsLayout
    pre_layout: IrrepsLayout
    out_layout: IrrepsLayout
    paths: list


def eqv_layer_specs(config: ModelConfig):
    """Layouts and tensor-product paths for each equivariant layer."""
    specs = []
    out_blocks = _nonzero_irreps(config)
    num_gated = sum(m for m, l in out_blocks if l > 0)
    pre_blocks = [(m + num_gated if l == 0 else m, l) for m, l in out_blocks]
    in_layout = IrrepsLayout([(config.hidden_dim, 0)])
    for _ in range(config.num_equivariant_layers):
        msg_layout = tp_output_layout(in_layout, config.l_max, config.l_max)
        spec = EqvLayerSpec(
            in_layout=in_layout,
            msg_layout=msg_layout,
            pre_layout=IrrepsLayout(pre_blocks),
            out_layout=IrrepsLayout(out_blocks),
            paths=tp_path_list(in_layout, config.l_max, config.l_max),
        )
        specs.append(spec)
        in_layout = spec.out_layout
    return specs


def init_params(config: ModelConfig, seed=0):
    """Fresh model parameters; deterministic for a given seed.

    The energy readout starts at zero so an untrained model predicts exactly
    the per-element reference energies.
    """
    rng = np.random.default_rng(seed)
    d = config.hidden_dim
    nb = config.n_bessel
    p = {"embed.w": rng.normal(size=(d, N_ELEMENTS))}

    cat_dim = 2 * d + nb
    for i in range(config.num_invariant_layers):
        pre = f"inv{i}."
        p[pre + "w_k"] = rng.normal(size=(cat_dim, d)) / np.sqrt(cat_dim)
        p[pre + "w_q"] = rng.normal(size=(cat_dim, d)) / np.sqrt(cat_dim)
        p[pre + "phi.w1"] = rng.normal(size=(cat_dim, d)) / np.sqrt(cat_dim)
        p[pre + "phi.b1"] = np.zeros(d)
        p[pre + "phi.w2"] = rng.normal(size=(d, d)) / np.sqrt(d)
        p[pre + "phi.b2"] = np.zeros(d)
        p[pre + "gate.w1"] = rng.normal(size=(d, d)) / np.sqrt(d)
        p[pre + "gate.b1"] = np.zeros(d)
        p[pre + "gate.w2"] = rng.normal(size=(d, d)) / np.sqrt(d)
        p[pre + "gate.b2"] = np.zeros(d)

    for j, spec in enumerate(eqv_layer_specs(config)):
        pre = f"eqv{j}."
        for m, l in spec.in_layout.blocks:
            p[pre + f"w_in.{l}"] = rng.normal(size=(m, m)) / np.sqrt(m)
        fan_per_l3 = {}
        for _, _, l3 in spec.paths:
            fan_per_l3[l3] = fan_per_l3.get(l3, 0) + 1
        tp_w = np.empty(len(spec.paths))
        for k, (_, _, l3) in enumerate(spec.paths):
            tp_w[k] = rng.normal() / np.sqrt(fan_per_l3[l3])
        p[pre + "tp_w"] = tp_w
        if config.radial_weights:
            p[pre + "w_rad"] = np.zeros((nb, len(spec.paths)))
        in_mult = dict((l, m) for m, l in spec.in_layout.blocks)
        msg_mult = dict((l, m) for m, l in spec.msg_layout.blocks)
        for m_out, l in spec.pre_layout.blocks:
            if l in msg_mult:
                p[pre + f"w_msg.{l}"] = (
                    rng.normal(size=(msg_mult[l], m_out)) / np.sqrt(msg_mult[l])
                )
            if l in in_mult:
                p[pre + f"w_skip.{l}"] = (
                    rng.normal(size=(in_mult[l], m_out)) / np.sqrt(in_mult[l])
                )

    readout_dim = d if config.invariant_only else _nonzero_irreps(config)[0][0]
    p["readout.w"] = np.zeros((readout_dim, 1))
    p["scale"] = np.asarray(1.0)
    p["shift.z"] = np.zeros(N_ELEMENTS)
    return p


def n_parameters(params) -> int:
    return int(sum(np.asarray(v).size for v in params.values()))


def params_on_tape(tape: Tape, params):
    return {k: tape.leaf(v) for k, v in params.items()}


# ---------------------------------------------------------------------------
# batched graph container


@dataclass
class GraphBatch:
    """One or more crystal graphs concatenated with node/edge offsets."""

    n_graphs: int
    n_nodes: int
    z: np.ndarray          # (N,)
    graph_id: np.ndarray   # (N,)
    n_atoms: np.ndarray    # (B,)
    positions: np.ndarray  # (N, 3)
    lattices: np.ndarray   # (B, 3, 3)
    volumes: np.ndarray    # (B,)
    src: np.ndarray        # (E,)
    dst: np.ndarray        # (E,)
    image: np.ndarray      # (E, 3)
    edge_graph: np.ndarray  # (E,)

    @classmethod
    def from_structures(cls, structures, r_cut):
        graphs = [build_graph(s, r_cut) for s in structures]
        offsets = np.cumsum([0] + [s.n_atoms for s in structures])
        src = [g.src + off for g, off in zip(graphs, offsets)]
        dst = [g.dst + off for g, off in zip(graphs, offsets)]
        return cls(
            n_graphs=len(structures),
            n_nodes=int(offsets[-1]),
            z=np.concatenate([s.atomic_numbers for s in structures]),
            graph_id=np.concatenate([
                np.full(s.n_atoms, b, dtype=np.intp) for b, s in enumerate(structures)
            ]),
            n_atoms=np.array([s.n_atoms for s in structures]),
            positions=np.concatenate([s.positions for s in structures]),
            lattices=np.stack([s.lattice for s in structures]),
            volumes=np.array([s.volume for s in structures]),
            src=np.concatenate(src) if graphs else np.zeros(0, dtype=np.intp),
            dst=np.concatenate(dst) if graphs else np.zeros(0, dtype=np.intp),
            image=np.concatenate([g.image for g in graphs]),
            edge_graph=np.concatenate([
                np.full(g.n_edges, b, dtype=np.intp) for b, g in enumerate(graphs)
            ]),
        )


# ---------------------------------------------------------------------------
# layers


def _dropout_mask(rng, shape, rate):
    keep = rng.random(shape) >= rate
    return keep.astype(np.float64) / (1.0 - rate)


def _mlp2(x, w1, b1, w2, b2, mask=None):
    h = ag.silu(x @ w1 + b1)
    if mask is not None:
        h = h * mask
    return h @ w2 + b2


def invariant_layer(h, edges, h_edges, env_w, weights, hidden_dim,
                    training=False, rng=None, dropout=0.0, dropout_attn=0.0):
    """Graph-transformer update of scalar node features.

    `edges` is (src, dst, n_nodes); `h_edges` the radial edge features and
    `env_w` the per-edge cutoff envelope that scales each message to zero at
    the cutoff. Nodes without edges keep their gate output.
    """
    src, dst, n_nodes = edges
    h_dst = ag.gather(h, dst)
    h_src = ag.gather(h, src)
    feat = ag.concat([h_dst, h_src, h_edges], axis=1)

    k = feat @ weights["w_k"]
    q = feat @ weights["w_q"]
    if training and dropout_attn > 0.0:
        k = k * _dropout_mask(rng, k.shape, dropout_attn)
        q = q * _dropout_mask(rng, q.shape, dropout_attn)
    mask = _dropout_mask(rng, (feat.shape[0], hidden_dim), dropout) \
        if training and dropout > 0.0 else None
    v = _mlp2(feat, weights["phi.w1"], weights["phi.b1"],
              weights["phi.w2"], weights["phi.b2"], mask)
    score = ag.sigmoid((q * k) * (1.0 / np.sqrt(hidden_dim)))
    agg = ag.scatter_add(v * score * env_w, dst, n_nodes)

    gmask = _dropout_mask(rng, (h.shape[0], hidden_dim), dropout) \
        if training and dropout > 0.0 else None
    phi = ag.sigmoid(_mlp2(h, weights["gate.w1"], weights["gate.b1"],
                           weights["gate.w2"], weights["gate.b2"], gmask))
    return phi + (1.0 - phi) * agg


def _feature_to_blocks(f: IrrepsFeature):
    """Flat irreps data -> {l: (n, mult, 2l+1)} block tensors."""
    return {l: f.block(i) for i, (_, l) in enumerate(f.layout.blocks)}


def _blocks_to_feature(blocks, layout: IrrepsLayout):
    parts = []
    for m, l in layout.blocks:
        b = blocks[l]
        parts.append(ag.reshape(b, (b.shape[0], m * (2 * l + 1))))
    return IrrepsFeature(layout, ag.concat(parts, axis=1))


def _equivariant_blocks(blocks, edges, harmonics_scaled, h_edges, weights,
                        spec: EqvLayerSpec, radial=False):
    """Tensor-product message passing on per-order block tensors.

    `harmonics_scaled` carries the per-edge envelope and smooth neighbor
    normalization already multiplied in, so path outputs can be scatter-summed
    directly. Returns the gated output blocks.
    """
    src, dst, n_nodes = edges
    src_blocks = {l: ag.gather(ag.chan_mix(b, weights[f"w_in.{l}"]), src)
                  for l, b in blocks.items()}

    tp_w = weights["tp_w"]
    rad = h_edges @ weights["w_rad"] if radial else None
    block_ls = [l for _, l in spec.in_layout.blocks]
    cg = clebsch_gordan(max(max(block_ls[bi], l2, l3) for bi, l2, l3 in spec.paths))
    contribs = {}
    for p, (bi, l2, l3) in enumerate(spec.paths):
        l1 = block_ls[bi]
        w = tp_w[p:p + 1]
        if rad is not None:
            w = w + rad[:, p:p + 1]
        out = ag.tp_fwd(src_blocks[l1], harmonics_scaled[l2] * w, cg.block(l1, l2, l3))
        contribs.setdefault(l3, []).append(out)

    msg_mult = dict((l, m) for m, l in spec.msg_layout.blocks)
    pre = {}
    for m_out, l in spec.pre_layout.blocks:
        parts = []
        if l in contribs:
            cat = contribs[l][0] if len(contribs[l]) == 1 \
                else ag.concat(contribs[l], axis=1)
            if cat.shape[1] != msg_mult[l]:
                raise ValueError(f"message width mismatch for l={l}")
            agg = ag.scatter_add(cat, dst, n_nodes)
            parts.append(ag.chan_mix(agg, weights[f"w_msg.{l}"]))
        if l in blocks:
            parts.append(ag.chan_mix(blocks[l], weights[f"w_skip.{l}"]))
        if not parts:
            raise ValueError(f"no contribution to output order l={l}")
        pre[l] = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    return _gate_blocks(pre, spec.pre_layout, spec.out_layout)


def _gate_blocks(pre, pre_layout: IrrepsLayout, out_layout: IrrepsLayout):
    """SiLU on scalars; l>0 channels scaled by SiLU of reserved gate scalars."""
    n = pre[0].shape[0]
    n_scalar = pre_layout.blocks[0][0]
    gated = [(m, l) for m, l in out_layout.blocks if l > 0]
    num_gated = sum(m for m, _ in gated)
    scalars = ag.reshape(pre[0], (n, n_scalar))
    gates = ag.silu(scalars[:, :num_gated])
    out = {0: ag.reshape(ag.silu(scalars[:, num_gated:]), (n, n_scalar - num_gated, 1))}
    offset = 0
    for m, l in gated:
        gate_cols = ag.reshape(gates[:, offset:offset + m], (n, m, 1))
        out[l] = pre[l] * gate_cols
        offset += m
    return out


def equivariant_layer(f: IrrepsFeature, edges, harmonics_scaled, h_edges,
                      weights, spec: EqvLayerSpec, radial=False):
    """Tensor-product message passing with skip connection and gate.

    Flat-layout wrapper around the block-tensor implementation; the forward
    pass uses the blocks directly.
    """
    blocks = _feature_to_blocks(f)
    out = _equivariant_blocks(blocks, edges, harmonics_scaled, h_edges,
                              weights, spec, radial=radial)
    return _blocks_to_feature(out, spec.out_layout)


def energy_readout(scalars, w_e, scale, shifts, z, graph_id, n_graphs):
    """Per-graph energies: sum_i (scale * (W_e f_i0) + shift[z_i])."""
    site = (scalars @ w_e) * scale + ag.reshape(ag.gather(shifts, z - 1), (z.size, 1))
    return ag.reshape(ag.scatter_add(site, graph_id, n_graphs), (n_graphs,))


# ---------------------------------------------------------------------------
# full forward pass


def forward_batch(tape: Tape, params_dt, batch: GraphBatch, config: ModelConfig,
                  training=False, rng=None):
    """Record the energy computation on `tape`.

    Returns (per-graph energies (B,), positions leaf (N,3), strain leaf
    (B,3,3)); the caller differentiates the summed energy w.r.t. the two
    leaves to obtain forces and stress.
    """
    if training and (config.dropout > 0 or config.dropout_attn > 0) and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    b = batch
    positions = tape.leaf(b.positions)
    strain = tape.leaf(np.zeros((b.n_graphs, 3, 3)))

    eps_sym = (strain + ag.transpose(strain, (0, 2, 1))) * 0.5
    deform = eps_sym + np.eye(3)
    lat = tape.constant(b.lattices)
    lat_eff = ag.sum_axis(
        ag.reshape(lat, (b.n_graphs, 3, 3, 1)) * ag.reshape(deform, (b.n_graphs, 1, 3, 3)),
        axis=2,
    )
    deform_nodes = ag.gather(deform, b.graph_id)
    pos_eff = ag.sum_axis(ag.reshape(positions, (b.n_nodes, 3, 1)) * deform_nodes, axis=1)

    edges = (b.src, b.dst, b.n_nodes)
    lat_edges = ag.gather(lat_eff, b.edge_graph)
    shift = ag.sum_axis(lat_edges * b.image.astype(np.float64)[:, :, None], axis=1)
    r = ag.gather(pos_eff, b.src) + shift - ag.gather(pos_eff, b.dst)

    r_norm = ag.sqrt(ag.sum_axis(r * r, axis=1, keepdims=True))
    if r_norm.value.size and r_norm.value.min() < 1e-6:
        raise ValueError("atomic overlap")

    h_edges = bessel_embed(r_norm, config.r_cut, config.n_bessel, config.envelope_p)
    env_w = envelope(r_norm * (1.0 / config.r_cut), config.envelope_p)

    h = embed_nodes(b.z, params_dt["embed.w"])
    for i in range(config.num_invariant_layers):
        weights = {k[len(f"inv{i}."):]: v for k, v in params_dt.items()
                   if k.startswith(f"inv{i}.")}
        h = invariant_layer(h, edges, h_edges, env_w, weights, config.hidden_dim,
                            training=training, rng=rng,
                            dropout=config.dropout, dropout_attn=config.dropout_attn)

    if config.invariant_only:
        scalars = h
    else:
        u = r / r_norm
        harmonics = spherical_harmonics(u, config.l_max)
        n_eff = ag.scatter_add(env_w, b.dst, b.n_nodes)
        edge_scale = env_w * ag.gather(1.0 / (1.0 + n_eff), b.dst)
        harmonics_scaled = [y * edge_scale for y in harmonics]
        blocks = {0: ag.reshape(h, (b.n_nodes, config.hidden_dim, 1))}
        for j, spec in enumerate(eqv_layer_specs(config)):
            weights = {k[len(f"eqv{j}."):]: v for k, v in params_dt.items()
                       if k.startswith(f"eqv{j}.")}
            with tape.scope("tensor_product"):
                blocks = _equivariant_blocks(blocks, edges, harmonics_scaled,
                                             h_edges, weights, spec,
                                             radial=config.radial_weights)
        m0 = _nonzero_irreps(config)[0][0]
        scalars = ag.reshape(blocks[0], (b.n_nodes, m0))

    energies = energy_readout(scalars, params_dt["readout.w"], params_dt["scale"],
                              params_dt["shift.z"], b.z, b.graph_id, b.n_graphs)
    return energies, positions, strain


def gradients_from_energy(energies, positions, strain, batch):
    """Forces and per-graph symmetric stress from the recorded energy."""
    total = ag.sum_all(energies)
    g_pos, g_eps = ag.backward(total, [positions, strain])
    forces = -g_pos
    sym = (g_eps + ag.transpose(g_eps, (0, 2, 1))) * 0.5
    stress = sym * (1.0 / batch.volumes)[:, None, None]
    return forces, stress


# ---------------------------------------------------------------------------
# user-facing potential


@dataclass
class PredictionSet:
    """Total energy (eV), per-atom forces (eV/A), 3x3 stress (eV/A^3)."""

    energy: float
    forces: np.ndarray
    stress: np.ndarray

    @property
    def stress_kbar(self):
        return self.stress * KBAR_PER_EV_A3


class HIENetPotential:
    """Inference wrapper: configuration + parameters + element coverage."""

    def __init__(self, config: ModelConfig, params, covered_elements=None):
        self.config = config
        self.params = params
        self.covered_elements = (
            None if covered_elements is None else frozenset(int(z) for z in covered_elements)
        )

    def predict(self, structure: CrystalStructure) -> PredictionSet:
        if self.covered_elements is not None:
            missing = set(structure.atomic_numbers.tolist()) - self.covered_elements
            if missing:
                raise CoverageError(
                    f"elements {sorted(missing)} not covered by the fitted model"
                )
        batch = GraphBatch.from_structures([structure], self.config.r_cut)
        tape = Tape()
        params_dt = params_on_tape(tape, self.params)
        energies, positions, strain = forward_batch(tape, params_dt, batch, self.config)
        forces, stress = gradients_from_energy(energies, positions, strain, batch)
        sigma = stress.value[0]
        sigma = 0.5 * (sigma + sigma.T)  # bitwise-symmetric output
        return PredictionSet(
            energy=float(energies.value[0]),
            forces=np.array(forces.value),
            stress=sigma,
        )
