import numpy as np
import pytest

from hienet.crystal import CrystalStructure
from hienet.potential import HIENetPotential, ModelConfig, init_params


def random_rotation(rng, improper=False):
    """Haar-ish random O(3) element via QR with positive-diagonal fix."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    if improper:
        q = -q
    return q


def random_structure(rng, n_atoms=4, a=4.5, species=(29, 13), skew=0.15,
                     min_dist=1.8):
    """Random triclinic cell with a minimum interatomic separation."""
    for _ in range(200):
        lattice = np.eye(3) * a + rng.normal(scale=skew * a / 3, size=(3, 3))
        frac = rng.uniform(0, 1, size=(n_atoms, 3))
        pos = frac @ lattice
        numbers = rng.choice(species, size=n_atoms)
        try:
            s = CrystalStructure(numbers, pos, lattice)
        except ValueError:
            continue
        from hienet.crystal import build_graph
        g = build_graph(s, 5.0)
        if g.n_edges == 0:
            continue
        if np.linalg.norm(g.displacement, axis=1).min() >= min_dist:
            return s
    raise RuntimeError("could not build a valid random structure")


def fcc_structure(a=5.397, z=18):
    lattice = np.eye(3) * a
    frac = np.array([[0, 0, 0], [0, .5, .5], [.5, 0, .5], [.5, .5, 0]])
    return CrystalStructure([z] * 4, frac @ lattice, lattice)


def micro_config(**overrides):
    """Smallest config that still exercises the full hybrid path."""
    base = dict(
        num_invariant_layers=1, num_equivariant_layers=1, hidden_dim=16,
        irreps_mult=(16, 4, 2), l_max=2, n_bessel=4,
        dropout=0.0, dropout_attn=0.0,
    )
    base.update(overrides)
    return ModelConfig(**base)


def potential_with_output(config, seed=0, readout_scale=0.1):
    """Initialized model with a non-zero readout so E depends on geometry."""
    params = init_params(config, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    params["readout.w"] = rng.normal(size=params["readout.w"].shape) * readout_scale
    return HIENetPotential(config, params)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
