import numpy as np
import pytest

from conftest import fcc_structure, random_rotation, random_structure
from hienet.crystal import (
    CrystalStructure,
    StrainTensor,
    apply_strain,
    build_graph,
    make_supercell,
    transform,
)


def brute_force_edges(structure, r_cut, k_range=3):
    """Independent edge enumeration by direct looping over images."""
    edges = set()
    pos = structure.positions
    lat = structure.lattice
    n = structure.n_atoms
    for i in range(n):
        for j in range(n):
            for k1 in range(-k_range, k_range + 1):
                for k2 in range(-k_range, k_range + 1):
                    for k3 in range(-k_range, k_range + 1):
                        if i == j and k1 == k2 == k3 == 0:
                            continue
                        r = pos[j] + np.array([k1, k2, k3]) @ lat - pos[i]
                        d = np.linalg.norm(r)
                        if 0 < d <= r_cut:
                            edges.add((j, i, k1, k2, k3))
    return edges


def edge_set(graph):
    return {(int(s), int(d), *map(int, k))
            for s, d, k in zip(graph.src, graph.dst, graph.image)}


class TestStructureValidation:
    def test_requires_atoms(self):
        with pytest.raises(ValueError):
            CrystalStructure(np.zeros(0, dtype=int), np.zeros((0, 3)), np.eye(3))

    def test_atomic_number_range(self):
        with pytest.raises(ValueError, match="range"):
            CrystalStructure([0], np.zeros((1, 3)), np.eye(3) * 3)
        with pytest.raises(ValueError, match="range"):
            CrystalStructure([200], np.zeros((1, 3)), np.eye(3) * 3)

    def test_singular_lattice_rejected(self):
        lat = np.array([[1.0, 0, 0], [2.0, 0, 0], [0, 0, 1.0]])
        with pytest.raises(ValueError, match="singular lattice"):
            CrystalStructure([6], np.zeros((1, 3)), lat)


class TestBuildGraph:
    def test_simple_cubic_six_neighbors(self):
        s = CrystalStructure([6], np.zeros((1, 3)), np.eye(3) * 3.0)
        g = build_graph(s, 3.1)
        assert g.n_edges == 6
        d = np.linalg.norm(g.displacement, axis=1)
        np.testing.assert_allclose(d, 3.0, atol=1e-12)
        expected = {(0, 0, *v) for v in
                    [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]}
        assert edge_set(g) == expected
        assert edge_set(g) == brute_force_edges(s, 3.1)

    def test_simple_cubic_below_first_shell(self):
        s = CrystalStructure([6], np.zeros((1, 3)), np.eye(3) * 3.0)
        assert build_graph(s, 2.9).n_edges == 0

    def test_fcc_first_shell(self):
        s = fcc_structure(a=3.0, z=29)
        g = build_graph(s, 2.2)
        assert g.n_edges == 48
        d = np.linalg.norm(g.displacement, axis=1)
        np.testing.assert_allclose(d, 3.0 / np.sqrt(2), atol=1e-12)
        counts = np.bincount(g.dst, minlength=4)
        np.testing.assert_array_equal(counts, [12, 12, 12, 12])
        assert edge_set(g) == brute_force_edges(s, 2.2)

    def test_matches_brute_force_on_random_triclinic(self, rng):
        for _ in range(4):
            s = random_structure(rng, n_atoms=3, a=4.0, skew=0.3)
            g = build_graph(s, 4.5)
            assert edge_set(g) == brute_force_edges(s, 4.5)

    def test_edge_consistency_and_reversal(self, rng):
        s = random_structure(rng, n_atoms=5, a=5.0, skew=0.25)
        g = build_graph(s, 5.0)
        rebuilt = (s.positions[g.src] + g.image @ s.lattice - s.positions[g.dst])
        assert np.abs(rebuilt - g.displacement).max() < 1e-10
        d = np.linalg.norm(g.displacement, axis=1)
        assert d.min() > 0 and d.max() <= 5.0
        edges = edge_set(g)
        for (j, i, k1, k2, k3) in edges:
            assert (i, j, -k1, -k2, -k3) in edges
        assert all(not (j == i and k == (0, 0, 0))
                   for j, i, *k in ((e[0], e[1], e[2:]) for e in edges))

    def test_deterministic_edge_order(self):
        s = fcc_structure()
        g1 = build_graph(s, 5.0)
        g2 = build_graph(s, 5.0)
        assert np.array_equal(g1.src, g2.src)
        assert np.array_equal(g1.image, g2.image)
        order = np.lexsort((g1.image[:, 2], g1.image[:, 1], g1.image[:, 0],
                            g1.src, g1.dst))
        assert np.array_equal(order, np.arange(g1.n_edges))

    def test_self_interaction_through_images(self):
        # a single-atom cell must see its own periodic copies
        s = CrystalStructure([18], np.zeros((1, 3)), np.eye(3) * 3.0)
        g = build_graph(s, 3.1)
        assert g.n_edges == 6
        assert (g.src == 0).all() and (g.dst == 0).all()

    def test_image_range_overflow(self):
        s = CrystalStructure([6], np.zeros((1, 3)), np.eye(3) * 0.5)
        with pytest.raises(ValueError, match="image range overflow"):
            build_graph(s, 40.0)

    def test_invalid_cutoff(self):
        s = fcc_structure()
        with pytest.raises(ValueError):
            build_graph(s, -1.0)

    def test_coincident_atoms_rejected(self):
        s = CrystalStructure([6, 6], np.zeros((2, 3)), np.eye(3) * 4.0)
        with pytest.raises(ValueError, match="coincident"):
            build_graph(s, 3.0)


class TestGraphEquivariance:
    def test_rotation_preserves_edges_and_rotates_displacements(self, rng):
        s = random_structure(rng, n_atoms=4, a=4.5, skew=0.2)
        g = build_graph(s, 5.0)
        for improper in (False, True):
            rot = random_rotation(rng, improper=improper)
            b = rng.normal(size=3)
            g2 = build_graph(transform(s, rot, b), 5.0)
            assert edge_set(g) == edge_set(g2)
            assert np.abs(g2.displacement - g.displacement @ rot.T).max() < 1e-9

    def test_translation_exact_with_dyadic_coordinates(self):
        # dyadic-rational coordinates make the translated sums exact in
        # floating point, so edge displacements must match bit for bit
        rng = np.random.default_rng(7)
        lattice = np.diag([4.0, 4.5, 5.0])
        pos = rng.integers(0, 4096, size=(4, 3)) / 1024.0
        s = CrystalStructure([29] * 4, pos, lattice)
        b = np.array([0.25, -1.5, 3.125])
        g1 = build_graph(s, 4.0)
        g2 = build_graph(transform(s, np.eye(3), b), 4.0)
        assert edge_set(g1) == edge_set(g2)
        assert np.array_equal(g1.displacement, g2.displacement)

    def test_periodic_shift_invariance_exact(self):
        rng = np.random.default_rng(8)
        lattice = np.diag([4.0, 4.0, 4.0])
        pos = rng.integers(0, 4096, size=(3, 3)) / 1024.0
        s = CrystalStructure([13] * 3, pos, lattice)
        g1 = build_graph(s, 3.5)
        shifted = s.positions.copy()
        shifted[1] += np.array([1, -2, 1]) @ lattice
        g2 = build_graph(s.replace(positions=shifted), 3.5)
        d1 = np.sort(g1.displacement.view("f8,f8,f8"), axis=0)
        d2 = np.sort(g2.displacement.view("f8,f8,f8"), axis=0)
        assert np.array_equal(d1, d2)


class TestApplyStrain:
    def test_zero_strain_identity(self):
        s = fcc_structure()
        out = apply_strain(s, np.zeros((3, 3)))
        np.testing.assert_array_equal(out.positions, s.positions)
        np.testing.assert_array_equal(out.lattice, s.lattice)

    def test_isotropic_volume_scaling(self):
        s = CrystalStructure([6], np.zeros((1, 3)), np.eye(3) * 3.0)
        out = apply_strain(s, np.eye(3) * 0.01)
        assert out.volume == pytest.approx(27.0 * 1.01 ** 3, rel=1e-12)

    def test_antisymmetric_strain_is_identity(self):
        s = fcc_structure()
        eps = np.zeros((3, 3))
        eps[0, 1], eps[1, 0] = 0.01, -0.01
        out = apply_strain(s, eps)
        np.testing.assert_allclose(out.positions, s.positions, atol=1e-15)
        np.testing.assert_allclose(out.lattice, s.lattice, atol=1e-15)

    def test_original_unchanged(self):
        s = fcc_structure()
        before = s.positions.copy()
        apply_strain(s, np.eye(3) * 0.05)
        np.testing.assert_array_equal(s.positions, before)

    def test_collapsed_cell(self):
        s = fcc_structure()
        with pytest.raises(ValueError, match="collapsed cell"):
            apply_strain(s, -np.eye(3))

    def test_symmetrization_idempotent(self, rng):
        m = rng.normal(size=(3, 3))
        sym = StrainTensor(m).symmetrized
        np.testing.assert_allclose(StrainTensor(sym).symmetrized, sym, atol=1e-15)


class TestTransform:
    def test_identity(self):
        s = fcc_structure()
        out = transform(s, np.eye(3), np.zeros(3))
        np.testing.assert_array_equal(out.positions, s.positions)

    def test_inversion_negates(self):
        s = fcc_structure()
        out = transform(s, -np.eye(3))
        np.testing.assert_array_equal(out.positions, -s.positions)
        np.testing.assert_array_equal(out.lattice, -s.lattice)

    def test_distances_preserved(self, rng):
        s = random_structure(rng, n_atoms=5)
        rot = random_rotation(rng)
        out = transform(s, rot, rng.normal(size=3))
        d_before = np.linalg.norm(s.positions[:, None] - s.positions[None], axis=-1)
        d_after = np.linalg.norm(out.positions[:, None] - out.positions[None], axis=-1)
        assert np.abs(d_before - d_after).max() < 1e-10

    def test_non_orthogonal_rejected(self):
        s = fcc_structure()
        with pytest.raises(ValueError, match="not an O\\(3\\) element"):
            transform(s, np.eye(3) * 1.5)


class TestMakeSupercell:
    def test_identity_supercell(self):
        s = fcc_structure()
        out = make_supercell(s, (1, 1, 1))
        np.testing.assert_array_equal(out.positions, s.positions)

    def test_atom_count(self):
        s = CrystalStructure([18], np.zeros((1, 3)), np.eye(3) * 3.0)
        out = make_supercell(s, (2, 2, 2))
        assert out.n_atoms == 8
        assert out.volume == pytest.approx(8 * s.volume, rel=1e-12)

    def test_zero_entry_rejected(self):
        with pytest.raises(ValueError):
            make_supercell(fcc_structure(), (0, 2, 2))

    def test_energy_extensivity_under_lj(self):
        from hienet.training import LJPotential

        pot = LJPotential()
        s = fcc_structure()
        e1 = pot.predict(s).energy
        e8 = pot.predict(make_supercell(s, (2, 2, 2))).energy
        assert e8 == pytest.approx(8 * e1, rel=1e-10)
