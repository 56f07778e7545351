import numpy as np
import pytest
from scipy.special import sph_harm_y

import hienet.autograd as ag
from conftest import random_rotation
from hienet.autograd import Tape
from hienet.equivariant import (
    CGTable,
    IrrepsFeature,
    IrrepsLayout,
    clebsch_gordan,
    gate,
    rotate_feature,
    spherical_harmonics,
    tensor_product,
    tp_path_list,
    wigner_from_samples,
)

L_MAX = 4


def scipy_real_harmonics(u, l):
    """Independent real harmonics: complex scipy values combined per the
    standard real convention, rescaled to component normalization."""
    x, y, z = u[:, 0], u[:, 1], u[:, 2]
    theta = np.arccos(np.clip(z, -1, 1))
    phi = np.arctan2(y, x)
    out = np.empty((u.shape[0], 2 * l + 1))
    for m in range(-l, l + 1):
        if m == 0:
            vals = sph_harm_y(l, 0, theta, phi).real
        elif m > 0:
            vals = np.sqrt(2) * (-1) ** m * sph_harm_y(l, m, theta, phi).real
        else:
            vals = np.sqrt(2) * (-1) ** m * sph_harm_y(l, -m, theta, phi).imag
        out[:, l + m] = vals
    return out * np.sqrt(4 * np.pi)


def sphere_quadrature(n_theta=12, n_phi=32):
    """Gauss-Legendre x uniform-phi nodes; exact for our polynomial degrees."""
    x, w = np.polynomial.legendre.leggauss(n_theta)
    theta_w = w
    phi = 2 * np.pi * np.arange(n_phi) / n_phi
    ct, pf = np.meshgrid(x, phi, indexing="ij")
    st = np.sqrt(1 - ct ** 2)
    u = np.stack([st * np.cos(pf), st * np.sin(pf), ct], axis=-1).reshape(-1, 3)
    weights = (np.broadcast_to(theta_w[:, None], ct.shape) * (2 * np.pi / n_phi))
    return u, weights.reshape(-1)


class TestSphericalHarmonics:
    def test_l0_constant(self, rng):
        u = rng.normal(size=(20, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        np.testing.assert_allclose(spherical_harmonics(u, 0)[0], 1.0, atol=1e-15)

    def test_l1_at_z(self):
        y1 = spherical_harmonics(np.array([[0.0, 0.0, 1.0]]), 1)[1]
        np.testing.assert_allclose(y1, [[0.0, np.sqrt(3), 0.0]], atol=1e-15)

    def test_component_normalization(self, rng):
        u = rng.normal(size=(100, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        for l, y in enumerate(spherical_harmonics(u, L_MAX)):
            np.testing.assert_allclose((y ** 2).sum(axis=1), 2 * l + 1, atol=1e-10)

    def test_orthonormality_by_quadrature(self):
        u, w = sphere_quadrature()
        ys = spherical_harmonics(u, L_MAX)
        stacked = np.concatenate(ys, axis=1)
        gram = (stacked * w[:, None]).T @ stacked / (4 * np.pi)
        np.testing.assert_allclose(gram, np.eye(stacked.shape[1]), atol=1e-12)

    def test_against_scipy(self, rng):
        u = rng.normal(size=(50, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        ours = spherical_harmonics(u, L_MAX)
        for l in range(L_MAX + 1):
            np.testing.assert_allclose(ours[l], scipy_real_harmonics(u, l),
                                       atol=1e-12)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="undefined direction"):
            spherical_harmonics(np.zeros((1, 3)), 2)

    def test_non_unit_rejected(self):
        with pytest.raises(ValueError, match="not normalized"):
            spherical_harmonics(np.array([[2.0, 0.0, 0.0]]), 1)

    def test_tape_matches_numpy(self, rng):
        u = rng.normal(size=(10, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        tape = Tape()
        on_tape = spherical_harmonics(tape.leaf(u), 3)
        plain = spherical_harmonics(u, 3)
        for a, b in zip(on_tape, plain):
            np.testing.assert_array_equal(a.value, b)

    def test_gradient_matches_finite_differences(self, rng):
        u = rng.normal(size=(4, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        proj = rng.normal(size=(4, 7))

        def val(arr):
            return float((spherical_harmonics(arr, 3)[3] * proj).sum())

        tape = Tape()
        ud = tape.leaf(u)
        out = ag.sum_all(spherical_harmonics(ud, 3)[3] * proj)
        (g,) = ag.backward(out, [ud])
        h = 1e-6
        fd = np.zeros_like(u)
        for i in range(u.size):
            up, um = u.copy(), u.copy()
            up.reshape(-1)[i] += h
            um.reshape(-1)[i] -= h
            # renormalization is part of the caller; evaluate off-sphere values
            # by scaling back onto the sphere
            up /= np.linalg.norm(up, axis=1, keepdims=True)
            um /= np.linalg.norm(um, axis=1, keepdims=True)
            fd.reshape(-1)[i] = (val(up) - val(um)) / (2 * h)
        # compare the tangential projection: the tape gradient is for the raw
        # components while fd is on the renormalized sphere
        for row in range(4):
            tangential = g.value[row] - (g.value[row] @ u[row]) * u[row]
            assert np.abs(tangential - fd[row]).max() < 1e-5


class TestWigner:
    def test_identity(self):
        for l in range(L_MAX + 1):
            np.testing.assert_allclose(wigner_from_samples(l, np.eye(3)),
                                       np.eye(2 * l + 1), atol=1e-10)

    def test_rotation_is_orthogonal_det_one(self, rng):
        rot = random_rotation(rng)
        d = wigner_from_samples(1, rot)
        np.testing.assert_allclose(d @ d.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(d) == pytest.approx(1.0, abs=1e-10)

    def test_inversion_parity(self):
        for l in range(L_MAX + 1):
            d = wigner_from_samples(l, -np.eye(3))
            np.testing.assert_allclose(d, (-1) ** l * np.eye(2 * l + 1), atol=1e-10)

    def test_harmonics_equivariance_proper_and_improper(self, rng):
        u = rng.normal(size=(50, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        for improper in (False, True):
            rot = random_rotation(rng, improper=improper)
            ys = spherical_harmonics(u, L_MAX)
            ys_rot = spherical_harmonics(u @ rot.T, L_MAX)
            for l in range(L_MAX + 1):
                d = wigner_from_samples(l, rot)
                assert np.abs(ys_rot[l] - ys[l] @ d.T).max() < 1e-9

    def test_non_orthogonal_rejected(self):
        with pytest.raises(ValueError, match="O\\(3\\)"):
            wigner_from_samples(1, np.eye(3) * 2.0)


class TestClebschGordan:
    def test_scalar_block(self):
        cg = clebsch_gordan(2)
        np.testing.assert_allclose(cg.block(0, 0, 0), np.ones((1, 1, 1)))

    def test_triangle_rule(self):
        cg = clebsch_gordan(3)
        assert cg.block(0, 1, 3) is None
        assert (0, 1, 3) not in cg.blocks
        for (l1, l2, l3) in cg.blocks:
            assert abs(l1 - l2) <= l3 <= l1 + l2

    def test_l_max_bound(self):
        with pytest.raises(ValueError):
            clebsch_gordan(5)

    def test_cross_product_block(self, rng):
        c = clebsch_gordan(1).block(1, 1, 1)
        a, b = rng.normal(size=3), rng.normal(size=3)
        coupled = np.einsum("abk,a,b->k", c, a[[1, 2, 0]], b[[1, 2, 0]])
        cross = np.cross(a, b)[[1, 2, 0]]
        ratios = coupled / cross
        np.testing.assert_allclose(ratios, ratios[0], rtol=1e-10)
        assert abs(abs(ratios[0]) - 1 / np.sqrt(2)) < 1e-12

    def test_orthogonality(self):
        cg = clebsch_gordan(3)
        for (l1, l2, l3), c in cg.blocks.items():
            gram = np.einsum("abk,abl->kl", c, c)
            np.testing.assert_allclose(gram, np.eye(2 * l3 + 1), atol=1e-12)

    def test_cross_l3_orthogonality(self):
        cg = clebsch_gordan(3)
        for l3 in (0, 1):
            for l3p in range(l3 + 1, 4):
                a = cg.block(1, 2, l3)
                b = cg.block(1, 2, l3p)
                if a is None or b is None:
                    continue
                overlap = np.einsum("abk,abl->kl", a, b)
                assert np.abs(overlap).max() < 1e-12

    def test_intertwines_wigner_matrices(self, rng):
        cg = clebsch_gordan(3)
        rot = random_rotation(rng)
        for (l1, l2, l3), c in cg.blocks.items():
            d1 = wigner_from_samples(l1, rot)
            d2 = wigner_from_samples(l2, rot)
            d3 = wigner_from_samples(l3, rot)
            lhs = np.einsum("abk,ax,by->xyk", c, d1, d2)
            rhs = np.einsum("abc,kc->abk", c, d3)
            assert np.abs(lhs - rhs).max() < 1e-12

    def test_entries_iterator(self):
        cg = clebsch_gordan(1)
        entries = list(cg.entries())
        assert (0, 0, 0, 0, 0, 0, 1.0) in entries
        for l1, l2, l3, m1, m2, m3, coeff in entries:
            assert abs(coeff) > 1e-14
            assert abs(m1) <= l1 and abs(m2) <= l2 and abs(m3) <= l3


class TestLayoutAndFeature:
    def test_dimension(self):
        layout = IrrepsLayout([(8, 0), (4, 1), (2, 2)])
        assert layout.dim == 8 + 12 + 10

    def test_l_ordering_enforced(self):
        with pytest.raises(ValueError, match="non-decreasing"):
            IrrepsLayout([(4, 1), (8, 0)])

    def test_data_width_checked(self):
        layout = IrrepsLayout([(2, 0)])
        with pytest.raises(ValueError, match="width"):
            IrrepsFeature(layout, np.zeros((3, 5)))


class TestTensorProduct:
    def _setup(self, rng, n=5):
        layout = IrrepsLayout([(3, 0), (2, 1), (2, 2), (1, 3)])
        f = IrrepsFeature(layout, rng.normal(size=(n, layout.dim)))
        u = rng.normal(size=(n, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        harmonics = spherical_harmonics(u, 3)
        paths = tp_path_list(layout, 3, 3)
        weights = [np.array([rng.normal()]) for _ in paths]
        return f, u, harmonics, weights

    def test_parity_selection_rule(self):
        layout = IrrepsLayout([(1, 0), (1, 1)])
        for _bi, l2, l3 in tp_path_list(layout, 3, 3):
            pass
        ls = [(layout.blocks[bi][1], l2, l3)
              for bi, l2, l3 in tp_path_list(layout, 3, 3)]
        assert all((l1 + l2 + l3) % 2 == 0 for l1, l2, l3 in ls)
        assert all(abs(l1 - l2) <= l3 <= l1 + l2 for l1, l2, l3 in ls)

    def test_zero_weights_zero_output(self, rng):
        f, _u, harmonics, weights = self._setup(rng)
        out = tensor_product(f, harmonics, [w * 0 for w in weights], 3)
        assert np.abs(out.data).max() == 0.0

    def test_scalar_path_is_plain_product(self, rng):
        layout = IrrepsLayout([(2, 0)])
        f = IrrepsFeature(layout, rng.normal(size=(4, 2)))
        u = rng.normal(size=(4, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        w = np.array([1.7])
        out = tensor_product(f, spherical_harmonics(u, 0), [w], 0)
        np.testing.assert_allclose(out.data, 1.7 * f.data, atol=1e-14)

    def test_wrong_weight_count(self, rng):
        f, _u, harmonics, weights = self._setup(rng)
        with pytest.raises(ValueError, match="path weights"):
            tensor_product(f, harmonics, weights[:-1], 3)

    def test_equivariance(self, rng):
        f, u, harmonics, weights = self._setup(rng)
        out = tensor_product(f, harmonics, weights, 3)
        for improper in (False, True):
            rot = random_rotation(rng, improper=improper)
            f_rot = rotate_feature(f, rot)
            h_rot = spherical_harmonics(u @ rot.T, 3)
            out_rot = tensor_product(f_rot, h_rot, weights, 3)
            expect = rotate_feature(out, rot)
            assert np.abs(out_rot.data - expect.data).max() < 1e-9

    def test_linear_in_features_and_weights(self, rng):
        f, _u, harmonics, weights = self._setup(rng)
        out1 = tensor_product(f, harmonics, weights, 3)
        f2 = IrrepsFeature(f.layout, 2.0 * f.data)
        out2 = tensor_product(f2, harmonics, weights, 3)
        np.testing.assert_allclose(out2.data, 2 * out1.data, atol=1e-12)
        out3 = tensor_product(f, harmonics, [3.0 * w for w in weights], 3)
        np.testing.assert_allclose(out3.data, 3 * out1.data, atol=1e-12)

    def test_tape_matches_numpy(self, rng):
        f, _u, harmonics, weights = self._setup(rng)
        out_np = tensor_product(f, harmonics, weights, 3)
        tape = Tape()
        f_dt = IrrepsFeature(f.layout, tape.leaf(f.data))
        h_dt = [tape.leaf(h) for h in harmonics]
        w_dt = [tape.leaf(w) for w in weights]
        out_dt = tensor_product(f_dt, h_dt, w_dt, 3)
        np.testing.assert_allclose(out_dt.data.value, out_np.data, atol=1e-13)


class TestGate:
    def test_zero_input_zero_output(self):
        layout = IrrepsLayout([(6, 0), (2, 1)])
        out = gate(IrrepsFeature(layout, np.zeros((3, layout.dim))))
        assert np.abs(out.data).max() == 0.0

    def test_scalar_only_is_silu(self, rng):
        x = rng.normal(size=(4, 5))
        out = gate(IrrepsFeature(IrrepsLayout([(5, 0)]), x))
        expected = x / (1 + np.exp(-x))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_consumes_gate_scalars(self, rng):
        layout = IrrepsLayout([(5, 0), (2, 1), (1, 2)])
        out = gate(IrrepsFeature(layout, rng.normal(size=(2, layout.dim))))
        assert out.layout.blocks == [(2, 0), (2, 1), (1, 2)]

    def test_insufficient_scalars(self, rng):
        layout = IrrepsLayout([(2, 0), (3, 1)])
        with pytest.raises(ValueError, match="insufficient scalar channels"):
            gate(IrrepsFeature(layout, rng.normal(size=(2, layout.dim))))

    def test_commutes_with_rotation(self, rng):
        layout = IrrepsLayout([(8, 0), (2, 1), (2, 2), (1, 3)])
        f = IrrepsFeature(layout, rng.normal(size=(4, layout.dim)))
        for improper in (False, True):
            rot = random_rotation(rng, improper=improper)
            lhs = gate(rotate_feature(f, rot))
            rhs = rotate_feature(gate(f), rot)
            assert np.abs(lhs.data - rhs.data).max() < 1e-9
