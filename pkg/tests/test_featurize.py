import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hienet.autograd as ag
from hienet.autograd import Tape
from hienet.featurize import bessel_embed, embed_nodes, envelope


class TestEnvelope:
    def test_value_at_zero(self):
        assert envelope(0.0) == pytest.approx(1.0, abs=1e-15)

    def test_zero_at_and_beyond_cutoff(self):
        assert envelope(1.0) == 0.0
        assert envelope(1.5) == 0.0
        assert envelope(np.array([0.999999, 1.0, 2.0]))[1:].max() == 0.0

    def test_first_and_second_derivative_vanish_at_cutoff(self):
        # f(1) = f'(1) = f''(1) = 0 is equivalent to cubic decay of f(1 - d):
        # the leading Taylor term is -f'''(1) d^3 / 6 = 56 d^3 for p = 6
        for delta in (1e-2, 1e-3, 1e-4):
            val = envelope(1.0 - delta)
            assert abs(val) < 100 * delta ** 3
        assert envelope(1.0 - 1e-3) == pytest.approx(56e-9, rel=0.05)

    def test_closed_form_midpoint(self):
        # p = 6: 1 - 28 d^6 + 48 d^7 - 21 d^8 at d = 1/2
        assert envelope(0.5, p=6) == pytest.approx(0.85546875, abs=1e-15)

    @given(st.floats(0.0, 0.999), st.integers(1, 8))
    @settings(max_examples=60, deadline=None)
    def test_bounded_on_unit_interval(self, d, p):
        val = envelope(d, p)
        assert -1e-12 <= val <= 1.0 + 1e-12

    def test_invalid_exponent(self):
        with pytest.raises(ValueError):
            envelope(0.5, p=0)

    def test_tape_matches_numpy(self):
        d = np.linspace(0.05, 1.2, 13).reshape(-1, 1)
        tape = Tape()
        on_tape = envelope(tape.leaf(d))
        np.testing.assert_array_equal(on_tape.value, envelope(d))


class TestBesselEmbed:
    def test_zero_at_cutoff(self):
        h = bessel_embed(np.array([5.0]), 5.0, 8)
        np.testing.assert_array_equal(h, np.zeros((1, 8)))

    def test_closed_form_value(self):
        # r_cut=5, n=1, r=2.5: 2 sin(pi/2)/(5*2.5) * f_poly(1/2)
        h = bessel_embed(np.array([2.5]), 5.0, 8)
        assert h[0, 0] == pytest.approx(0.16 * 0.85546875, abs=1e-12)
        assert h[0, 0] == pytest.approx(0.136875, abs=1e-9)

    def test_continuity_at_cutoff(self):
        h = bessel_embed(np.array([5.0 - 1e-7]), 5.0, 8)
        assert np.abs(h).max() < 1e-5

    def test_smooth_derivative_across_interior(self):
        # central-difference derivative stays bounded near the cutoff
        r = np.linspace(4.0, 4.9999, 200)
        h = bessel_embed(r, 5.0, 8)
        dh = np.diff(h, axis=0) / np.diff(r)[:, None]
        interior = np.abs(bessel_embed(np.array([2.5]), 5.0, 8)).max()
        assert np.abs(dh[-1]).max() < 1e-2 * interior + 1e-8

    def test_zero_distance_rejected(self):
        with pytest.raises(ValueError, match="coincident atoms"):
            bessel_embed(np.array([0.0]), 5.0, 8)

    def test_tape_gradient_matches_fd(self, rng):
        r = rng.uniform(1.0, 4.5, size=(6, 1))
        proj = rng.normal(size=(6, 8))
        tape = Tape()
        rd = tape.leaf(r)
        out = ag.sum_all(bessel_embed(rd, 5.0, 8) * proj)
        (g,) = ag.backward(out, [rd])
        h = 1e-6
        fd = np.zeros_like(r)
        for i in range(r.size):
            rp, rm = r.copy(), r.copy()
            rp.reshape(-1)[i] += h
            rm.reshape(-1)[i] -= h
            fd.reshape(-1)[i] = ((bessel_embed(rp.ravel(), 5.0, 8) * proj).sum()
                                 - (bessel_embed(rm.ravel(), 5.0, 8) * proj).sum()) / (2 * h)
        assert np.abs(g.value - fd).max() / np.abs(fd).max() < 1e-6

    def test_depends_only_on_distance(self, rng):
        # identical distances from different directions embed identically
        r = np.array([2.2, 2.2, 2.2])
        h = bessel_embed(r, 5.0, 8)
        assert np.abs(h - h[0]).max() == 0.0


class TestEmbedNodes:
    def test_one_hot_identity(self):
        w = np.eye(118)
        out = embed_nodes([1, 6, 118], w)
        expected = np.zeros((3, 118))
        expected[0, 0] = expected[1, 5] = expected[2, 117] = 1.0
        np.testing.assert_array_equal(out, expected)

    def test_same_element_same_embedding(self, rng):
        w = rng.normal(size=(16, 118))
        out = embed_nodes([29, 13, 29], w)
        np.testing.assert_array_equal(out[0], out[2])

    def test_unknown_element(self, rng):
        with pytest.raises(ValueError, match="unknown element"):
            embed_nodes([0], rng.normal(size=(4, 118)))

    def test_gradient_is_one_hot_count(self, rng):
        w = rng.normal(size=(8, 118))
        z = np.array([29, 29, 13])
        tape = Tape()
        wd = tape.leaf(w)
        out = ag.sum_all(embed_nodes(z, wd))
        (g,) = ag.backward(out, [wd])
        counts = np.zeros((8, 118))
        counts[:, 28] = 2.0
        counts[:, 12] = 1.0
        np.testing.assert_array_equal(g.value, counts)
        # cross-check against finite differences on a few entries
        h = 1e-6
        for idx in [(0, 28), (3, 12), (2, 50)]:
            wp, wm = w.copy(), w.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = (embed_nodes(z, wp).sum() - embed_nodes(z, wm).sum()) / (2 * h)
            assert abs(fd - counts[idx]) < 1e-6
