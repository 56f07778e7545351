"""Edge and node embeddings: enveloped Bessel radial basis and element lookup.

The radial basis of an edge at distance r inside cutoff R_c is

    h_n(r) = 2 sin(n pi r / R_c) / (R_c r) * f_poly(r / R_c),   n = 1..n_bessel

with the polynomial envelope f_poly making the basis (and its first two
derivatives) vanish at the cutoff, which is what keeps the predicted energy
surface continuously differentiable as neighbors cross R_c.
"""

import numpy as np

from . import autograd as ag
from .autograd import DiffTensor


def envelope(d, p=6):
    """Smooth cutoff polynomial of the scaled distance d = r / R_c.

    Equals 1 at d=0 and decays to 0 at d=1 with zero first and second
    derivatives there; identically 0 for d >= 1. Accepts floats, numpy
    arrays, or DiffTensors.
    """
    if p < 1:
        raise ValueError("envelope exponent must be >= 1")
    c1 = -(p + 1.0) * (p + 2.0) / 2.0
    c2 = p * (p + 2.0)
    c3 = -p * (p + 1.0) / 2.0
    if isinstance(d, DiffTensor):
        dp = d ** float(p)
        poly = 1.0 + c1 * dp + c2 * (dp * d) + c3 * (dp * d * d)
        return ag.where(d.value < 1.0, poly, d * 0.0)
    d = np.asarray(d, dtype=np.float64)
    dp = d ** p
    poly = 1.0 + c1 * dp + c2 * dp * d + c3 * dp * d * d
    result = np.where(d < 1.0, poly, 0.0)
    return result if result.ndim else float(result)


def bessel_embed(r, r_cut, n_bessel=8, p=6):
    """Enveloped Bessel features of edge lengths; (E, 1) in, (E, n_bessel) out."""
    if isinstance(r, DiffTensor):
        if r.value.size and r.value.min() <= 1e-12:
            raise ValueError("coincident atoms")
        freq = np.arange(1, n_bessel + 1) * (np.pi / r_cut)
        radial = ag.sin(r * freq.reshape(1, -1)) * (2.0 / r_cut / r)
        return radial * envelope(r * (1.0 / r_cut), p)
    r = np.asarray(r, dtype=np.float64).reshape(-1, 1)
    if r.size and r.min() <= 1e-12:
        raise ValueError("coincident atoms")
    freq = np.arange(1, n_bessel + 1) * (np.pi / r_cut)
    radial = np.sin(r * freq) * (2.0 / (r_cut * r))
    return radial * envelope(r / r_cut, p)


def embed_nodes(atomic_numbers, w_emb):
    """Per-node embeddings: column z of the (d, 118) embedding matrix.

    On a tape, `w_emb` is a DiffTensor and the lookup is differentiable in
    the embedding weights.
    """
    z = np.asarray(atomic_numbers, dtype=np.int64)
    if z.size and (z.min() < 1 or z.max() > 118):
        raise ValueError(f"unknown element {int(z.min() if z.min() < 1 else z.max())}")
    if isinstance(w_emb, DiffTensor):
        return ag.gather(ag.transpose(w_emb), z - 1)
    return np.asarray(w_emb, dtype=np.float64).T[z - 1]
