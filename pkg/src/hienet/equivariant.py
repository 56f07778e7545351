"""Real spherical harmonics, Clebsch-Gordan coupling, and irreps features.

Conventions, fixed once and tested:
  * real harmonics with component normalization, ||Y^l(u)||^2 = 2l+1;
  * m runs -l..l; for l=1 that is the (y, z, x) component order;
  * coupling coefficients are orthonormal per output component,
    sum_{m1,m2} C[m1,m2,m3] C[m1,m2,m3'] = delta(m3, m3').

Functions accepting feature data work on plain numpy arrays or on
:class:`~hienet.autograd.DiffTensor` values; the tape variants are what the
model differentiates through.
"""

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import factorial, sqrt

import numpy as np

from . import autograd as ag
from .autograd import DiffTensor

SQ3 = sqrt(3.0)
SQ5 = sqrt(5.0)
SQ7 = sqrt(7.0)
SQ10 = sqrt(10.0)
SQ15 = sqrt(15.0)
SQ35 = sqrt(35.0)
SQ42 = sqrt(42.0)
SQ70 = sqrt(70.0)
SQ105 = sqrt(105.0)


def _is_dt(x):
    return isinstance(x, DiffTensor)


def _cat(parts, axis=1):
    if _is_dt(parts[0]):
        return ag.concat(parts, axis=axis)
    return np.concatenate(parts, axis=axis)


def spherical_harmonics(u, l_max):
    """Per-order real spherical harmonics of unit vectors u (n, 3).

    Returns a list [Y^0, ..., Y^l_max] of (n, 2l+1) arrays. Components of
    order l are homogeneous degree-l polynomials of the unit vector, so the
    result is smooth wherever the input direction is defined.
    """
    if l_max > 4:
        raise ValueError("spherical harmonics implemented for l <= 4")
    vals = u.value if _is_dt(u) else np.asarray(u, dtype=np.float64)
    if vals.ndim != 2 or vals.shape[1] != 3:
        raise ValueError(f"expected (n, 3) directions, got {vals.shape}")
    norms = np.linalg.norm(vals, axis=1)
    if vals.shape[0] and norms.min() < 1e-12:
        raise ValueError("undefined direction")
    if vals.shape[0] and np.abs(norms - 1.0).max() > 1e-9:
        raise ValueError("direction not normalized")

    x = u[:, 0:1]
    y = u[:, 1:2]
    z = u[:, 2:3]
    out = [x * 0.0 + 1.0]
    if l_max >= 1:
        out.append(_cat([SQ3 * y, SQ3 * z, SQ3 * x]))
    if l_max >= 2:
        x2, y2, z2 = x * x, y * y, z * z
        out.append(_cat([
            SQ15 * (x * y),
            SQ15 * (y * z),
            (SQ5 / 2.0) * (3.0 * z2 - 1.0),
            SQ15 * (x * z),
            (SQ15 / 2.0) * (x2 - y2),
        ]))
    if l_max >= 3:
        out.append(_cat([
            (SQ70 / 4.0) * (y * (3.0 * x2 - y2)),
            SQ105 * (x * y * z),
            (SQ42 / 4.0) * (y * (5.0 * z2 - 1.0)),
            (SQ7 / 2.0) * (z * (5.0 * z2 - 3.0)),
            (SQ42 / 4.0) * (x * (5.0 * z2 - 1.0)),
            (SQ105 / 2.0) * (z * (x2 - y2)),
            (SQ70 / 4.0) * (x * (x2 - 3.0 * y2)),
        ]))
    if l_max >= 4:
        out.append(_cat([
            (3.0 * SQ35 / 2.0) * (x * y * (x2 - y2)),
            (3.0 * SQ70 / 4.0) * (y * z * (3.0 * x2 - y2)),
            (3.0 * SQ5 / 2.0) * (x * y * (7.0 * z2 - 1.0)),
            (3.0 * SQ10 / 4.0) * (y * z * (7.0 * z2 - 3.0)),
            (3.0 / 8.0) * (35.0 * z2 * z2 - 30.0 * z2 + 3.0),
            (3.0 * SQ10 / 4.0) * (x * z * (7.0 * z2 - 3.0)),
            (3.0 * SQ5 / 4.0) * ((x2 - y2) * (7.0 * z2 - 1.0)),
            (3.0 * SQ70 / 4.0) * (x * z * (x2 - 3.0 * y2)),
            (3.0 * SQ35 / 8.0) * (x2 * x2 - 6.0 * x2 * y2 + y2 * y2),
        ]))
    return out[: l_max + 1]


# ---------------------------------------------------------------------------
# Clebsch-Gordan coupling in the real basis


def _cg_complex(l1, m1, l2, m2, l3, m3):
    """<l1 m1 l2 m2 | l3 m3> from the Racah closed form, exact rationals inside."""
    if m1 + m2 != m3:
        return 0.0
    if not abs(l1 - l2) <= l3 <= l1 + l2:
        return 0.0
    pref = Fraction(
        (2 * l3 + 1)
        * factorial(l1 + l2 - l3) * factorial(l1 - l2 + l3) * factorial(-l1 + l2 + l3),
        factorial(l1 + l2 + l3 + 1),
    )
    pref *= Fraction(
        factorial(l3 + m3) * factorial(l3 - m3)
        * factorial(l1 + m1) * factorial(l1 - m1)
        * factorial(l2 + m2) * factorial(l2 - m2)
    )
    total = Fraction(0)
    for k in range(0, l1 + l2 - l3 + 1):
        denoms = (
            k, l1 + l2 - l3 - k, l1 - m1 - k, l2 + m2 - k,
            l3 - l2 + m1 + k, l3 - l1 - m2 + k,
        )
        if min(denoms) < 0:
            continue
        term = Fraction((-1) ** k, 1)
        for d in denoms:
            term /= factorial(d)
        total += term
    if total == 0:
        return 0.0
    sign = 1.0 if total > 0 else -1.0
    return sign * sqrt(float(pref * total * total))


@lru_cache(maxsize=None)
def _real_basis_matrix(l):
    """U with realY[m] = sum_mu U[m, mu] complexY[mu] (rows/cols offset by +l)."""
    u = np.zeros((2 * l + 1, 2 * l + 1), dtype=complex)
    u[l, l] = 1.0
    for m in range(1, l + 1):
        u[l + m, l + m] = (-1) ** m / sqrt(2.0)
        u[l + m, l - m] = 1.0 / sqrt(2.0)
        u[l - m, l - m] = 1j / sqrt(2.0)
        u[l - m, l + m] = -1j * (-1) ** m / sqrt(2.0)
    return u


@lru_cache(maxsize=None)
def _real_cg_block(l1, l2, l3):
    """Real-basis coupling tensor C[m1, m2, m3], orthonormal over (m1, m2)."""
    cplx = np.zeros((2 * l1 + 1, 2 * l2 + 1, 2 * l3 + 1))
    for a, m1 in enumerate(range(-l1, l1 + 1)):
        for b, m2 in enumerate(range(-l2, l2 + 1)):
            m3 = m1 + m2
            if abs(m3) <= l3:
                cplx[a, b, l3 + m3] = _cg_complex(l1, m1, l2, m2, l3, m3)
    u1 = _real_basis_matrix(l1)
    u2 = _real_basis_matrix(l2)
    u3 = _real_basis_matrix(l3)
    t = np.einsum("cM,am,bn,mnM->abc", u3, u1.conj(), u2.conj(), cplx.astype(complex))
    re, im = np.abs(t.real).max(), np.abs(t.imag).max()
    if im < 1e-12:
        return np.ascontiguousarray(t.real)
    if re < 1e-12:
        return np.ascontiguousarray(t.imag)
    raise RuntimeError(f"real coupling tensor for {(l1, l2, l3)} is not pure")


@dataclass(frozen=True)
class CGTable:
    """Dense real coupling blocks for all (l1, l2, l3) up to l_max."""

    l_max: int
    blocks: dict

    def block(self, l1, l2, l3):
        return self.blocks.get((l1, l2, l3))

    def entries(self, tol=1e-14):
        """Sparse (l1, l2, l3, m1, m2, m3, coefficient) view."""
        for (l1, l2, l3), c in sorted(self.blocks.items()):
            for a in range(c.shape[0]):
                for b in range(c.shape[1]):
                    for d in range(c.shape[2]):
                        if abs(c[a, b, d]) > tol:
                            yield (l1, l2, l3, a - l1, b - l2, d - l3, c[a, b, d])


@lru_cache(maxsize=None)
def clebsch_gordan(l_max):
    if l_max > 4:
        raise ValueError("coupling table limited to l_max <= 4")
    blocks = {}
    for l1 in range(l_max + 1):
        for l2 in range(l_max + 1):
            for l3 in range(abs(l1 - l2), min(l_max, l1 + l2) + 1):
                blocks[(l1, l2, l3)] = _real_cg_block(l1, l2, l3)
    return CGTable(l_max, blocks)


# ---------------------------------------------------------------------------
# irreps-typed features


class IrrepsLayout:
    """Ordered (multiplicity, l) blocks; data dimension is sum mult*(2l+1)."""

    def __init__(self, blocks):
        blocks = [(int(m), int(l)) for m, l in blocks]
        if not blocks:
            raise ValueError("empty layout")
        ls = [l for _, l in blocks]
        if any(m < 1 or l < 0 for m, l in blocks):
            raise ValueError("multiplicities must be >= 1 and l >= 0")
        if ls != sorted(ls):
            raise ValueError("l values must be non-decreasing")
        self.blocks = blocks
        self.dim = sum(m * (2 * l + 1) for m, l in blocks)
        offsets = []
        start = 0
        for m, l in blocks:
            offsets.append(start)
            start += m * (2 * l + 1)
        self.offsets = offsets

    def __eq__(self, other):
        return isinstance(other, IrrepsLayout) and self.blocks == other.blocks

    def __repr__(self):
        return "+".join(f"{m}x{l}" for m, l in self.blocks)

    def slices(self):
        for (m, l), off in zip(self.blocks, self.offsets):
            yield (m, l, slice(off, off + m * (2 * l + 1)))


@dataclass
class IrrepsFeature:
    """Node features grouped by (irrep block, channel, m); data is (n, dim)."""

    layout: IrrepsLayout
    data: object  # numpy array or DiffTensor

    def __post_init__(self):
        if self.data.shape[-1] != self.layout.dim:
            raise ValueError(
                f"feature width {self.data.shape[-1]} does not match layout {self.layout}"
            )

    @property
    def n(self):
        return self.data.shape[0]

    def block(self, index):
        """Block `index` reshaped to (n, mult, 2l+1)."""
        m, l, sl = list(self.layout.slices())[index]
        chunk = self.data[:, sl]
        if _is_dt(chunk):
            return ag.reshape(chunk, (self.n, m, 2 * l + 1))
        return chunk.reshape(self.n, m, 2 * l + 1)


def rotate_feature(feature: IrrepsFeature, rotation) -> IrrepsFeature:
    """Apply the block-diagonal Wigner action of an O(3) element (numpy only)."""
    parts = []
    for i, (m, l, _) in enumerate(feature.layout.slices()):
        d = wigner_from_samples(l, rotation)
        blk = feature.block(i) @ d.T
        parts.append(blk.reshape(feature.n, m * (2 * l + 1)))
    return IrrepsFeature(feature.layout, np.concatenate(parts, axis=1))


def tp_path_list(layout: IrrepsLayout, l_filter_max, l_out_max):
    """Allowed (block_index, l_filter, l_out) triples in deterministic order.

    Selection rules: the triangle inequality plus parity (even l1+l2+l3).
    Features bred from scalars and spherical harmonics are true tensors;
    dropping odd-parity paths keeps them that way, so scalar outputs stay
    invariant under improper operations (inversion, reflections) too.
    """
    paths = []
    for bi, (_, l1) in enumerate(layout.blocks):
        for l2 in range(l_filter_max + 1):
            for l3 in range(abs(l1 - l2), min(l_out_max, l1 + l2) + 1):
                if (l1 + l2 + l3) % 2 == 0:
                    paths.append((bi, l2, l3))
    return paths


def tp_output_layout(layout: IrrepsLayout, l_filter_max, l_out_max) -> IrrepsLayout:
    """Layout of the tensor-product output: path blocks grouped by output l."""
    per_l = {}
    for bi, _l2, l3 in tp_path_list(layout, l_filter_max, l_out_max):
        per_l[l3] = per_l.get(l3, 0) + layout.blocks[bi][0]
    return IrrepsLayout([(per_l[l], l) for l in sorted(per_l)])


def tensor_product(f: IrrepsFeature, harmonics, path_weights, l_out_max=None):
    """Weighted coupling of node features with per-order harmonics.

    Each allowed (input block, filter l, output l) path contributes the CG
    contraction of that block with Y^l, scaled by one weight. `path_weights`
    is indexed like :func:`tp_path_list`; entries may be scalars (shape (1,))
    or per-row weights (shape (n, 1)). Path outputs with the same output
    order are concatenated channel-wise.
    """
    l_filter_max = len(harmonics) - 1
    if l_out_max is None:
        l_out_max = l_filter_max
    paths = tp_path_list(f.layout, l_filter_max, l_out_max)
    if len(path_weights) != len(paths):
        raise ValueError(f"expected {len(paths)} path weights, got {len(path_weights)}")
    cg = clebsch_gordan(max(l_filter_max, l_out_max,
                            max(l for _, l in f.layout.blocks)))
    on_tape = _is_dt(f.data)
    blocks = {}
    collected = {}
    for p, (bi, l2, l3) in enumerate(paths):
        mult, l1 = f.layout.blocks[bi]
        coeffs = cg.block(l1, l2, l3)
        if bi not in blocks:
            blocks[bi] = f.block(bi)
        blk = blocks[bi]
        w = path_weights[p]
        # scale the (cheap) harmonics side; the contraction is linear in it
        if on_tape:
            contrib = ag.tp_fwd(blk, harmonics[l2] * w, coeffs)
            contrib = ag.reshape(contrib, (f.n, mult * (2 * l3 + 1)))
        else:
            y = harmonics[l2] * np.asarray(w, dtype=np.float64)
            contrib = np.einsum("ecm,en,mnk->eck", blk, y, coeffs,
                                optimize=True).reshape(f.n, mult * (2 * l3 + 1))
        collected.setdefault(l3, []).append(contrib)
    parts = []
    out_blocks = []
    for l3 in sorted(collected):
        chunk = collected[l3]
        parts.extend(chunk)
        width = sum(c.shape[1] for c in chunk)
        out_blocks.append((width // (2 * l3 + 1), l3))
    return IrrepsFeature(IrrepsLayout(out_blocks), _cat(parts, axis=1))


def gate(f: IrrepsFeature) -> IrrepsFeature:
    """Equivariant gate: SiLU on scalars, SiLU-activated scalar gates on l > 0.

    The first (total non-scalar channel count) scalar channels are consumed as
    gates, one per non-scalar channel in block order; the remaining scalars
    pass through SiLU and form the output scalar block.
    """
    blocks = f.layout.blocks
    if blocks[0][1] != 0:
        raise ValueError("insufficient scalar channels: layout has no l=0 block")
    n_scalar = blocks[0][0]
    gated = [(m, l) for m, l in blocks[1:]]
    num_gated = sum(m for m, _ in gated)
    if n_scalar <= num_gated and gated:
        raise ValueError(
            f"insufficient scalar channels: need > {num_gated}, have {n_scalar}"
        )
    on_tape = _is_dt(f.data)

    def _silu(x):
        if on_tape:
            return ag.silu(x)
        return x * _np_sigmoid(x)

    scalars = f.data[:, :n_scalar]
    gates = _silu(scalars[:, :num_gated])
    out = [_silu(scalars[:, num_gated:])]
    offset = 0
    for i, (m, l) in enumerate(gated):
        blk = f.block(i + 1)
        gate_cols = gates[:, offset:offset + m]
        if on_tape:
            gate_cols = ag.reshape(gate_cols, (f.n, m, 1))
            scaled = ag.reshape(blk * gate_cols, (f.n, m * (2 * l + 1)))
        else:
            scaled = (blk * gate_cols[:, :, None]).reshape(f.n, m * (2 * l + 1))
        out.append(scaled)
        offset += m
    out_layout = IrrepsLayout([(n_scalar - num_gated, 0)] + gated
                              if gated else [(n_scalar, 0)])
    return IrrepsFeature(out_layout, _cat(out, axis=1))


def _np_sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ev = np.exp(x[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def wigner_from_samples(l, rotation, n_samples=None, seed=1234):
    """Representation matrix D^l with Y^l(R u) = D^l Y^l(u), fit by least squares."""
    rotation = np.asarray(rotation, dtype=np.float64)
    if np.abs(rotation.T @ rotation - np.eye(3)).max() >= 1e-10:
        raise ValueError("not an O(3) element")
    if n_samples is None:
        n_samples = 4 * (2 * l + 1) + 8
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n_samples, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    a = spherical_harmonics(u, l)[l]
    b = spherical_harmonics(u @ rotation.T, l)[l]
    d_t, *_ = np.linalg.lstsq(a, b, rcond=None)
    residual = np.abs(a @ d_t - b).max()
    if residual > 1e-8:
        raise ValueError(f"harmonics not equivariant: residual {residual:.3e}")
    return d_t.T
