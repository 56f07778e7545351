"""Periodic crystal structures and radius-graph construction.

Conventions: the lattice matrix stores the three lattice vectors as rows, and
points transform as row vectors (p' = p @ M). A directed edge (j -> i, k)
carries the displacement r = p_j + k @ L - p_i from atom i to the periodic
image k of atom j.
"""

from dataclasses import dataclass, field

import numpy as np

MAX_IMAGE_RANGE = 64


@dataclass(frozen=True)
class CrystalStructure:
    """Atomic numbers, Cartesian positions (Angstrom) and row-vector lattice."""

    atomic_numbers: np.ndarray
    positions: np.ndarray
    lattice: np.ndarray

    def __post_init__(self):
        z = np.ascontiguousarray(np.asarray(self.atomic_numbers, dtype=np.int64))
        p = np.ascontiguousarray(np.asarray(self.positions, dtype=np.float64))
        lat = np.ascontiguousarray(np.asarray(self.lattice, dtype=np.float64))
        if z.ndim != 1 or z.size < 1:
            raise ValueError("need at least one atom")
        if z.min() < 1 or z.max() > 118:
            raise ValueError("atomic number out of range [1, 118]")
        if p.shape != (z.size, 3):
            raise ValueError(f"positions must have shape ({z.size}, 3), got {p.shape}")
        if lat.shape != (3, 3):
            raise ValueError(f"lattice must be 3x3, got {lat.shape}")
        if not (np.isfinite(p).all() and np.isfinite(lat).all()):
            raise ValueError("non-finite coordinates")
        if abs(np.linalg.det(lat)) <= 1e-8:
            raise ValueError("singular lattice")
        object.__setattr__(self, "atomic_numbers", z)
        object.__setattr__(self, "positions", p)
        object.__setattr__(self, "lattice", lat)

    @property
    def n_atoms(self) -> int:
        return self.atomic_numbers.size

    @property
    def volume(self) -> float:
        return float(abs(np.linalg.det(self.lattice)))

    def replace(self, positions=None, lattice=None, atomic_numbers=None):
        return CrystalStructure(
            self.atomic_numbers if atomic_numbers is None else atomic_numbers,
            self.positions if positions is None else positions,
            self.lattice if lattice is None else lattice,
        )


@dataclass(frozen=True)
class StrainTensor:
    """Unitless 3x3 strain; only the symmetric part deforms a structure."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3) or not np.isfinite(m).all():
            raise ValueError("strain must be a finite 3x3 matrix")
        object.__setattr__(self, "matrix", m)

    @property
    def symmetrized(self) -> np.ndarray:
        return 0.5 * (self.matrix + self.matrix.T)


@dataclass(frozen=True)
class CrystalGraph:
    """Directed periodic radius graph with integer image offsets.

    Edges are sorted by (target, source, image) so downstream numerics are
    reproducible. Reversal closure holds: (j->i, k) implies (i->j, -k).
    """

    n_nodes: int
    cutoff: float
    src: np.ndarray  # (E,) source node j
    dst: np.ndarray  # (E,) target node i
    image: np.ndarray  # (E, 3) integer image offsets
    displacement: np.ndarray  # (E, 3) r = p_src + image @ L - p_dst

    n_edges: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "n_edges", int(self.src.size))

    def neighbor_counts(self) -> np.ndarray:
        return np.bincount(self.dst, minlength=self.n_nodes)


def _image_bounds(lattice: np.ndarray, r_cut: float) -> np.ndarray:
    """Per-axis image search range from the spacing of opposite cell faces."""
    vol = abs(np.linalg.det(lattice))
    bounds = np.empty(3, dtype=np.int64)
    for i in range(3):
        cross = np.cross(lattice[(i + 1) % 3], lattice[(i + 2) % 3])
        spacing = vol / np.linalg.norm(cross)
        bounds[i] = int(np.ceil(r_cut / spacing))
    return bounds


def build_graph(structure: CrystalStructure, r_cut: float,
                max_image_range: int = MAX_IMAGE_RANGE) -> CrystalGraph:
    """All directed edges (j -> i, k) with 0 < |p_j + k @ L - p_i| <= r_cut."""
    if r_cut <= 0:
        raise ValueError("cutoff must be positive")
    lat = structure.lattice
    if abs(np.linalg.det(lat)) <= 1e-8:
        raise ValueError("singular lattice")
    bounds = _image_bounds(lat, r_cut)
    if (bounds > max_image_range).any():
        raise ValueError(
            f"image range overflow: need {bounds.max()} images per axis, "
            f"bound is {max_image_range}"
        )

    n = structure.n_atoms
    # wrap atoms into the home cell so the image bound derived from the cell
    # geometry is valid even for positions that drifted outside it; the
    # integer wrap offsets are folded back into the reported images
    frac = structure.positions @ np.linalg.inv(lat)
    wraps = np.floor(frac).astype(np.int64)
    pos = structure.positions - wraps.astype(np.float64) @ lat

    axes = [np.arange(-b, b + 1, dtype=np.int64) for b in bounds]
    kk = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    shifts = kk.astype(np.float64) @ lat  # (K, 3)

    # delta[k, j, i] = p_j + shift_k - p_i  (wrapped positions)
    delta = (pos[None, :, None, :] + shifts[:, None, None, :]) - pos[None, None, :, :]
    dist2 = np.einsum("kjix,kjix->kji", delta, delta)
    mask = dist2 <= r_cut * r_cut
    image_all = (kk[:, None, None, :] - wraps[None, :, None, :]
                 + wraps[None, None, :, :])  # (K, j, i, 3) adjusted to raw positions
    self_pair = (image_all == 0).all(axis=3) & np.eye(n, dtype=bool)[None, :, :]
    mask &= ~self_pair
    if (dist2[mask] <= 0.0).any():
        raise ValueError("coincident atoms")

    k_idx, j_idx, i_idx = np.nonzero(mask)
    image = image_all[k_idx, j_idx, i_idx]
    order = np.lexsort((image[:, 2], image[:, 1], image[:, 0], j_idx, i_idx))
    k_idx, j_idx, i_idx = k_idx[order], j_idx[order], i_idx[order]
    return CrystalGraph(
        n_nodes=n,
        cutoff=float(r_cut),
        src=np.ascontiguousarray(j_idx),
        dst=np.ascontiguousarray(i_idx),
        image=np.ascontiguousarray(image[order]),
        displacement=np.ascontiguousarray(delta[k_idx, j_idx, i_idx]),
    )


def apply_strain(structure: CrystalStructure, strain) -> CrystalStructure:
    """Deform lattice and positions by I + sym(strain) (right multiplication)."""
    if not isinstance(strain, StrainTensor):
        strain = StrainTensor(np.asarray(strain))
    deform = np.eye(3) + strain.symmetrized
    new_lat = structure.lattice @ deform
    if abs(np.linalg.det(new_lat)) <= 1e-8:
        raise ValueError("collapsed cell")
    return structure.replace(positions=structure.positions @ deform, lattice=new_lat)


def transform(structure: CrystalStructure, rotation: np.ndarray,
              translation=None) -> CrystalStructure:
    """Apply an O(3) rotation/reflection plus a rigid translation."""
    rot = np.asarray(rotation, dtype=np.float64)
    if rot.shape != (3, 3) or np.abs(rot.T @ rot - np.eye(3)).max() >= 1e-10:
        raise ValueError("not an O(3) element")
    b = np.zeros(3) if translation is None else np.asarray(translation, dtype=np.float64)
    return structure.replace(
        positions=structure.positions @ rot.T + b,
        lattice=structure.lattice @ rot.T,
    )


def make_supercell(structure: CrystalStructure, diag) -> CrystalStructure:
    """Replicate along the three lattice vectors (diagonal supercell only).

    Atom order is cell-major: all atoms of cell (0,0,0) first, then (0,0,1), ...
    in lexicographic cell order.
    """
    d = np.asarray(diag, dtype=np.int64)
    if d.shape != (3,) or (d < 1).any():
        raise ValueError("supercell multipliers must be positive integers")
    cells = np.stack(np.meshgrid(
        np.arange(d[0]), np.arange(d[1]), np.arange(d[2]), indexing="ij"
    ), axis=-1).reshape(-1, 3)
    shifts = cells.astype(np.float64) @ structure.lattice
    positions = (structure.positions[None, :, :] + shifts[:, None, :]).reshape(-1, 3)
    numbers = np.tile(structure.atomic_numbers, len(cells))
    lattice = structure.lattice * d[:, None]
    return CrystalStructure(numbers, positions, lattice)
