"""Physics workflows on top of any potential exposing predict(structure).

Units: positions Angstrom, time fs, mass amu, energy eV. Stress is eV/A^3
internally; elastic moduli are reported in GPa and phonon frequencies in THz
(imaginary modes as negative numbers).
"""

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .crystal import CrystalStructure, apply_strain, make_supercell
from .elements import masses_for

EV = 1.602176634e-19
AMU = 1.66053906660e-27
ACC_CONV = EV / AMU * 1e-20          # (eV/A)/amu -> A/fs^2
EV_PER_AMU_A2_FS2 = 1.0 / ACC_CONV   # amu (A/fs)^2 -> eV
K_B = 8.617333262e-5                 # eV/K
THZ_PER_SQRT = np.sqrt(EV / AMU / 1e-20) / (2.0 * np.pi) / 1e12  # sqrt(eV/A^2/amu) -> THz
GPA_PER_EV_A3 = 160.21766
VOIGT_PAIRS = ((0, 0), (1, 1), (2, 2), (1, 2), (0, 2), (0, 1))


def max_workers():
    env = os.environ.get("HIENET_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def _parallel_map(fn, items):
    workers = max_workers()
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# molecular dynamics


@dataclass
class MDState:
    structure: CrystalStructure
    velocities: np.ndarray  # (n, 3) A/fs
    masses: np.ndarray      # (n,) amu
    time: float = 0.0

    def __post_init__(self):
        if (self.masses <= 0).any():
            raise ValueError("masses must be positive")
        if self.velocities.shape != self.structure.positions.shape:
            raise ValueError("velocity array must match positions")

    @property
    def kinetic_energy(self):
        return 0.5 * float(np.sum(self.masses[:, None] * self.velocities ** 2)) \
            * EV_PER_AMU_A2_FS2

    @property
    def temperature(self):
        n = self.structure.n_atoms
        return max(0.0, 2.0 * self.kinetic_energy / (3.0 * n * K_B))


def init_state(structure, temperature=0.0, seed=0):
    """Maxwell-Boltzmann velocities with zero net momentum at `temperature`."""
    masses = masses_for(structure.atomic_numbers)
    rng = np.random.default_rng(seed)
    if temperature > 0:
        sigma = np.sqrt(K_B * temperature / masses * ACC_CONV)
        v = rng.normal(size=(structure.n_atoms, 3)) * sigma[:, None]
        v -= (masses[:, None] * v).sum(axis=0) / masses.sum()
        state = MDState(structure, v, masses)
        t_now = state.temperature
        if t_now > 0:
            state.velocities *= np.sqrt(temperature / t_now)
    else:
        state = MDState(structure, np.zeros((structure.n_atoms, 3)), masses)
    return state


@dataclass
class MDResult:
    state: MDState
    frames: list          # (time, positions, velocities)
    log: list             # dict rows: step, time, e_pot, e_kin, temperature, e_total


def velocity_verlet_nve(state: MDState, potential, dt, steps, record_frames=True):
    """Constant-energy dynamics with the two-half-kick Verlet scheme.

    Logs total energy each step; the drift over a run measures how well the
    potential conserves energy.
    """
    return _integrate(state, potential, dt, steps, friction=0.0,
                      t_target=0.0, seed=None, record_frames=record_frames)


def langevin_thermostat(state: MDState, potential, dt, steps, t_target,
                        friction, seed=0, record_frames=False):
    """Langevin dynamics (BAOAB splitting); friction in 1/fs.

    friction = 0 reduces exactly to velocity-Verlet NVE.
    """
    if t_target < 0:
        raise ValueError("target temperature must be >= 0")
    return _integrate(state, potential, dt, steps, friction=friction,
                      t_target=t_target, seed=seed, record_frames=record_frames)


def _integrate(state, potential, dt, steps, friction, t_target, seed, record_frames):
    if dt <= 0:
        raise ValueError("time step must be positive")
    struct = state.structure
    v = state.velocities.copy()
    masses = state.masses
    inv_m = ACC_CONV / masses[:, None]
    time = state.time
    rng = np.random.default_rng(seed) if friction > 0 else None
    if friction > 0:
        c1 = np.exp(-friction * dt)
        c2 = np.sqrt(np.maximum(0.0, (1.0 - c1 * c1)) * K_B * t_target
                     * ACC_CONV / masses)[:, None]

    pred = potential.predict(struct)
    frames = []
    log = []

    def _log_row(step):
        e_kin = 0.5 * float(np.sum(masses[:, None] * v ** 2)) * EV_PER_AMU_A2_FS2
        n = struct.n_atoms
        row = {
            "step": step, "time": time, "e_pot": pred.energy, "e_kin": e_kin,
            "temperature": 2.0 * e_kin / (3.0 * n * K_B), "e_total": pred.energy + e_kin,
        }
        log.append(row)

    _log_row(0)
    for step in range(1, steps + 1):
        v = v + 0.5 * dt * pred.forces * inv_m
        if friction > 0:
            pos = struct.positions + 0.5 * dt * v
            v = c1 * v + c2 * rng.normal(size=v.shape)
            pos = pos + 0.5 * dt * v
        else:
            pos = struct.positions + dt * v
        struct = struct.replace(positions=pos)
        pred = potential.predict(struct)
        v = v + 0.5 * dt * pred.forces * inv_m
        time += dt
        _log_row(step)
        if record_frames:
            frames.append((time, struct.positions.copy(), v.copy()))

    return MDResult(MDState(struct, v, masses, time), frames, log)


# ---------------------------------------------------------------------------
# structural relaxation (BFGS with optional cell degrees of freedom)


@dataclass
class RelaxResult:
    structure: CrystalStructure
    converged: bool
    n_steps: int
    log: list  # (step, energy, fmax, smax)


def _voigt_to_strain(v):
    e = np.zeros((3, 3))
    e[0, 0], e[1, 1], e[2, 2] = v[0], v[1], v[2]
    e[1, 2] = e[2, 1] = 0.5 * v[3]
    e[0, 2] = e[2, 0] = 0.5 * v[4]
    e[0, 1] = e[1, 0] = 0.5 * v[5]
    return e


def relax(structure, potential, f_tol=0.1, max_steps=200, relax_cell=False,
          stress_tol=None, max_step_size=0.2):
    """BFGS minimization of the energy over positions (and cell strain).

    Stops when max |F| < f_tol (eV/A) and, with relax_cell, max |sigma| <
    stress_tol (eV/A^3, default f_tol/100). Line search is backtracking
    Armijo, so the energy decreases at every accepted step. Hitting
    max_steps returns the best structure seen with converged=False.
    """
    if f_tol <= 0:
        raise ValueError("force tolerance must be positive")
    stress_tol = f_tol / 100.0 if stress_tol is None else stress_tol
    n = structure.n_atoms
    ref_pos = structure.positions.copy()
    ref_lat = structure.lattice.copy()
    cell_scale = structure.volume ** (1.0 / 3.0)

    def unpack(x):
        u = x[:3 * n].reshape(n, 3)
        if relax_cell:
            eps = _voigt_to_strain(x[3 * n:] / cell_scale)
            deform = np.eye(3) + eps
            return CrystalStructure(structure.atomic_numbers,
                                    u @ deform, ref_lat @ deform), deform
        return structure.replace(positions=u), np.eye(3)

    def evaluate(x):
        struct, deform = unpack(x)
        pred = potential.predict(struct)
        grad_pos = -pred.forces @ deform
        fmax = np.abs(pred.forces).max() if n else 0.0
        smax = np.abs(pred.stress).max()
        if relax_cell:
            vol = struct.volume
            g_mat = vol * np.linalg.inv(deform) @ pred.stress
            g_mat = 0.5 * (g_mat + g_mat.T)
            g_cell = np.array([g_mat[i, j] for i, j in VOIGT_PAIRS]) / cell_scale
            grad = np.concatenate([grad_pos.reshape(-1), g_cell])
        else:
            grad = grad_pos.reshape(-1)
        return pred.energy, grad, struct, fmax, smax

    def done(fmax, smax):
        return fmax < f_tol and (not relax_cell or smax < stress_tol)

    x = np.concatenate([ref_pos.reshape(-1), np.zeros(6)]) if relax_cell \
        else ref_pos.reshape(-1).copy()
    energy, grad, struct, fmax, smax = evaluate(x)
    log = [(0, energy, fmax, smax)]
    best = (energy, struct)
    if done(fmax, smax):
        return RelaxResult(struct, True, 0, log)

    dim = x.size
    h_inv = np.eye(dim)
    for step in range(1, max_steps + 1):
        direction = -h_inv @ grad
        gd = float(grad @ direction)
        if gd >= 0:  # lost positive-definiteness; restart from steepest descent
            h_inv = np.eye(dim)
            direction = -grad
            gd = float(grad @ direction)
        biggest = np.abs(direction[:3 * n].reshape(n, 3)).max() if n else 0.0
        alpha = min(1.0, max_step_size / biggest) if biggest > 0 else 1.0
        success = False
        for _ in range(30):
            x_new = x + alpha * direction
            e_new, g_new, s_new, fmax_new, smax_new = evaluate(x_new)
            if e_new <= energy + 1e-4 * alpha * gd:
                success = True
                break
            alpha *= 0.5
        if not success:
            break
        s_vec = x_new - x
        y_vec = g_new - grad
        sy = float(s_vec @ y_vec)
        if sy > 1e-12:
            rho = 1.0 / sy
            v_outer = np.eye(dim) - rho * np.outer(s_vec, y_vec)
            h_inv = v_outer @ h_inv @ v_outer.T + rho * np.outer(s_vec, s_vec)
        x, energy, grad, struct, fmax, smax = x_new, e_new, g_new, s_new, fmax_new, smax_new
        log.append((step, energy, fmax, smax))
        if energy < best[0]:
            best = (energy, struct)
        if done(fmax, smax):
            return RelaxResult(struct, True, step, log)

    return RelaxResult(best[1], False, len(log) - 1, log)


# ---------------------------------------------------------------------------
# finite-displacement phonons


@dataclass
class ForceConstants:
    """Supercell force constants Phi (3N x 3N, eV/A^2) plus the cell mapping."""

    matrix: np.ndarray
    supercell_diag: np.ndarray
    cells: np.ndarray         # (ncells, 3) integer cell offsets, lexicographic
    n_primitive: int
    displacement: float


@dataclass
class PhononResult:
    q_points: np.ndarray      # (nq, 3) fractional
    frequencies: np.ndarray   # (nq, 3n) THz, ascending; imaginary as negative
    force_constants: ForceConstants


def finite_displacement_phonons(structure, potential, supercell_diag=(2, 2, 2),
                                displacement=0.01, q_points=((0.0, 0.0, 0.0),),
                                force_warn=1.0):
    """Phonon frequencies from central finite differences of forces.

    The structure should be relaxed first; a residual force above
    `force_warn` (eV/A) triggers a warning. Frequencies at each fractional
    q-point are returned in THz with imaginary modes reported as negative.
    """
    if displacement <= 0:
        raise ValueError("displacement must be positive")
    diag = np.asarray(supercell_diag, dtype=np.int64)
    n = structure.n_atoms
    sc = make_supercell(structure, diag)
    n_sc = sc.n_atoms
    ncells = n_sc // n
    cells = np.stack(np.meshgrid(
        np.arange(diag[0]), np.arange(diag[1]), np.arange(diag[2]), indexing="ij"
    ), axis=-1).reshape(-1, 3)

    base_forces = potential.predict(sc).forces
    fmax = np.abs(base_forces).max()
    if fmax > force_warn:
        warnings.warn(f"structure not relaxed: max |F| = {fmax:.3g} eV/A")

    tasks = [(a, axis) for a in range(n) for axis in range(3)]

    def _row(task):
        a, axis = task
        plus = sc.positions.copy()
        plus[a, axis] += displacement
        minus = sc.positions.copy()
        minus[a, axis] -= displacement
        f_plus = potential.predict(sc.replace(positions=plus)).forces
        f_minus = potential.predict(sc.replace(positions=minus)).forces
        return -(f_plus - f_minus).reshape(-1) / (2.0 * displacement)

    rows = _parallel_map(_row, tasks)
    phi_prim = np.stack(rows)  # (3n, 3N): source atom in cell 0

    # expand to the full supercell matrix by lattice translations
    full = np.zeros((3 * n_sc, 3 * n_sc))
    cell_index = {tuple(c): ci for ci, c in enumerate(cells)}
    phi_blocks = phi_prim.reshape(n, 3, n_sc, 3)
    for ci, c in enumerate(cells):
        for cj, cj_vec in enumerate(cells):
            ck = cell_index[tuple((cj_vec - c) % diag)]
            for a in range(n):
                i_row = (ci * n + a) * 3
                for b in range(n):
                    j_col = (cj * n + b) * 3
                    full[i_row:i_row + 3, j_col:j_col + 3] = \
                        phi_blocks[a, :, ck * n + b, :]
    fc = ForceConstants(full, diag, cells, n, displacement)

    masses = masses_for(structure.atomic_numbers)
    inv_sqrt_m = 1.0 / np.sqrt(masses)
    q_points = np.atleast_2d(np.asarray(q_points, dtype=np.float64))
    freqs = np.empty((len(q_points), 3 * n))
    for qi, q in enumerate(q_points):
        dyn = np.zeros((3 * n, 3 * n), dtype=complex)
        for ci, c in enumerate(cells):
            phase = np.exp(2j * np.pi * float(q @ c))
            for a in range(n):
                for b in range(n):
                    dyn[3 * a:3 * a + 3, 3 * b:3 * b + 3] += (
                        phi_blocks[a, :, ci * n + b, :] * phase
                        * inv_sqrt_m[a] * inv_sqrt_m[b]
                    )
        herm_err = np.abs(dyn - dyn.conj().T).max()
        if herm_err > 1e-6:
            raise ValueError(f"non-Hermitian dynamical matrix: {herm_err:.3e}")
        dyn = 0.5 * (dyn + dyn.conj().T)
        eigvals = np.linalg.eigvalsh(dyn)
        freqs[qi] = np.sign(eigvals) * np.sqrt(np.abs(eigvals)) * THZ_PER_SQRT
    return PhononResult(q_points, freqs, fc)


# ---------------------------------------------------------------------------
# elastic constants


@dataclass
class ElasticResult:
    stiffness: np.ndarray  # 6x6 Voigt, GPa
    k_voigt: float
    k_reuss: float
    k_vrh: float
    fit_r2: np.ndarray     # per-mode goodness of the linear stress-strain fit


def voigt_reuss_hill(stiffness):
    """Bulk-modulus bounds and their average from a 6x6 stiffness matrix."""
    c = 0.5 * (np.asarray(stiffness, dtype=np.float64) + np.asarray(stiffness).T)
    k_voigt = (c[0, 0] + c[1, 1] + c[2, 2]
               + 2.0 * (c[0, 1] + c[0, 2] + c[1, 2])) / 9.0
    try:
        s = np.linalg.inv(c)
    except np.linalg.LinAlgError:
        raise ValueError("singular matrix") from None
    denom = s[0, 0] + s[1, 1] + s[2, 2] + 2.0 * (s[0, 1] + s[0, 2] + s[1, 2])
    if abs(denom) < 1e-14 or not np.isfinite(s).all():
        raise ValueError("singular matrix")
    k_reuss = 1.0 / denom
    return float(k_voigt), float(k_reuss), float(0.5 * (k_voigt + k_reuss))


def elastic_tensor(structure, potential, normal_strains=(-0.01, -0.005, 0.005, 0.01),
                   shear_strains=(-0.06, -0.03, 0.03, 0.06)) -> ElasticResult:
    """Stiffness tensor from linear fits of stress against applied strain.

    Normal and shear Voigt modes use their respective strain magnitude sets;
    shear magnitudes are engineering strains (the symmetric tensor gets s/2
    off-diagonal). The structure is assumed relaxed.
    """
    c = np.zeros((6, 6))
    r2 = np.zeros(6)

    def _mode(mode):
        mags = normal_strains if mode < 3 else shear_strains
        responses = []
        for s in mags:
            v = np.zeros(6)
            v[mode] = s
            strained = apply_strain(structure, _voigt_to_strain(v))
            sigma = potential.predict(strained).stress * GPA_PER_EV_A3
            responses.append([sigma[i, j] for i, j in VOIGT_PAIRS])
        mags_arr = np.asarray(mags)
        resp = np.asarray(responses)  # (n_mag, 6)
        a = np.stack([mags_arr, np.ones_like(mags_arr)], axis=1)
        coef, *_ = np.linalg.lstsq(a, resp, rcond=None)
        fitted = a @ coef
        ss_res = float(((resp - fitted) ** 2).sum())
        ss_tot = float(((resp - resp.mean(axis=0)) ** 2).sum())
        r2_mode = 1.0 - ss_res / ss_tot if ss_tot > 0 else 0.0
        return coef[0], r2_mode

    results = _parallel_map(_mode, list(range(6)))
    for mode, (slope, r2_mode) in enumerate(results):
        c[:, mode] = slope
        r2[mode] = r2_mode

    k_v, k_r, k_vrh = voigt_reuss_hill(c)
    return ElasticResult(c, k_v, k_r, k_vrh, r2)
