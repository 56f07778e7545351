"""Extended-XYZ reading and writing.

Frame layout: first line is the atom count; the comment line carries
`Lattice="..."` (row-major, rows are lattice vectors), a `Properties=`
column spec such as `species:S:1:pos:R:3:forces:R:3`, and optional
`energy=<eV>` / `stress="9 numbers"` (eV/A^3) fields. Numbers are written
with 17 significant digits so structures round-trip exactly. Files are
written atomically (temp file + rename).
"""

import os
import re
import tempfile
from dataclasses import dataclass

import numpy as np

from .crystal import CrystalStructure
from .elements import number_of, symbol_of

_KV_RE = re.compile(r'([A-Za-z_][A-Za-z0-9_]*)=("(?:[^"]*)"|\S+)')


@dataclass
class Frame:
    structure: CrystalStructure
    energy: float = None
    forces: np.ndarray = None
    stress: np.ndarray = None


def _fmt(x):
    return f"{float(x):.17g}"


def atomic_write_text(path, text):
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def frames_to_text(frames):
    chunks = []
    for frame in frames:
        s = frame.structure
        lattice = " ".join(_fmt(v) for v in s.lattice.reshape(-1))
        props = "species:S:1:pos:R:3"
        if frame.forces is not None:
            props += ":forces:R:3"
        comment = f'Lattice="{lattice}" Properties={props}'
        if frame.energy is not None:
            comment += f" energy={_fmt(frame.energy)}"
        if frame.stress is not None:
            stress = " ".join(_fmt(v) for v in np.asarray(frame.stress).reshape(-1))
            comment += f' stress="{stress}"'
        lines = [str(s.n_atoms), comment]
        for i in range(s.n_atoms):
            cols = [symbol_of(int(s.atomic_numbers[i]))]
            cols += [_fmt(v) for v in s.positions[i]]
            if frame.forces is not None:
                cols += [_fmt(v) for v in frame.forces[i]]
            lines.append(" ".join(cols))
        chunks.append("\n".join(lines))
    return "\n".join(chunks) + "\n"


def write_xyz(path, frames):
    if isinstance(frames, Frame):
        frames = [frames]
    atomic_write_text(path, frames_to_text(frames))


def _parse_comment(comment):
    fields = {}
    for key, raw in _KV_RE.findall(comment):
        fields[key] = raw[1:-1] if raw.startswith('"') else raw
    return fields


def _parse_properties(spec):
    parts = spec.split(":")
    if len(parts) % 3:
        raise ValueError(f"malformed Properties spec {spec!r}")
    columns = []
    for i in range(0, len(parts), 3):
        columns.append((parts[i], parts[i + 1], int(parts[i + 2])))
    return columns


def read_xyz(path):
    """Parse every frame in an extended-XYZ file."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    frames = []
    pos = 0
    while pos < len(lines):
        if not lines[pos].strip():
            pos += 1
            continue
        n = int(lines[pos].strip())
        comment = lines[pos + 1] if pos + 1 < len(lines) else ""
        fields = _parse_comment(comment)
        if "Lattice" not in fields:
            raise ValueError("frame missing Lattice field")
        lattice = np.fromstring(fields["Lattice"], sep=" ").reshape(3, 3)
        columns = _parse_properties(fields.get("Properties", "species:S:1:pos:R:3"))

        species, positions, forces = [], [], []
        has_forces = any(name == "forces" for name, _, _ in columns)
        for row in range(n):
            toks = lines[pos + 2 + row].split()
            cursor = 0
            for name, _kind, width in columns:
                vals = toks[cursor:cursor + width]
                cursor += width
                if name == "species":
                    species.append(number_of(vals[0]))
                elif name == "pos":
                    positions.append([float(v) for v in vals])
                elif name == "forces":
                    forces.append([float(v) for v in vals])
        structure = CrystalStructure(species, np.array(positions), lattice)
        frame = Frame(structure)
        if has_forces:
            frame.forces = np.array(forces)
        if "energy" in fields:
            frame.energy = float(fields["energy"])
        if "stress" in fields:
            frame.stress = np.fromstring(fields["stress"], sep=" ").reshape(3, 3)
        frames.append(frame)
        pos += 2 + n
    return frames


def frames_from_samples(samples):
    return [Frame(s.structure, s.energy, s.forces, s.stress) for s in samples]


def samples_from_frames(frames):
    from .training import LabeledSample

    samples = []
    for f in frames:
        if f.energy is None or f.forces is None or f.stress is None:
            raise ValueError("labeled dataset frames need energy, forces, and stress")
        samples.append(LabeledSample(f.structure, f.energy, f.forces, f.stress))
    return samples
