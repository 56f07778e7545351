"""Command-line interface.

Subcommands: train, evaluate, predict, md, relax, phonon, elastic, bench.
Exit codes: 0 ok, 2 usage/config problem, 3 training divergence, 4
model/data mismatch, 5 relaxation did not converge (output still written).
"""

import argparse
import os
import sys

import numpy as np

from .bench import ablation_csv, run_ablation
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .potential import (
    KBAR_PER_EV_A3,
    CoverageError,
    HIENetPotential,
)
from .simulate import (
    elastic_tensor,
    finite_displacement_phonons,
    init_state,
    langevin_thermostat,
    relax,
    velocity_verlet_nve,
)
from .training import (
    LJPotential,
    TrainingDiverged,
    generate_dataset,
    train,
    write_metrics_csv,
)
from .xyzio import Frame, atomic_write_text, read_xyz, write_xyz
from .elements import symbol_of

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_MISMATCH = 4
EXIT_UNCONVERGED = 5


class CliError(Exception):
    def __init__(self, message, code=EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _load_structure(path):
    if not os.path.exists(path):
        raise CliError(f"structure file not found: {path}")
    frames = read_xyz(path)
    if not frames:
        raise CliError(f"empty structure file: {path}")
    return frames[0].structure


def _load_potential(args):
    if getattr(args, "lj", False):
        return LJPotential(args.lj_epsilon, args.lj_sigma, args.lj_cutoff)
    if not args.checkpoint:
        raise CliError("either --checkpoint or --lj is required")
    if not os.path.exists(args.checkpoint):
        raise CliError(f"checkpoint not found: {args.checkpoint}")
    config, params, ema, covered = load_checkpoint(args.checkpoint)
    return HIENetPotential(config, ema, covered)


def _add_potential_args(sub):
    sub.add_argument("--checkpoint", help="model checkpoint file")
    sub.add_argument("--lj", action="store_true",
                     help="use the analytic Lennard-Jones reference potential")
    sub.add_argument("--lj-epsilon", type=float, default=0.0104)
    sub.add_argument("--lj-sigma", type=float, default=3.40)
    sub.add_argument("--lj-cutoff", type=float, default=5.0)


def _dataset_from_config(cfg: RunConfig):
    path = cfg.get("data.path")
    if path:
        if not os.path.exists(path):
            raise CliError(f"dataset file not found: {path}")
        from .xyzio import samples_from_frames
        return samples_from_frames(read_xyz(path))
    return generate_dataset(
        seed=cfg.get_int("data.seed"),
        n_samples=cfg.get_int("data.n_samples"),
        species_mix=cfg.get_int_list("data.species"),
        perturbation=cfg.get_float("data.perturbation"),
        cell_jitter=cfg.get_float("data.cell_jitter"),
        epsilon=cfg.get_float("data.lj_epsilon"),
        sigma=cfg.get_float("data.lj_sigma"),
        r_cut=cfg.get_float("data.lj_cutoff"),
    )


def cmd_train(args):
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.set("train.seed", args.seed)
        cfg.set("data.seed", args.seed)
    dataset = _dataset_from_config(cfg)
    target = cfg.get("train.target_force_mae")
    os.makedirs(args.out, exist_ok=True)
    result = train(
        cfg.model_config(), dataset,
        loss_cfg=cfg.loss_config(), opt_cfg=cfg.optimizer_config(),
        seed=cfg.get_int("train.seed"),
        target_force_mae=float(target) if target else None,
        log=(lambda row: print(
            f"epoch {row['epoch']:4d} {row['split']:5s} "
            f"mae_e {row['mae_e']:9.3f} meV/atom  mae_f {row['mae_f']:9.3f} meV/A  "
            f"mae_s {row['mae_s']:8.4f} kBar  lr {row['lr']:.3g}")) if args.verbose else None,
    )
    ckpt_path = os.path.join(args.out, "checkpoint.hien")
    save_checkpoint(ckpt_path, cfg.model_config(), result.params,
                    result.ema_params, result.covered_elements)
    write_metrics_csv(result.metrics, os.path.join(args.out, "metrics.csv"))
    print(f"wrote {ckpt_path} and metrics.csv "
          f"({len(result.metrics)} metric rows)")
    return EXIT_OK


def cmd_evaluate(args):
    potential = _load_potential(args)
    if not os.path.exists(args.data):
        raise CliError(f"dataset file not found: {args.data}")
    from .xyzio import samples_from_frames
    from .training import evaluate_split
    samples = samples_from_frames(read_xyz(args.data))
    if not samples:
        raise CliError(f"empty dataset file: {args.data}")
    metrics = evaluate_split(potential.params, potential.config, samples)
    print(f"energy MAE  {metrics['mae_e']:.4f} meV/atom")
    print(f"force  MAE  {metrics['mae_f']:.4f} meV/A")
    print(f"stress MAE  {metrics['mae_s']:.4f} kBar")
    return EXIT_OK


def cmd_predict(args):
    potential = _load_potential(args)
    structure = _load_structure(args.structure)
    pred = potential.predict(structure)
    print(f"energy_eV {pred.energy:.10f}")
    print("forces_eV_per_A:")
    for z, f in zip(structure.atomic_numbers, pred.forces):
        print(f"  {symbol_of(int(z)):2s} {f[0]: .10f} {f[1]: .10f} {f[2]: .10f}")
    s = pred.stress_kbar
    print("stress_kbar_voigt "
          f"{s[0, 0]:.6f} {s[1, 1]:.6f} {s[2, 2]:.6f} "
          f"{s[1, 2]:.6f} {s[0, 2]:.6f} {s[0, 1]:.6f}")
    write_xyz(args.out, Frame(structure, pred.energy, pred.forces, pred.stress))
    return EXIT_OK


def cmd_md(args):
    potential = _load_potential(args)
    structure = _load_structure(args.structure)
    state = init_state(structure, temperature=args.temperature, seed=args.seed)
    if args.ensemble == "nve":
        result = velocity_verlet_nve(state, potential, args.dt, args.steps)
    else:
        result = langevin_thermostat(state, potential, args.dt, args.steps,
                                     t_target=args.temperature,
                                     friction=args.friction, seed=args.seed,
                                     record_frames=True)
    frames = [Frame(structure.replace(positions=pos)) for _t, pos, _v in result.frames]
    write_xyz(args.out_prefix + "_traj.xyz", frames)
    lines = ["step,time_fs,e_pot_eV,e_kin_eV,temperature_K,e_total_eV"]
    for row in result.log:
        lines.append(f"{row['step']},{row['time']:.6g},{row['e_pot']:.10g},"
                     f"{row['e_kin']:.10g},{row['temperature']:.6g},{row['e_total']:.10g}")
    atomic_write_text(args.out_prefix + "_energy.csv", "\n".join(lines) + "\n")
    drift = abs(result.log[-1]["e_total"] - result.log[0]["e_total"])
    print(f"{args.steps} steps, |energy drift| = {drift:.3e} eV "
          f"({drift / structure.n_atoms:.3e} eV/atom)")
    return EXIT_OK


def cmd_relax(args):
    potential = _load_potential(args)
    structure = _load_structure(args.structure)
    result = relax(structure, potential, f_tol=args.fmax,
                   max_steps=args.max_steps, relax_cell=args.cell)
    pred = potential.predict(result.structure)
    write_xyz(args.out, Frame(result.structure, pred.energy, pred.forces, pred.stress))
    status = "converged" if result.converged else "NOT converged"
    print(f"relaxation {status} after {result.n_steps} steps; "
          f"E = {pred.energy:.8f} eV, max|F| = {np.abs(pred.forces).max():.3e} eV/A")
    return EXIT_OK if result.converged else EXIT_UNCONVERGED


def _parse_triple(text, name):
    parts = [p for p in text.replace(";", ",").split(",") if p.strip()]
    if len(parts) != 3:
        raise CliError(f"{name} needs three comma-separated values")
    return parts


def cmd_phonon(args):
    potential = _load_potential(args)
    structure = _load_structure(args.structure)
    supercell = [int(p) for p in _parse_triple(args.supercell, "--supercell")]
    q_points = []
    for chunk in args.q.split(";"):
        if chunk.strip():
            q_points.append([float(x) for x in chunk.split(",")])
    result = finite_displacement_phonons(
        structure, potential, supercell_diag=supercell,
        displacement=args.displacement, q_points=q_points)
    lines = ["q1,q2,q3,branch,omega_THz"]
    for qi, q in enumerate(result.q_points):
        for branch, omega in enumerate(result.frequencies[qi]):
            lines.append(f"{q[0]:.8g},{q[1]:.8g},{q[2]:.8g},{branch},{omega:.8g}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    gamma = ", ".join(f"{w:.4f}" for w in result.frequencies[0][:6])
    print(f"wrote {args.out}; first branches at q={list(result.q_points[0])}: {gamma} THz")
    return EXIT_OK


def cmd_elastic(args):
    potential = _load_potential(args)
    structure = _load_structure(args.structure)
    result = elastic_tensor(structure, potential)
    lines = ["quantity,value_GPa"]
    for i in range(6):
        for j in range(6):
            lines.append(f"C{i + 1}{j + 1},{result.stiffness[i, j]:.8g}")
    lines.append(f"K_Voigt,{result.k_voigt:.8g}")
    lines.append(f"K_Reuss,{result.k_reuss:.8g}")
    lines.append(f"K_VRH,{result.k_vrh:.8g}")
    atomic_write_text(args.out, "\n".join(lines) + "\n")
    print(f"K_Voigt = {result.k_voigt:.4f} GPa, K_Reuss = {result.k_reuss:.4f} GPa, "
          f"K_VRH = {result.k_vrh:.4f} GPa")
    return EXIT_OK


def cmd_bench(args):
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.set("bench.seed", args.seed)
    dataset = _dataset_from_config(cfg)
    limit = cfg.get_int("bench.n_samples")
    rows = run_ablation(
        sizes=cfg.get_int_list("bench.sizes"),
        variants=tuple(cfg.get_str_list("bench.variants")),
        dataset=dataset[:limit],
        epochs=cfg.get_int("bench.epochs"),
        batch_size=cfg.get_int("bench.batch_size"),
        n_iter=cfg.get_int("bench.n_iter"),
        warmup=cfg.get_int("bench.warmup"),
        seed=cfg.get_int("bench.seed"),
        log=lambda row: print(
            f"{row['variant']:8s} size {row['size']:4d}  "
            f"params {row['n_params']:8d}  {row['throughput']:8.2f} samples/s  "
            f"val_loss {row['val_loss']:.5g}"),
    )
    atomic_write_text(args.out, ablation_csv(rows))
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hienet",
        description="Hybrid invariant-equivariant interatomic potential toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="fit a model on a labeled dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=".")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="report MAE metrics on a labeled dataset")
    _add_potential_args(p)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="energy/forces/stress of a structure")
    _add_potential_args(p)
    p.add_argument("--structure", required=True)
    p.add_argument("--out", default="prediction.xyz")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("md", help="molecular dynamics")
    _add_potential_args(p)
    p.add_argument("--structure", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--dt", type=float, default=0.5)
    p.add_argument("--ensemble", choices=("nve", "nvt"), default="nve")
    p.add_argument("--temperature", type=float, default=300.0)
    p.add_argument("--friction", type=float, default=0.02)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-prefix", default="md")
    p.set_defaults(func=cmd_md)

    p = sub.add_parser("relax", help="structural relaxation (BFGS)")
    _add_potential_args(p)
    p.add_argument("--structure", required=True)
    p.add_argument("--fmax", type=float, default=0.1)
    p.add_argument("--max-steps", type=int, default=200)
    p.add_argument("--cell", action="store_true", help="also relax the cell")
    p.add_argument("--out", default="relaxed.xyz")
    p.set_defaults(func=cmd_relax)

    p = sub.add_parser("phonon", help="finite-displacement phonon frequencies")
    _add_potential_args(p)
    p.add_argument("--structure", required=True)
    p.add_argument("--supercell", default="2,2,2")
    p.add_argument("--displacement", type=float, default=0.01)
    p.add_argument("--q", default="0,0,0", help="semicolon-separated fractional q points")
    p.add_argument("--out", default="phonon.csv")
    p.set_defaults(func=cmd_phonon)

    p = sub.add_parser("elastic", help="elastic tensor and VRH bulk modulus")
    _add_potential_args(p)
    p.add_argument("--structure", required=True)
    p.add_argument("--out", default="elastic.csv")
    p.set_defaults(func=cmd_elastic)

    p = sub.add_parser("bench", help="hybrid-architecture ablation benchmark")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (CoverageError, CheckpointError) as exc:
        print(f"model/data mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
