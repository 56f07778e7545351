"""INI-style run configuration.

Sections and keys (defaults in parentheses; training defaults follow the
published hyperparameter choices, desk-scale knobs are explicit overrides):

[model]
  num_invariant_layers (1), num_equivariant_layers (3), hidden_dim (512),
  irreps_mult (512,128,64,32), l_max (3), n_bessel (8), envelope_p (6),
  r_cut (5.0 A), dropout (0.06), dropout_attn (0.1), radial_weights (false)

[train]
  max_lr (0.01), min_lr (5e-6), warmup_epochs (0.1), warmup_factor (0.2),
  weight_decay (0.001), batch_size (8), epochs (200), ema_decay (0.999),
  energy_weight (1.0), force_weight (1.0), stress_weight (0.01),
  huber_delta (0.01), seed (0), target_force_mae (unset; meV/A early stop)

[data]
  n_samples (500), species (18), perturbation (0.15 A), cell_jitter (0.03),
  lj_epsilon (0.0104 eV), lj_sigma (3.4 A), lj_cutoff (5.0 A), seed (0),
  path (unset; labeled extended-XYZ file instead of the generator)

[md]
  steps (1000), dt (0.5 fs), temperature (300 K), friction (0.02 /fs),
  ensemble (nve | nvt), seed (0)

[phonon]
  supercell (2,2,2), displacement (0.01 A), q_points (0,0,0; semicolon list)

[elastic]
  normal_strains (-0.01,-0.005,0.005,0.01),
  shear_strains (-0.06,-0.03,0.03,0.06)

[bench]
  sizes (16,32), variants (hienet,eqvnet,invnet), batch_size (1),
  n_iter (30), warmup (10), epochs (3), n_samples (48), seed (0)

Unknown keys are rejected.
"""

import configparser

from .potential import ModelConfig
from .training import LossConfig, OptimizerConfig


class ConfigError(ValueError):
    pass


_DEFAULTS = {
    "model": {
        "num_invariant_layers": "1",
        "num_equivariant_layers": "3",
        "hidden_dim": "512",
        "irreps_mult": "512,128,64,32",
        "l_max": "3",
        "n_bessel": "8",
        "envelope_p": "6",
        "r_cut": "5.0",
        "dropout": "0.06",
        "dropout_attn": "0.1",
        "radial_weights": "false",
    },
    "train": {
        "max_lr": "0.01",
        "min_lr": "5e-6",
        "warmup_epochs": "0.1",
        "warmup_factor": "0.2",
        "weight_decay": "0.001",
        "batch_size": "8",
        "epochs": "200",
        "ema_decay": "0.999",
        "energy_weight": "1.0",
        "force_weight": "1.0",
        "stress_weight": "0.01",
        "huber_delta": "0.01",
        "seed": "0",
        "target_force_mae": "",
    },
    "data": {
        "n_samples": "500",
        "species": "18",
        "perturbation": "0.15",
        "cell_jitter": "0.03",
        "lj_epsilon": "0.0104",
        "lj_sigma": "3.4",
        "lj_cutoff": "5.0",
        "seed": "0",
        "path": "",
    },
    "md": {
        "steps": "1000",
        "dt": "0.5",
        "temperature": "300.0",
        "friction": "0.02",
        "ensemble": "nve",
        "seed": "0",
    },
    "phonon": {
        "supercell": "2,2,2",
        "displacement": "0.01",
        "q_points": "0,0,0",
    },
    "elastic": {
        "normal_strains": "-0.01,-0.005,0.005,0.01",
        "shear_strains": "-0.06,-0.03,0.03,0.06",
    },
    "bench": {
        "sizes": "16,32",
        "variants": "hienet,eqvnet,invnet",
        "batch_size": "1",
        "n_iter": "30",
        "warmup": "10",
        "epochs": "3",
        "n_samples": "48",
        "seed": "0",
    },
}


class RunConfig:
    """Validated flat key-value configuration with typed accessors."""

    def __init__(self, values=None):
        self.values = {s: dict(d) for s, d in _DEFAULTS.items()}
        for key, val in (values or {}).items():
            self.set(key, val)

    @classmethod
    def from_file(cls, path):
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"config file not found: {path}")
        cfg = cls()
        for section in parser.sections():
            for key, val in parser.items(section):
                cfg.set(f"{section}.{key}", val)
        return cfg

    def set(self, dotted, value):
        section, _, key = dotted.partition(".")
        if section not in self.values or key not in _DEFAULTS[section]:
            raise ConfigError(f"unknown config key: {dotted}")
        self.values[section][key] = str(value)

    def get(self, dotted):
        section, _, key = dotted.partition(".")
        try:
            return self.values[section][key]
        except KeyError:
            raise ConfigError(f"unknown config key: {dotted}") from None

    def get_int(self, dotted):
        return int(self.get(dotted))

    def get_float(self, dotted):
        return float(self.get(dotted))

    def get_bool(self, dotted):
        val = self.get(dotted).strip().lower()
        if val in ("true", "1", "yes", "on"):
            return True
        if val in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"{dotted}: expected a boolean, got {val!r}")

    def get_int_list(self, dotted):
        return [int(x) for x in self.get(dotted).split(",") if x.strip()]

    def get_float_list(self, dotted):
        return [float(x) for x in self.get(dotted).split(",") if x.strip()]

    def get_str_list(self, dotted):
        return [x.strip() for x in self.get(dotted).split(",") if x.strip()]

    # -- composed configurations ------------------------------------------

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            num_invariant_layers=self.get_int("model.num_invariant_layers"),
            num_equivariant_layers=self.get_int("model.num_equivariant_layers"),
            hidden_dim=self.get_int("model.hidden_dim"),
            irreps_mult=tuple(self.get_int_list("model.irreps_mult")),
            l_max=self.get_int("model.l_max"),
            n_bessel=self.get_int("model.n_bessel"),
            envelope_p=self.get_int("model.envelope_p"),
            r_cut=self.get_float("model.r_cut"),
            dropout=self.get_float("model.dropout"),
            dropout_attn=self.get_float("model.dropout_attn"),
            radial_weights=self.get_bool("model.radial_weights"),
        )

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            max_lr=self.get_float("train.max_lr"),
            min_lr=self.get_float("train.min_lr"),
            warmup_epochs=self.get_float("train.warmup_epochs"),
            warmup_factor=self.get_float("train.warmup_factor"),
            weight_decay=self.get_float("train.weight_decay"),
            batch_size=self.get_int("train.batch_size"),
            epochs=self.get_int("train.epochs"),
            ema_decay=self.get_float("train.ema_decay"),
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(
            energy_weight=self.get_float("train.energy_weight"),
            force_weight=self.get_float("train.force_weight"),
            stress_weight=self.get_float("train.stress_weight"),
            huber_delta=self.get_float("train.huber_delta"),
        )

    def q_points(self):
        pts = []
        for chunk in self.get("phonon.q_points").split(";"):
            chunk = chunk.strip()
            if chunk:
                pts.append([float(x) for x in chunk.split(",")])
        return pts
