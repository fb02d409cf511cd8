"""Run configuration: validated fields, presets, and ablation switches."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

from .tensor import ContractError


@dataclass
class RunConfig:
    # reasoning transformer
    d_model: int = 96
    n_heads: int = 4
    n_layers: int = 3
    d_bridge: int = 48
    mlp_mult: int = 2
    t_max: int = 8
    max_text_len: int = 12
    max_out_len: int = 6
    hrm_steps: int = 2
    # denoiser
    den_d_model: int = 96
    den_layers: int = 2
    # encoders
    txt_d_model: int = 32
    # diffusion
    schedule_steps: int = 16
    sample_steps: int = 6
    # micro-world
    grid_h: int = 12
    grid_w: int = 12
    n_codes: int = 64
    min_objects: int = 2
    max_objects: int = 4
    n_train: int = 1700
    n_val: int = 220
    # optimization
    lr: float = 3e-4
    weight_decay: float = 0.0
    epochs: int = 100
    max_epochs: int | None = None  # early-stop cap for desk runs
    batch_size: int = 32
    seed: int = 0
    alpha_t_mode: str = "fixed"  # fixed | schedule
    alpha_t: float = 0.5
    temperature: float = 0.07
    lm_weight: float = 1.0
    att_weight: float = 0.1  # referent-attention supervision strength
    threads: int = 0
    # ablation switches
    hrm: bool = True
    rab: bool = True
    gates: bool = True
    hybrid: bool = True

    def __post_init__(self):
        if self.alpha_t_mode not in ("fixed", "schedule"):
            raise ContractError(f"unknown alpha_t mode {self.alpha_t_mode!r}")
        if not 0.0 <= self.alpha_t <= 1.0:
            raise ContractError(f"alpha_t {self.alpha_t} outside [0, 1]")
        if self.d_model % self.n_heads:
            raise ContractError("d_model must be divisible by n_heads")
        if self.epochs < 1 or self.batch_size < 1:
            raise ContractError("epochs and batch_size must be positive")

    @property
    def n_cells(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def run_epochs(self) -> int:
        return min(self.epochs, self.max_epochs) if self.max_epochs else self.epochs

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def echo(self, path: str | Path) -> None:
        """Write the fully resolved configuration beside run outputs."""
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


_FIELDS = {f.name for f in dataclasses.fields(RunConfig)}

# Paper-scale hyperparameters kept as a preset; never trained in tests.
PRESETS = {
    "desk": {},
    "paper": {"d_model": 1024, "d_bridge": 1024, "n_heads": 16, "n_layers": 12,
              "den_d_model": 1024, "den_layers": 4, "grid_h": 16, "grid_w": 16,
              "epochs": 100, "max_epochs": None, "lr": 3e-4,
              "weight_decay": 0.0, "alpha_t": 0.5},
}


def make_config(preset: str = "desk", overrides: dict | None = None,
                ablations: dict | None = None) -> RunConfig:
    """Build a validated config; unknown keys are rejected before any work."""
    if preset not in PRESETS:
        raise ContractError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    merged = dict(PRESETS[preset])
    for src in (overrides or {}, ablations or {}):
        for key, value in src.items():
            if key not in _FIELDS:
                raise ContractError(f"unknown config key {key!r}")
            merged[key] = value
    return RunConfig(**merged)


def load_config_file(path: str | Path) -> dict:
    data = json.loads(Path(path).read_text())
    if not isinstance(data, dict):
        raise ContractError("config file must hold a JSON object")
    for key in data:
        if key not in _FIELDS:
            raise ContractError(f"unknown config key {key!r}")
    return data
