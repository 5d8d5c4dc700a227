"""Run configuration.

A run is configured by a plain key-value file (`key = value` per line, `#`
comments) covering every training hyperparameter, plus CLI overrides. The
FederationConfig is the slice of that configuration the server hands to
joining clients; its canonical JSON form doubles as the reproducibility
digest.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Optional

from .errors import InvalidConfig
from .nn import LrSchedule, ModelSpec, default_model_spec

# key -> (parser, default)
_SCHEMA = {
    "rounds": (int, 60),
    "batch_size": (int, 32),
    "base_lr": (float, 1e-4),
    "lr_decay_factor": (float, 0.5),
    "lr_decay_every": (int, 100),
    "weight_decay": (float, 1e-5),
    "flip_prob": (float, 0.5),
    "max_rotation_deg": (float, 45.0),
    "intensity_shift_range": (float, 0.1),
    "resolution": (int, 32),
    "num_classes": (int, 4),
    "scale": (int, 50),
    "master_seed": (int, 0),
    "finetune_epochs": (int, 30),
    "finetune_lr_scale": (float, 0.1),
    "local_epochs": (int, 0),   # 0: match the federated round budget
    "roster": (lambda s: tuple(x.strip() for x in s.split(",") if x.strip()), ()),
    "model": (str, ""),         # canonical model string; empty: default net
}


def default_run_config() -> dict:
    return {key: default for key, (_, default) in _SCHEMA.items()}


def parse_config_file(path) -> dict:
    """Parse a key-value config file onto the defaults."""
    values = default_run_config()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in _SCHEMA:
                raise InvalidConfig(f"{path}:{lineno}: unknown key {key!r}")
            parser = _SCHEMA[key][0]
            try:
                values[key] = parser(value)
            except ValueError as exc:
                raise InvalidConfig(f"{path}:{lineno}: bad value for {key}: {exc}")
    return values


@dataclass(frozen=True)
class FederationConfig:
    """Everything a client needs to train consistently with its peers."""

    rounds: int
    roster: tuple
    model: ModelSpec
    schedule: LrSchedule
    batch_size: int = 32
    weight_decay: float = 1e-5
    flip_prob: float = 0.5
    max_rotation_deg: float = 45.0
    intensity_shift_range: float = 0.1
    master_seed: int = 0

    def __post_init__(self):
        if self.rounds < 1:
            raise InvalidConfig("at least one round is required")
        if not self.roster:
            raise InvalidConfig("roster must be nonempty")
        if len(set(self.roster)) != len(self.roster):
            raise InvalidConfig("roster ids must be unique")
        if self.batch_size < 1:
            raise InvalidConfig("batch_size must be >= 1")

    def to_json(self) -> str:
        payload = {
            "rounds": self.rounds,
            "roster": list(self.roster),
            "model": self.model.canonical(),
            "base_lr": self.schedule.base_lr,
            "lr_decay_factor": self.schedule.decay_factor,
            "lr_decay_every": self.schedule.decay_every,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
            "flip_prob": self.flip_prob,
            "max_rotation_deg": self.max_rotation_deg,
            "intensity_shift_range": self.intensity_shift_range,
            "master_seed": self.master_seed,
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(text: str) -> "FederationConfig":
        try:
            payload = json.loads(text)
            return FederationConfig(
                rounds=int(payload["rounds"]),
                roster=tuple(payload["roster"]),
                model=ModelSpec.from_canonical(payload["model"]),
                schedule=LrSchedule(payload["base_lr"],
                                    payload["lr_decay_factor"],
                                    payload["lr_decay_every"]),
                batch_size=int(payload["batch_size"]),
                weight_decay=float(payload["weight_decay"]),
                flip_prob=float(payload["flip_prob"]),
                max_rotation_deg=float(payload["max_rotation_deg"]),
                intensity_shift_range=float(payload["intensity_shift_range"]),
                master_seed=int(payload["master_seed"]),
            )
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise InvalidConfig(f"bad federation config payload: {exc}")

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode("ascii")).hexdigest()

    def with_seed(self, master_seed: int) -> "FederationConfig":
        return replace(self, master_seed=master_seed)

    def client_seed(self, client_id: str) -> int:
        """Stable per-client seed: master seed salted with the roster index."""
        if client_id not in self.roster:
            raise InvalidConfig(f"{client_id!r} is not on the roster")
        return self.master_seed * 1000 + self.roster.index(client_id)


def federation_config_from_run(values: dict, roster,
                               master_seed: Optional[int] = None,
                               rounds: Optional[int] = None) -> FederationConfig:
    """Assemble the wire config from parsed run-config values."""
    if values["model"]:
        model = ModelSpec.from_canonical(values["model"])
    else:
        model = default_model_spec(values["resolution"], values["num_classes"])
    return FederationConfig(
        rounds=values["rounds"] if rounds is None else rounds,
        roster=tuple(roster),
        model=model,
        schedule=LrSchedule(values["base_lr"], values["lr_decay_factor"],
                            values["lr_decay_every"]),
        batch_size=values["batch_size"],
        weight_decay=values["weight_decay"],
        flip_prob=values["flip_prob"],
        max_rotation_deg=values["max_rotation_deg"],
        intensity_shift_range=values["intensity_shift_range"],
        master_seed=values["master_seed"] if master_seed is None else master_seed,
    )
