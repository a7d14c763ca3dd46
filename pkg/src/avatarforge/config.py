"""Run configuration with desk and paper profiles.

The ``paper`` profile keeps the published constants (widths, heads, grid and
texture sizes, learning rate); it is carried for reference and is far too
large to train on a laptop with a numpy engine. The desk profile scales the
widths and resolutions down while keeping layer counts, loss weights, the
iteration schedule and the clipping ranges.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .losses import LOSS_NAMES, PAPER_LAMBDAS
from .mesh import PART_NAMES

PAPER_DELTAS = {"face": 0.003, "hair": 0.08, "neck": 0.02, "eyeball": 0.0, "eyelid": 0.0, "other": 0.02}


class ConfigError(ValueError):
    """A configuration value violates its documented range."""


@dataclass
class Config:
    profile: str = "desk"
    seed: int = 0
    dtype: str = "float32"

    # image branch
    image_res: int = 128
    patch: int = 8
    dim: int = 64
    heads: int = 4
    n_layers: int = 2
    token_grid: int = 16

    # texture branch
    tex_res: int = 128
    c_a: int = 16
    dec_channels: tuple = (32, 32, 16)
    feat_down: int = 4
    c_h_tex: int = 32
    c_phi: int = 16

    # geometry branch
    c_h_geo: int = 64
    c_psi: int = 32
    c_d: int = 16
    n_freq: int = 4
    delta_head_scale: float = 0.01

    # loop and losses
    K: int = 2
    gamma: float = 0.8
    lambdas: dict = field(default_factory=lambda: dict(PAPER_LAMBDAS))
    deltas: dict = field(default_factory=lambda: dict(PAPER_DELTAS))

    # topology correction: epsilon = eps_scale * longest edge of the shaped template
    eps_scale: float = 1.2
    area_eps: float = 1e-10

    # optimisation
    lr: float = 2e-3
    warmup: int = 20
    steps: int = 500
    snapshot_every: int = 50

    @classmethod
    def desk(cls, **overrides) -> "Config":
        return cls(**overrides).validate()

    @classmethod
    def paper(cls, **overrides) -> "Config":
        base = dict(
            profile="paper", image_res=512, patch=8, dim=1024, heads=16, n_layers=2,
            token_grid=64, tex_res=1024, c_a=64, dec_channels=(256, 128, 64, 64),
            c_h_tex=128, c_phi=64, c_h_geo=256, c_psi=128, c_d=64, lr=2e-4, warmup=500,
        )
        base.update(overrides)
        return cls(**base).validate()

    @classmethod
    def for_profile(cls, profile: str, **overrides) -> "Config":
        if profile == "desk":
            return cls.desk(**overrides)
        if profile == "paper":
            return cls.paper(**overrides)
        raise ConfigError(f"unknown profile {profile!r} (expected 'desk' or 'paper')")

    @property
    def feat_res(self) -> int:
        return self.tex_res // self.feat_down

    def replace(self, **changes) -> "Config":
        return replace(self, **changes).validate()

    def validate(self) -> "Config":
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        if set(self.deltas) != set(PART_NAMES):
            raise ConfigError(f"deltas must name exactly the parts {PART_NAMES}")
        for part, d in self.deltas.items():
            if not d >= 0:
                raise ConfigError(f"delta for {part!r} must be >= 0, got {d}")
        if set(self.lambdas) != set(LOSS_NAMES):
            raise ConfigError(f"lambdas must name exactly the terms {LOSS_NAMES}")
        if any(not v >= 0 for v in self.lambdas.values()):
            raise ConfigError("loss weights must be >= 0")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} is not divisible by {self.heads} heads")
        if self.image_res % self.patch:
            raise ConfigError(f"image_res {self.image_res} is not divisible by patch {self.patch}")
        ratio = self.tex_res // self.token_grid
        if ratio * self.token_grid != self.tex_res or ratio & (ratio - 1) or ratio < 1:
            raise ConfigError("tex_res must be a power-of-two multiple of token_grid")
        if len(self.dec_channels) != ratio.bit_length() - 1:
            raise ConfigError(f"dec_channels needs {ratio.bit_length() - 1} stages for {self.token_grid} -> {self.tex_res}")
        if self.tex_res % self.feat_down:
            raise ConfigError("tex_res must be divisible by feat_down")
        if self.eps_scale <= 1.0:
            raise ConfigError("eps_scale must exceed 1 so the template itself is compliant")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.steps < 0 or self.warmup < 0 or self.snapshot_every < 1:
            raise ConfigError("steps and warmup must be >= 0 and snapshot_every >= 1")
        if self.n_layers < 0 or self.n_freq < 0:
            raise ConfigError("n_layers and n_freq must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dec_channels"] = list(self.dec_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        d = dict(d)
        if "dec_channels" in d:
            d["dec_channels"] = tuple(d["dec_channels"])
        base = cls.for_profile(d.get("profile", "desk"))
        return replace(base, **d).validate()

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Config":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(d, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(d)
