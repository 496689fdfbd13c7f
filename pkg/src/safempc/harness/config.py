"""Experiment configuration in a plain ``key = value`` text format."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

# values taken from the experiment descriptions; everything else is a free choice
STATED_KEYS = frozenset({
    "scalar_s0", "scalar_alpha", "rho", "n_fail", "tube_s0", "horizon", "batch", "tube_alpha",
    "stage_weights", "s_ref", "zeta",
})


@dataclass
class ExperimentConfig:
    which: str = "scalar"
    gate: str = "backtracking"
    seed: int = 0
    # scalar
    scalar_s0: float = -8.0
    scalar_steps: int = 60
    scalar_alpha: float = 1.0
    noise_bound: float = 0.01
    boundary_action: str = "clipped"
    rho: float = 0.9
    n_fail: int = 1
    gamma: float = 0.9
    # tube
    tube_s0: tuple = (0.8, 0.0)
    epochs: int = 200
    horizon: int = 50
    batch: int = 20
    tube_alpha: float = 0.1
    stage_weights: tuple = (1.0, 0.01, 0.01)
    s_ref: tuple = (-3.0, 0.0)
    octagon_radius: float = 0.03
    octagon_phase: float = math.pi / 8
    n_prior: int = 500
    prior_inflation: float = 1.1
    gn_damping: float = 1e-2
    gn_marquardt: float = 1.0
    init_H: tuple = (1.0, 0.01, 0.01)
    init_x_r: tuple = (0.0, 0.0)
    init_l: float = 0.0
    # telemetry
    gamma_lyap: float = 0.9
    zeta: float = 0.1
    telemetry: bool = True
    telemetry_grid: int = 3
    out: str = "out"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.which not in ("scalar", "tube"):
            raise ValueError(f"unknown experiment {self.which!r}")
        if self.gate == "feasibility-constrained":
            self.gate = "feasibility"
        if self.gate not in ("backtracking", "feasibility"):
            raise ValueError(f"unknown gate mode {self.gate!r}")

    def as_dict(self):
        d = dataclasses.asdict(self)
        d.pop("extra")
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        d["stated_keys"] = sorted(STATED_KEYS)
        return d

    @classmethod
    def from_text(cls, text, **overrides):
        kw = {}
        types = {f.name: f for f in dataclasses.fields(cls)}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {n}: expected key = value")
            k, v = (x.strip() for x in line.split("=", 1))
            if k not in types or k == "extra":
                raise ValueError(f"line {n}: unknown key {k!r}")
            kw[k] = _parse(v, cls.__dataclass_fields__[k].default, types[k])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    @classmethod
    def from_file(cls, path, **overrides):
        with open(path) as fh:
            return cls.from_text(fh.read(), **overrides)


def _parse(v, default, f):
    if default is dataclasses.MISSING and f.default_factory is not dataclasses.MISSING:
        default = f.default_factory()
    if isinstance(default, bool):
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    if isinstance(default, int):
        return int(v)
    if isinstance(default, float):
        return float(v)
    if isinstance(default, tuple):
        return tuple(float(x) for x in v.replace(",", " ").split())
    return v
