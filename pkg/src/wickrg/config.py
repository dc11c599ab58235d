"""Run configuration read from YAML.

Sections and their defaults::

    model:   {g: 0.05, p: 0.0, sigma: 0.0, formfactor: {profile: sharp, uv_cutoff: 1.0, width: 0.25}}
    flow:    {rho: 0.25, L_max: 3, degree_cap: 2, xi: 0.25, N_scales: 4,
              pairs_window: [2, 1, 0], rho_from_g: false}
    grids:   {radial_n1: 32, radial_n2: 20, fine_radial: 16, fine_angular: 7,
              coarse_radial: 8, coarse_angular: 3, taylor_h: 1.0e-3}
    oracle:  {radial_n: 12, angular: octahedral, nmax: 2, h: 0.02}
    output:  {dir: wickrg-out}
    seed: 0

``rho_from_g`` replaces ``rho`` by ``min(1/2, g**(1/3))``.
"""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, replace

import yaml

from .formfactor import FormFactor
from .wickflow import FlowConfig, GridConfig

__all__ = ["RunConfig", "DEFAULTS", "load_config"]

DEFAULTS = {
    "model": {"g": 0.05, "p": 0.0, "sigma": 0.0, "formfactor": {"profile": "sharp", "uv_cutoff": 1.0, "width": 0.25}},
    "flow": {"rho": 0.25, "L_max": 3, "degree_cap": 2, "xi": 0.25, "N_scales": 4, "pairs_window": [2, 1, 0],
             "rho_from_g": False},
    "grids": {"radial_n1": 32, "radial_n2": 20, "fine_radial": 16, "fine_angular": 7, "coarse_radial": 8,
              "coarse_angular": 3, "taylor_h": 1.0e-3},
    "oracle": {"radial_n": 12, "angular": "octahedral", "nmax": 2, "h": 0.02},
    "output": {"dir": "wickrg-out"},
    "seed": 0,
}


def _merge(base: dict, over: dict, path=""):
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in base:
            raise ValueError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ValueError(f"config key {path}{k} must be a mapping")
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


@dataclass
class RunConfig:
    """Validated run configuration; ``data`` mirrors the YAML sections."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    def __post_init__(self):
        self.data = _merge(DEFAULTS, self.data)
        self.flow_config()  # validates ranges

    @classmethod
    def from_yaml(cls, text: str) -> "RunConfig":
        return cls(yaml.safe_load(text) or {})

    def override(self, **sections) -> "RunConfig":
        """A copy with some entries replaced, e.g. ``override(model={"g": 0.0})``."""
        return RunConfig(_merge(self.data, sections))

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def formfactor(self) -> FormFactor:
        m = self.data["model"]
        f = m["formfactor"]
        return FormFactor(float(m["sigma"]), float(f["uv_cutoff"]), f["profile"], float(f["width"]))

    def flow_config(self) -> FlowConfig:
        m, fl, gr = self.data["model"], self.data["flow"], self.data["grids"]
        grids = replace(GridConfig(), **{k: (float(v) if k == "taylor_h" else int(v)) for k, v in gr.items()})
        g = float(m["g"])
        rho = float(fl["rho"])
        if fl["rho_from_g"]:
            rho = min(0.5, g ** (1.0 / 3.0)) if g > 0 else 0.5
        return FlowConfig(rho=rho, L_max=int(fl["L_max"]), degree_cap=int(fl["degree_cap"]), p=float(m["p"]),
                          sigma=float(m["sigma"]), g=g, xi=float(fl["xi"]), formfactor=self.formfactor(),
                          pairs_window=tuple(int(x) for x in fl["pairs_window"]), grids=grids)

    @property
    def N_scales(self) -> int:
        return int(self.data["flow"]["N_scales"])


def load_config(path: str | None = None) -> RunConfig:
    """Defaults, overridden by the YAML file at ``path`` when given."""
    if path is None:
        return RunConfig()
    with open(path) as fh:
        return RunConfig.from_yaml(fh.read())
