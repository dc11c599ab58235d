from __future__ import annotations

import pytest

from wickrg.initcond import first_decimation
from wickrg.wickflow import FlowConfig

G = 0.05


@pytest.fixture(scope="session")
def decimated():
    """Scale-0 family and step report at p = 0, g = 0.05, rho = 1/4."""
    cfg = FlowConfig(g=G, rho=0.25, pairs_window=(1, 1, 0))
    fam, rep = first_decimation(0.0, G, 0.0, cfg)
    return cfg, fam, rep
