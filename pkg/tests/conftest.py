import os
import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from yieldfield.dataio import parse_fama_bliss
from yieldfield.simulate import simulate_dns_panel, simulate_spatiotemporal_panel

_DATA_CANDIDATES = (
    os.environ.get("YIELDFIELD_DATA"),
    str(Path(__file__).resolve().parents[1] / "data" / "FBFITTED.txt"),
    "/root/pkg/data/FBFITTED.txt",
)

SKIP_REASON = (
    "Fama-Bliss panel unavailable (no network in this environment); "
    "set YIELDFIELD_DATA to the FBFITTED file to run this criterion"
)


def find_paper_file():
    for cand in _DATA_CANDIDATES:
        if cand and Path(cand).exists():
            return Path(cand)
    return None


@pytest.fixture(scope="session")
def paper_panel():
    path = find_paper_file()
    if path is None:
        pytest.skip(SKIP_REASON)
    return parse_fama_bliss(path.read_text(), restrict_paper=True)


@pytest.fixture(scope="session")
def dns_panel():
    panel, paths = simulate_dns_panel(T=140, seed=7, sigma_e=0.06)
    return panel, paths


@pytest.fixture(scope="session")
def spatemp_panel():
    return simulate_spatiotemporal_panel(T=90, seed=5, mesh_factor=1.0)


@pytest.fixture(scope="session")
def st_fit():
    from yieldfield.inference import ModelSpec, fit_map

    panel, *_ = simulate_spatiotemporal_panel(T=60, seed=2, mesh_factor=1.0)
    spec = ModelSpec(trend="bdns", residual="spatiotemporal", mesh_factor=1.0)
    return fit_map(spec, panel, maxfev=250, restarts=0)
