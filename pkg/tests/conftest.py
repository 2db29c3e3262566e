import sys
from pathlib import Path

import pytest

from gemmbench.kernels import warm_up_jit

FIXTURES = Path(__file__).parent / "fixtures"
MOCK = [sys.executable, "-m", "gemmbench.mock_backend"]


@pytest.fixture(scope="session", autouse=True)
def _compiled():
    warm_up_jit()


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture
def mock_argv():
    def build(*flags):
        return MOCK + list(flags)
    return build


def make_zone(root: Path, dirname: str, name: str, energy: int, max_range: int = 10**9) -> Path:
    zone = root / dirname
    zone.mkdir(parents=True)
    (zone / "name").write_text(name + "\n")
    (zone / "energy_uj").write_text(f"{energy}\n")
    (zone / "max_energy_range_uj").write_text(f"{max_range}\n")
    return zone


@pytest.fixture
def powercap_tree(tmp_path, monkeypatch):
    """Synthetic powercap tree with one package and its DRAM subzone."""
    root = tmp_path / "powercap"
    pkg = make_zone(root, "intel-rapl:0", "package-0", 100)
    make_zone(pkg, "intel-rapl:0:0", "dram", 200)
    make_zone(pkg, "intel-rapl:0:1", "core", 300)
    monkeypatch.setenv("GEMMBENCH_POWERCAP_ROOT", str(root))
    return root
