from pathlib import Path

import numpy as np
import pytest

from lithium_ssm.synth import SynthSpec, synthesize

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def synth_seed0(tmp_path_factory):
    """The default seed-0 synthetic dataset, written once per session."""
    out = tmp_path_factory.mktemp("synth0")
    written = synthesize(SynthSpec(seed=0), out)
    return out, written


def random_scan_inputs(rng, nb, nl, nd, nn, stable=True):
    abar = rng.uniform(0.05, 0.999, (nb, nl, nd, nn)) if stable else rng.normal(size=(nb, nl, nd, nn))
    bbar = rng.normal(size=(nb, nl, nd, nn))
    c = rng.normal(size=(nb, nl, nn))
    x = rng.normal(size=(nb, nl, nd))
    return abar, bbar, c, x
