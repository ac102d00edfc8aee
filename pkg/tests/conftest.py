import numpy as np
import pytest
import torch

from lighthoi.core import GridLayout, HOISequence
from lighthoi.geometry import matrix_to_rot6d, random_rotations


def random_sequence(rng, T=5, jb=3, jh=2, fps=30.0) -> HOISequence:
    R = random_rotations(T, rng)
    return HOISequence(
        rng.normal(size=(T, jb, 3)),
        rng.normal(size=(T, jh, 3)),
        rng.normal(size=(T, jh)),
        rng.normal(size=(T, 3)),
        matrix_to_rot6d(R),
        fps,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small generated corpus shared by the slower module tests."""
    from lighthoi.synthetic import GeneratorConfig, generate

    ds, lib = generate(GeneratorConfig(n_sequences=24, T=24, objects_per_category=2, n_points=128, n_basis=64, seed=3))
    return ds, lib


@pytest.fixture(scope="session")
def micro_model(tiny_corpus):
    from lighthoi.denoiser import DenoiserConfig
    from lighthoi.training import make_model_for

    ds, lib = tiny_corpus
    return make_model_for(ds, lib, DenoiserConfig(1, 16, 32, 2), K=20, seed=0).eval()


LAYOUT_SMALL = GridLayout(3, 2)


# -- acceptance reporting ------------------------------------------------------

VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[VERDICTS] = []


@pytest.fixture
def verdict(pytestconfig, capsys):
    """Record and immediately print one PASS/FAIL line for an acceptance criterion."""

    def _emit(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
        pytestconfig.stash[VERDICTS].append((n, line))
        with capsys.disabled():
            print(f"\n{line}")
        return ok

    return _emit


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config.stash.get(VERDICTS, []))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in lines:
            terminalreporter.write_line(line)
