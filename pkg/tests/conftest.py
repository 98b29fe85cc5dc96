import numpy as np
import pytest
import torch

from mar3d.phantoms import PhantomSpec, generate_phantom

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_phantom():
    """80x80 phantom with 10 slices; cheap enough for most tests."""
    return generate_phantom(PhantomSpec(seed=3, n_slices=10, image_size=(80, 80)))


@pytest.fixture(scope="session")
def phantom128():
    return generate_phantom(PhantomSpec(seed=11, n_slices=12, image_size=(128, 128)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Small train/test corpus at 80x80 shared by dataset, training and cli tests."""
    from mar3d.dataset import DatasetConfig, build_paired_testset, build_training_corpus

    cfg = DatasetConfig(seed=5, n_clean=3, n_artifact=2, n_test_phantoms=2, m_values=(1, 2, 3),
                        slice_range=(8, 10), image_size=(80, 80))
    root = tmp_path_factory.mktemp("corpus")
    train = build_training_corpus(cfg, root / "train")
    test = build_paired_testset(cfg, root / "test")
    return cfg, root, train, test


# --- acceptance summary: one PASS/FAIL line per criterion ---------------------------

CRITERIA = {
    1: "loss identities",
    2: "gradient correctness",
    3: "reconstruction oracle",
    4: "artifact-severity trend",
    5: "end-to-end learning",
    6: "improvement-rate arithmetic",
    7: "translation invariants",
    8: "determinism",
    9: "variant sanity",
}
_criterion_outcomes: dict[int, str] = {}


def _criterion_number(nodeid: str):
    name = nodeid.rsplit("::", 1)[-1]
    if not name.startswith("test_criterion_"):
        return None
    return int(name[len("test_criterion_"):].split("_", 1)[0])


def pytest_runtest_logreport(report):
    n = _criterion_number(report.nodeid)
    if n is None:
        return
    if report.failed:
        _criterion_outcomes[n] = "FAIL"
    elif report.when == "call" and report.passed:
        _criterion_outcomes.setdefault(n, "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criterion_outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n, label in CRITERIA.items():
        outcome = _criterion_outcomes.get(n, "NOT RUN")
        terminalreporter.write_line(f"criterion {n} ({label}): {outcome}")
