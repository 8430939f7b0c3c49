import pytest

from sliceprior.phantom import PhantomParams, generate_phantom
from sliceprior.pipeline import TrainConfig, train

SMALL = PhantomParams(grid=48, spacing=4.0)


@pytest.fixture(scope="session")
def small_cohort():
    return {f"c{i}": generate_phantom(SMALL, i) for i in range(3)}


@pytest.fixture(scope="session")
def tiny_model(small_cohort):
    """A quickly trained model on two coarse phantoms; c2 stays unseen."""
    vols = {k: small_cohort[k] for k in ("c0", "c1")}
    return train(vols, TrainConfig(epochs=200, batch_size=2, points_per_volume=1024, lr=1e-3, seed=0))


def pytest_terminal_summary(terminalreporter):
    from . import test_acceptance

    if not test_acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(test_acceptance.RESULTS):
        ok, detail = test_acceptance.RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
