import json
import time

import pytest
from hypothesis import HealthCheck, settings

from clutterpick import physics, transnet

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}

TRAIN_SEED = 1
HELDOUT_SEED = 1001


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def trained():
    """The transition network trained with the reference recipe, plus its training log.

    3000 simulated transitions, learning rate 1e-4, batch 512, 400 epochs, Adam.
    """
    recs = physics.generate_transition_dataset(3000, physics.PhysicsParams(), seed=TRAIN_SEED)
    t0 = time.time()
    model, losses = transnet.train(recs, transnet.TrainConfig())
    return {"model": model, "losses": losses, "seconds": time.time() - t0, "records": recs}


@pytest.fixture(scope="session")
def model(trained):
    return trained["model"]


@pytest.fixture(scope="session")
def model_file(trained, tmp_path_factory):
    path = tmp_path_factory.mktemp("model") / "model.json"
    trained["model"].save(path)
    return path


@pytest.fixture(scope="session")
def heldout_slides():
    return physics.generate_transition_dataset(200, physics.PhysicsParams(), seed=HELDOUT_SEED,
                                               remove_fraction=0.0)


@pytest.fixture(scope="session")
def tiny_model():
    """A quickly fitted network for tests that only need a working model."""
    recs = physics.generate_transition_dataset(200, physics.PhysicsParams(), seed=7)
    m, _ = transnet.train(recs, transnet.TrainConfig(epochs=5, batch_size=64, seed=3))
    return m


def dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True)
