import numpy as np
import pytest

from skggp.backend import compiled_available, get_backend
from skggp.instance import Activity, Mode, ProjectInstance, ScenarioConfig, generate_instance

BACKENDS = ["python"] + (["cython"] if compiled_available() else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return get_backend(request.param)


def mode(exp, opt=None, pes=None, demand=(1,)):
    opt = exp if opt is None else opt
    pes = exp if pes is None else pes
    return Mode(exp, opt, pes, tuple(demand))


def make_instance(preds, modes, caps, id_="hand"):
    """``preds[i]`` are the predecessors of activity i; ``modes[i]`` its Mode list."""
    acts = tuple(Activity(i, tuple(modes[i]), frozenset(preds[i])) for i in range(len(preds)))
    return ProjectInstance(acts, tuple(caps), id_)


def chain(durations, demand=1, cap=1):
    n = len(durations)
    return make_instance([[i - 1] if i else [] for i in range(n)],
                         [[mode(d, demand=(demand,))] for d in durations], [cap], "chain")


def diamond(durations=(1, 2, 3, 1), demands=(1, 1, 1, 1), cap=10):
    preds = [[], [0], [0], [1, 2]]
    return make_instance(preds, [[mode(d, demand=(q,))] for d, q in zip(durations, demands)],
                         [cap], "diamond")


@pytest.fixture(scope="session")
def small_scenario():
    return ScenarioConfig(activity_count=12, resource_type_count=2)


@pytest.fixture(scope="session")
def scenario():
    return ScenarioConfig()


@pytest.fixture(scope="session")
def instance30(scenario):
    return generate_instance(scenario, 42, "n30")


def random_instances(count, seed=0, sizes=(10, 30, 60), strengths=(0.25, 0.5, 0.75)):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        n = int(rng.choice(sizes))
        os_ = float(rng.choice(strengths))
        sc = ScenarioConfig(activity_count=n, target_order_strength=os_,
                            resource_type_count=int(rng.integers(1, 5)))
        out.append(generate_instance(sc, int(rng.integers(2**31)), f"r{i}"))
    return out


# criterion number -> one-line verdict, filled in by test_acceptance.py
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[n])
