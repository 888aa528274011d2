import numpy as np
import pytest


def numeric_grad(f, x, h=1e-5):
    """Central differences of a scalar function over every entry of ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blob_net():
    """A tiny conv net fitted to three well-separated 8x8 blob classes."""
    from advl.io import synth_blobs
    from advl.network import build_network
    from advl.training import TrainConfig, train
    data = synth_blobs(3, 40, (1, 8, 8), separation=8, seed=0)
    net = train(build_network("tiny", (1, 8, 8), classes=3, seed=0), data, None,
                TrainConfig(epochs=60, batch_size=20, learning_rate=0.01, optimizer="adam"))
    return net, data


_ACCEPTANCE = pytest.StashKey()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one acceptance verdict: ``criterion(number, title, passed, detail)``.

    A test that dies before recording is listed as FAIL with its error.
    """
    lines = request.config.stash[_ACCEPTANCE]
    seen = []

    def record(number, title, passed, detail=""):
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title}"
        if detail:
            line += f" | {detail}"
        seen.append(number)
        lines.append((number, line))
        print(line)
        return passed

    yield record
    if not seen:
        lines.append((None, f"[FAIL] {request.node.name}: raised before reporting"))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines, key=lambda p: (p[0] is None, p[0] or 0)):
        terminalreporter.write_line(line)
