import numpy as np
import pytest

from escim.data import FeatureSchema, InteractionLog


def central_difference(f, x, h=1e-5, order=2):
    """Numerical gradient of scalar f at array x (x is perturbed in place and restored).

    ``order=4`` uses the five-point stencil, whose O(h^4) truncation allows a
    larger h and so less cancellation error.
    """
    stencil = {2: ((1, 0.5),), 4: ((1, 2 / 3), (2, -1 / 12))}[order]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        total = 0.0
        for step, weight in stencil:
            x[i] = old + step * h
            up = f()
            x[i] = old - step * h
            total += weight * (up - f())
        x[i] = old
        g[i] = total / h
    return g


def max_rel_error(a, b, floor=1e-6):
    """Largest |a - b| / max(|a|, |b|, floor), the gradient-check statistic."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def tiny_schema():
    return FeatureSchema((("user_id", 6), ("item_id", 5), ("ctx", 3)), embedding_dim=2)


def random_log(schema, n, seed=0, ctr=0.3, cvr=0.3):
    rng = np.random.default_rng(seed)
    feats = np.stack([rng.integers(0, c, size=n) for c in schema.cardinalities], axis=1)
    click = (rng.random(n) < ctr).astype(np.int8)
    conv = (click * (rng.random(n) < cvr)).astype(np.int8)
    names = schema.names
    user = feats[:, names.index("user_id")] if "user_id" in names else np.zeros(n, dtype=np.int64)
    item = feats[:, names.index("item_id")] if "item_id" in names else np.zeros(n, dtype=np.int64)
    return InteractionLog(schema, user, item, feats, click, conv)


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_line():
    """Record one PASS/FAIL line per criterion; they are echoed in the terminal summary."""

    def record(number, passed, detail):
        line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        _ACCEPTANCE_LINES.append((number, line))
        print(line, flush=True)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
