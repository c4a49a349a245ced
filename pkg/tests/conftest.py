import numpy as np
import pytest

from scaledtucker.tensor_core import FactorQuad

# (criterion, passed, detail) lines collected by the acceptance suite
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in ACCEPTANCE_LINES:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


def random_quad(rng, dims, ranks, scale=1.0):
    return FactorQuad(*(scale * rng.standard_normal((n, r)) for n, r in zip(dims, ranks)),
                      scale * rng.standard_normal(ranks))


def perturbed_truth(G, target, seed):
    """Ground-truth factors plus a random perturbation scaled so that the
    scaled distance to the truth is ``target`` (to a few percent)."""
    from scaledtucker.factors import scaled_distance

    D = random_quad(np.random.default_rng(seed), G.dims, G.ranks)
    base = G.factors

    def at(t):
        return FactorQuad(base.U + t * D.U, base.V + t * D.V, base.W + t * D.W, base.S + t * D.S)

    t = target / scaled_distance(at(1.0), G).dist
    for _ in range(5):
        t *= target / scaled_distance(at(t), G).dist
    return at(t)


def well_conditioned(rng, r, cond=3.0):
    """Random r x r matrix with condition number at most ``cond``."""
    q1, _ = np.linalg.qr(rng.standard_normal((r, r)))
    q2, _ = np.linalg.qr(rng.standard_normal((r, r)))
    s = np.linspace(1.0, 1.0 / cond, r) if r > 1 else np.ones(1)
    return q1 @ np.diag(s) @ q2


def rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
