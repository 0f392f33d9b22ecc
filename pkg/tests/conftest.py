import numpy as np
import pytest
from hypothesis import settings

from pocs.subspace import SubspaceModel

settings.register_profile("suite", deadline=None, max_examples=40)
settings.load_profile("suite")


def random_model(d: int, k: int, seed: int = 0, mu_scale: float = 1.0) -> SubspaceModel:
    """A synthetic model with an exactly orthonormal random basis."""
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    singular = np.sort(rng.uniform(0.1, 3.0, size=d))[::-1]
    return SubspaceModel(
        mu=mu_scale * rng.standard_normal(d),
        basis_k=q[:, :k],
        basis_perp=q[:, k:],
        singular_values=singular,
        k=k,
    )


@pytest.fixture
def model_factory():
    return random_model


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            if getattr(report, "when", "call") != "call":
                continue
            if "test_acceptance" not in report.nodeid:
                continue
            name = report.nodeid.split("::")[-1]
            lines.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if not lines:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, verdict in sorted(lines):
        terminalreporter.write_line(f"{verdict}  {name}")
