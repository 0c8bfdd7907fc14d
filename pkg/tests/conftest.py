import numpy as np
import pytest

from pdcfrs.config import ExperimentConfig
from pdcfrs.model import ModelParams


def tiny_config(**kw) -> ExperimentConfig:
    base = dict(synth_users=40, synth_items=60, synth_clusters=4, synth_mean_interactions=10.0,
                rounds=2, batch_size=16, dim=8, layers=(8, 4), alpha=5, aux_batch_size=64, out="unused")
    base.update(kw)
    return ExperimentConfig(**base)


def random_params(rng, num_users=3, num_items=4, dim=4, layers=(5, 3), activation="relu", scale=0.7):
    """Parameters at O(1) scale with non-zero biases, keeping ReLU inputs away from the kink."""
    widths = [2 * dim, *layers]
    return ModelParams(
        U=rng.normal(size=(num_users, dim)),
        V=rng.normal(size=(num_items, dim)),
        weights=[rng.normal(scale=scale, size=(a, b)) for a, b in zip(widths[:-1], widths[1:])],
        biases=[rng.normal(scale=0.3, size=b) for b in widths[1:]],
        h=rng.normal(size=widths[-1]),
        activation=activation,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES = []


def report(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
