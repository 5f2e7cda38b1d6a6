import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from gradcert.network import Conv2D, Dense, Flatten, build_network

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# acceptance verdict lines, repeated in the terminal summary so they survive output capture
VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS):
            terminalreporter.write_line(line)


def random_mlp(rng, n_in=None, depth=None, width=None, classes=None, activation="relu", seed=None):
    """Random dense network; biases are randomised so kinks land inside boxes."""
    n_in = n_in or int(rng.integers(2, 6))
    depth = depth or int(rng.integers(1, 4))
    classes = classes or int(rng.integers(2, 5))
    plan = []
    for _ in range(depth - 1):
        plan.append((Dense(width or int(rng.integers(2, 33))), activation))
    plan.append((Dense(classes), "identity"))
    net = build_network((n_in,), plan, seed=int(rng.integers(1 << 30)) if seed is None else seed)
    params = [p.data + (0.3 * rng.standard_normal(p.shape) if p.ndim == 1 else 0.0) for p in net.parameters()]
    return net.with_parameters(params)


def small_cnn(seed=0, activation="softplus"):
    plan = [
        (Conv2D(3, 3, 3, stride=2, padding=1), activation),
        (Conv2D(2, 2, 2, stride=1), activation),
        (Flatten(), "identity"),
        (Dense(3), "identity"),
    ]
    return build_network((2, 6, 5), plan, seed=seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def fixed_net(input_size, layers):
    """Dense network from explicit ``[(W, b, activation), ...]`` with W shaped (out, in)."""
    plan = [(Dense(np.shape(w)[0]), act) for w, _, act in layers]
    net = build_network((input_size,), plan, seed=0)
    params = []
    for w, b, _ in layers:
        params.extend([np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64)])
    return net.with_parameters(params)
