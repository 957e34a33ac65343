import os

import numpy as np
import pytest

from naisnet.dynamics import ConvBlockParams, FcBlockParams
from naisnet.projection import project_conv, project_fc
from naisnet.training.data import DATA_ENV, load_mnist


def random_projected_fc(rng, n=None, m=None, eps=None, h=None, activation="tanh", b_scale=0.5):
    n = int(rng.integers(2, 17)) if n is None else n
    m = int(rng.integers(1, 6)) if m is None else m
    eps = float(rng.choice([0.01, 0.05, 0.1])) if eps is None else eps
    h = float(rng.choice([0.5, 1.0])) if h is None else h
    R, _ = project_fc(rng.normal(size=(n, n)), eps)
    return FcBlockParams(R, rng.normal(size=(n, m)), b_scale * rng.normal(size=n), h=h, eps=eps,
                         activation=activation)


def random_conv(rng, project=True, channels=None, in_channels=None, size=None, n_x=None,
                eps=0.01, eta=0.1, h=1.0, activation="relu"):
    N_C = int(rng.integers(1, 4)) if channels is None else channels
    N_U = int(rng.integers(1, 4)) if in_channels is None else in_channels
    n_C = int(rng.choice([3, 5])) if size is None else size
    n_X = int(rng.integers(2, 7)) if n_x is None else n_x
    p = ConvBlockParams(
        C=rng.normal(size=(N_C, N_C, n_C, n_C)),
        D=rng.normal(size=(N_C, N_U, n_C, n_C)),
        E=rng.normal(size=N_C),
        delta=rng.uniform(-2, 2, size=N_C),
        n_X=n_X, n_U=n_X, h=h, eps=eps, eta=eta, activation=activation,
    )
    return project_conv(p)[0] if project else p


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory):
    """MNIST directory: $NAISNET_DATA if set, else the bundled 5000-digit sample."""
    env = os.environ.get(DATA_ENV)
    if env:
        return env
    try:
        from naisnet.training.data import export_bundled_mnist

        root = export_bundled_mnist(tmp_path_factory.mktemp("mnist"))
        load_mnist(root, "subset")
        return str(root)
    except ImportError:
        pytest.skip(f"no MNIST: set ${DATA_ENV} or install the 'data' extra")


def rpi_sweep(rng, p, starts, floor=0.5, steps=200):
    """Largest excursion beyond the invariant-ball radius over boundary starts.

    The ball and input budget are sized so every visited state keeps tanh
    slopes above ``floor``, which is where the contraction bound applies.
    """
    from naisnet.dynamics import steady_state_tanh, unroll_fixed
    from naisnet.stability import fc_rho_bound, io_gain, rpi_radius

    rho = fc_rho_bound(p.h, p.eps, floor)
    z_max = np.arctanh(np.sqrt(1 - floor))
    mu = z_max / ((1 - p.eps) * io_gain(p, rho) + np.linalg.norm(p.B, 2))
    radius = rpi_radius(p, mu, rho)
    u = rng.normal(size=p.m)
    xbar = steady_state_tanh(p, u)
    worst = -np.inf
    for _ in range(starts):
        d = rng.normal(size=p.n)
        w = rng.normal(size=p.m)
        w *= rng.uniform(0, mu) / np.linalg.norm(w)
        traj = unroll_fixed(p, u + w, steps, x0=xbar + radius * d / np.linalg.norm(d))
        worst = max(worst, max(np.linalg.norm(x - xbar) for x in traj.states) - radius)
    return worst


GRAD_STEP = 1e-5
GRAD_TOL = 1e-5


def _region(cache):
    """Piecewise-smooth region of a forward pass: ReLU sign pattern and realized depths."""
    sig = []
    for bc in cache.blocks:
        sig.append(bc.depth.tobytes())
        sig.extend((z > 0).tobytes() for z in bc.pre)
    return tuple(sig)


def gradient_check(model, X, y):
    """Worst relative error of ``backward`` against central differences.

    Coordinates whose perturbation changes the region (a ReLU kink or a
    stopping decision) are skipped; returns ``(worst, checked, skipped)``.
    """
    from naisnet.training import backward, forward_loss

    loss, cache = forward_loss(model, X, y)
    grads = backward(model, cache)
    base = _region(cache)
    # A central difference carries rounding noise of about eps*|L|/step, so a
    # coordinate smaller than noise/tol cannot be resolved to the tolerance;
    # those are compared at the noise level instead of relatively.
    floor = np.finfo(float).eps * max(abs(loss), 1.0) / (GRAD_STEP * GRAD_TOL)
    worst, checked, skipped = 0.0, 0, 0
    for name, p in model.parameters().items():
        g = grads.get(name, np.zeros_like(p))
        for i in np.ndindex(p.shape):
            orig = p[i]
            p[i] = orig + GRAD_STEP
            lp, cp = forward_loss(model, X, y)
            p[i] = orig - GRAD_STEP
            lm, cm = forward_loss(model, X, y)
            p[i] = orig
            if _region(cp) != base or _region(cm) != base:
                skipped += 1
                continue
            fd = (lp - lm) / (2 * GRAD_STEP)
            worst = max(worst, abs(fd - g[i]) / max(abs(fd), abs(g[i]), floor))
            checked += 1
    return worst, checked, skipped


def random_train_config(rng, t):
    """Small model plus batch for gradient checks; cycles activations and weight tying."""
    from naisnet.training import init_model

    act = ("tanh", "relu")[t % 2]
    n, m, K = int(rng.integers(2, 9)), int(rng.integers(1, 6)), int(rng.integers(1, 11))
    model = init_model(m, n, 3, K=K, activation=act, shared=bool(t % 3), non_autonomous=bool(t % 5),
                       blocks=1 + (t % 4 == 0), h=float(rng.choice([0.5, 1.0])), seed=t)
    for p in model.parameters().values():
        p += rng.normal(0, 0.3, p.shape)
    return model, rng.normal(size=(4, m)), rng.integers(0, 3, 4)


# -- acceptance reporting ------------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line per acceptance criterion and return the verdict."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
