import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from tmignn.autograd import Tape  # noqa: E402
from tmignn.data import SessionRecord  # noqa: E402
from tmignn.model import ModelConfig, ModelParams  # noqa: E402


def random_session(rng, n_items, length=None, max_gap=400, sid="s"):
    length = length or int(rng.integers(1, 8))
    items = [int(i) for i in rng.integers(0, n_items, size=length)]
    stamps = np.cumsum(np.r_[0, rng.integers(0, max_gap, size=length - 1)]).tolist()
    return SessionRecord(sid, items, [int(t) for t in stamps])


def toy_params(seed=7, n_items=6, dim=4, H=2, K=2, max_step=20, std=0.1, **kw):
    cfg = ModelConfig(n_items=n_items, dim=dim, n_interests=H, n_layers=K, max_step=max_step, init_std=std, **kw)
    return ModelParams.initialize(cfg, seed)


def finite_difference_check(params, loss_fn, h=1e-5):
    """Tape gradients and central differences for every parameter.

    Returns ``{name: (tape_grad, fd_grad)}``. ``loss_fn(params)`` returns a
    scalar Tensor built from the current parameter values.
    """
    params.zero_grad()
    with Tape() as tape:
        loss = loss_fn(params)
    tape.backward(loss)
    out = {}
    for name, t in params.items():
        tape_grad = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = float(loss_fn(params).data)
            flat[i] = old - h
            down = float(loss_fn(params).data)
            flat[i] = old
            fd.reshape(-1)[i] = (up - down) / (2 * h)
        out[name] = (tape_grad, fd)
    return out


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-300))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def criterion(request):
    """``record(n, ok, detail)`` prints one PASS/FAIL line and keeps it for the summary."""
    lines = request.config.__dict__.setdefault("_criteria_lines", [])

    def record(n, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        print(line)
        lines.append(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_criteria_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
