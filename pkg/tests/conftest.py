import time
from pathlib import Path

import numpy as np
import pytest

from msgm import tensor as T
from msgm.cli import main


def gradcheck(loss_fn, params, h=1e-5):
    """Largest relative error between tape gradients and central differences."""
    with T.Tape() as tape:
        loss = loss_fn()
    T.backward(loss, tape, params)
    worst = 0.0
    for p in params:
        numeric = T.finite_difference_grad(lambda: loss_fn().item(), p, h)
        worst = max(worst, T.relative_error(p.grad, numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ROOT = Path(__file__).resolve().parents[1]
CRITERION6_CONFIG = ROOT / "configs" / "synthetic_leave2.json"


def run_cli(*argv):
    """Run the CLI in-process; returns (exit code, elapsed seconds)."""
    start = time.perf_counter()
    code = main([str(a) for a in argv])
    return code, time.perf_counter() - start


@pytest.fixture(scope="session")
def synthetic_run(tmp_path_factory):
    """The full synthetic leave-2-subjects-out experiment, trained once per session."""
    out = tmp_path_factory.mktemp("criterion6") / "run"
    code, elapsed = run_cli("train", "--synthetic", "--config", CRITERION6_CONFIG, "--out", out)
    return out, code, elapsed
