import numpy as np
import pytest

from jps.model import Batch, ModelConfig, init_params
from jps.tensor_core import SeededRng

TINY = ModelConfig(num_blocks=2, d_model=4, num_tokens=2, mlp_hidden=8, num_classes=3)


def tiny_problem(seed, cfg=TINY, n=5, perturb=0.1):
    """Seeded random params (biases and LN perturbed away from init) and batch."""
    rng = SeededRng(seed, 51)
    params = init_params(cfg, rng)
    for pid in params:
        params[pid][...] += perturb * rng.randn(params[pid].shape)
    batch = Batch(rng.randn((n, cfg.num_tokens, cfg.d_model)), rng.integers(0, cfg.num_classes, n),
                  np.zeros(n, dtype=np.int64))
    return params, batch


@pytest.fixture
def tiny():
    return tiny_problem(0)


@pytest.fixture(autouse=True)
def _cache_dir(tmp_path_factory, monkeypatch):
    monkeypatch.setenv("JPS_CACHE_DIR", str(tmp_path_factory.getbasetemp() / "theta0-cache"))


# frozen-coordinate audit ------------------------------------------------
# Every call to jps.trainer.train made by any test is re-checked here, independently of the
# trainer's own verification: coordinates outside mask ∪ head must equal theta0 bit for bit.

FROZEN_AUDIT = {"runs": 0, "violations": []}


def frozen_violations(params, mask, cfg, train_head=True):
    from jps.selection import eligible_coords

    allowed = {}
    if mask.L:
        imap = eligible_coords(cfg, mask.L)
        for pid, start, shape in imap.segments:
            n = int(np.prod(shape))
            sel = mask.selected[(mask.selected >= start) & (mask.selected < start + n)] - start
            allowed[pid] = set(int(i) for i in sel)
    if train_head:
        for pid in ("head.weight", "head.bias"):
            allowed[pid] = set(range(params[pid].size))
    bad = []
    for pid in params:
        live = params[pid].reshape(-1).view(np.int64)
        ref = params.theta0[pid].reshape(-1).view(np.int64)
        moved = set(np.flatnonzero(live != ref).tolist())
        if not moved <= allowed.get(pid, set()):
            bad.append(pid)
    return bad


@pytest.fixture(autouse=True, scope="session")
def _audit_training():
    import jps.cli as cli
    import jps.trainer as trainer

    original = trainer.train

    def audited(theta0, cfg, tcfg, split, mask, expected_hash=None, seed=None, train_head=True):
        entry, params = original(theta0, cfg, tcfg, split, mask, expected_hash, seed, train_head)
        FROZEN_AUDIT["runs"] += 1
        bad = frozen_violations(params, mask, cfg, train_head)
        if bad:
            FROZEN_AUDIT["violations"].append((mask.kind.value, bad))
        return entry, params

    trainer.train = cli.train = audited
    yield FROZEN_AUDIT
    trainer.train = cli.train = original


# acceptance reporting -----------------------------------------------------

ACCEPTANCE_LINES = []


def report_criterion(number, passed, detail):
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
