import numpy as np
import pytest
import torch

from fairci import nets

TINY_ARCH = dict(image_size=8, conv1_channels=2, conv2_channels=2)


def tiny_encoder(seed=0, partitioned=False, split_index=8):
    return nets.init_encoder(
        seed, partitioned=partitioned, split_index=split_index, dtype=torch.float64, **TINY_ARCH
    )


def central_fd_check(loss_fn, params, step=1e-5):
    """Compare autograd against central finite differences for every scalar
    parameter. Returns the worst relative error."""
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                up = loss_fn().item()
                flat[i] = orig - step
                down = loss_fn().item()
                flat[i] = orig
                fd = (up - down) / (2 * step)
                an = g.view(-1)[i].item()
                denom = max(abs(fd), abs(an), 1e-6)
                worst = max(worst, abs(fd - an) / denom)
    return worst


@pytest.fixture
def tiny_batch():
    rng = np.random.default_rng(0)
    n = 12
    x = torch.from_numpy(rng.uniform(0, 1, size=(n, 1, 8, 8)))
    y = torch.tensor([0, 1] * (n // 2))
    s = torch.from_numpy(rng.uniform(1, 7, size=n))
    return x, y, s


# -- acceptance summary -----------------------------------------------------------
# Tests marked ``criterion(n)`` roll up into one pass/fail line per criterion,
# printed at the end of the session. Details come from ``record_property``.

_criteria: dict = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    entry = _criteria.setdefault(mark.args[0], {"failed": [], "skipped": [], "passed": [], "details": []})
    if report.when == "call" or report.outcome != "passed":
        bucket = {"passed": "passed", "failed": "failed", "skipped": "skipped"}[report.outcome]
        entry[bucket].append(item.name)
    if report.when == "call":
        entry["details"].extend(f"{k}={v}" for k, v in item.user_properties if k != "criterion")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_criteria):
        e = _criteria[n]
        if e["failed"]:
            status = "FAIL"
        elif e["skipped"] and not e["passed"]:
            status = "SKIP"
        else:
            status = "PASS"
        detail = "; ".join(e["details"])
        tr.write_line(f"criterion {n}: {status}" + (f"  ({detail})" if detail else ""))
