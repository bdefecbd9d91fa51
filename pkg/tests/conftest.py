"""Brute-force reference implementations shared by the tests."""
import itertools

import numpy as np
import pytest


def naive_convolve(x, w, b=None, stride=1, pad=0):
    """Direct nested-loop cross-correlation for any spatial rank."""
    N, C = x.shape[:2]
    O = w.shape[0]
    ks = w.shape[2:]
    rank = len(ks)
    xp = np.pad(x, [(0, 0), (0, 0)] + [(pad, pad)] * rank)
    outs = [(n + 2 * pad - k) // stride + 1 for n, k in zip(x.shape[2:], ks)]
    y = np.zeros((N, O, *outs))
    for n in range(N):
        for o in range(O):
            for pos in itertools.product(*map(range, outs)):
                acc = 0.0 if b is None else b[o]
                for c in range(C):
                    for off in itertools.product(*map(range, ks)):
                        src = tuple(p * stride + q for p, q in zip(pos, off))
                        acc += xp[(n, c) + src] * w[(o, c) + off]
                y[(n, o) + pos] = acc
    return y


def naive_cost_volume(left, right, max_disparity):
    N, F, H, W = left.shape
    nd = max_disparity // 4
    out = np.zeros((N, 2 * F, nd, H, W), dtype=left.dtype)
    for n in range(N):
        for d in range(nd):
            for y in range(H):
                for x in range(W):
                    for c in range(F):
                        out[n, c, d, y, x] = left[n, c, y, x]
                        if x - d >= 0:
                            out[n, F + c, d, y, x] = right[n, c, y, x - d]
    return out


def brute_metrics(pred, gt, mask):
    """Per-pixel counting, written independently of the library."""
    errs, d1 = [], 0
    for p, g, m in zip(pred.ravel(), gt.ravel(), mask.ravel()):
        if not m:
            continue
        e = abs(float(p) - float(g))
        errs.append(e)
        if e > 3 and e > 0.05 * float(g):
            d1 += 1
    n = len(errs)
    rates = {k: 100.0 * sum(1 for e in errs if e > k) / n for k in (1, 2, 3, 4, 5)}
    return {"n": n, "rates": rates, "d1": 100.0 * d1 / n,
            "mae": sum(errs) / n, "rms": (sum(e * e for e in errs) / n) ** 0.5}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- acceptance summary

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    name = item.originalname or item.name
    if not name.startswith("test_criterion_"):
        return
    key = int(name.split("_")[2])
    doc = (item.function.__doc__ or name).strip().splitlines()[0]
    failed = report.failed or (report.when == "call" and report.skipped)
    prev = _criteria.get(key, (doc, "PASS"))[1]
    if report.when == "call" or failed:
        _criteria[key] = (doc, "FAIL" if failed or prev == "FAIL" else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_criteria):
        doc, status = _criteria[key]
        terminalreporter.write_line(f"criterion {key:2d}: {status}  {doc}")
