import numpy as np


def random_stable(n, m, p, rng, radius=0.9):
    """Random (A, B, C) with spectral radius exactly ``radius``."""
    A = rng.normal(size=(n, n))
    A *= radius / np.max(np.abs(np.linalg.eigvals(A)))
    return A, rng.normal(size=(n, m)), rng.normal(size=(p, n))


CRITERIA = {}


def record_criterion(number, ok, detail):
    """Remember one acceptance verdict; printed in the terminal summary."""
    CRITERIA[number] = (bool(ok), detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(CRITERIA):
        ok, detail = CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'} - {detail}")
