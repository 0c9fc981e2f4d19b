import numpy as np
import pytest

from pooled_spline import _backend
from pooled_spline.data import PooledDataset

ACCEPTANCE_LINES = []


def record_acceptance(label, passed, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {label}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(params=["cython", "python"])
def kernel(request):
    if request.param == "cython":
        try:
            from pooled_spline import _ckernels  # noqa: F401
        except ImportError:
            pytest.skip("compiled kernel not built")
    return _backend.get_kernel(request.param)


def random_stratum(rng, max_size=10, n_feat=None):
    N = int(rng.integers(2, max_size + 1))
    n = int(rng.integers(1, N))
    D = int(n_feat or rng.integers(1, 5))
    F = rng.normal(size=(N, D))
    y = np.zeros(N, np.int8)
    y[rng.choice(N, n, replace=False)] = 1
    beta = rng.normal(scale=0.8, size=D)
    return F, y, beta


def make_matched(rng, n_strata=50, n_case=1, n_ctrl=1, n_z=0, study="A", beta=0.5, reference=True):
    """Small synthetic matched dataset with x_ref observed for everyone."""
    rows = {"study": [], "stratum": [], "case": [], "x": [], "z": []}
    for j in range(n_strata):
        x = rng.normal(size=n_case + n_ctrl)
        # tilt cases toward higher x so the data carry signal
        x[:n_case] += beta
        for i in range(n_case + n_ctrl):
            rows["study"].append(study)
            rows["stratum"].append(str(j))
            rows["case"].append(1 if i < n_case else 0)
            rows["x"].append(x[i])
            rows["z"].append(rng.normal(size=n_z))
    x = np.array(rows["x"])
    return PooledDataset.build(rows["study"], rows["stratum"], rows["case"], w=x, x_ref=x,
                               z=np.array(rows["z"]).reshape(len(x), n_z),
                               reference_lab={study: reference})
