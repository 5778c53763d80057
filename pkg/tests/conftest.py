from __future__ import annotations

import numpy as np
import pytest
import torch

from imed import kernels


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(params=["python", "compiled"])
def backend(request, monkeypatch):
    """Run a test once per grouped-matmul backend."""
    if request.param == "compiled" and kernels._grouped is None:
        pytest.skip("compiled extension not built")
    monkeypatch.setattr(kernels, "BACKEND", request.param)
    return request.param


def dense_oracle(d_in: int, d_out: int, groups: int, tau: int, params: np.ndarray) -> np.ndarray:
    """Dense matrix of a shuffle layer, built straight from its wiring rule.

    Input i sits in group a = i // (d_in/h), subgroup j = (i % (d_in/h)) // (d_in/h^2),
    offset s. It feeds output group j only, as row a * (d_in/h^2) + s of block j.
    """
    h = groups
    gin, sub, gout = d_in // h, d_in // (h * h), d_out // h
    n_blocks = 1 if h < tau else h
    blocks = params.reshape(n_blocks, gin, gout)
    i = np.arange(d_in)
    a, j, s = i // gin, (i % gin) // sub, i % sub
    rows = a * sub + s
    dense = np.zeros((d_in, d_out), dtype=params.dtype)
    block = j if n_blocks > 1 else np.zeros_like(j)
    for col in range(gout):
        dense[i, j * gout + col] = blocks[block, rows, col]
    return dense


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
