import os
from pathlib import Path

import numpy as np
import pytest

MNIST_DIR = Path(os.environ.get("BIRVAE_MNIST_DIR", "/root/data/mnist"))
GOLDEN_DIR = Path(__file__).parent / "golden"


def mnist_path(name: str) -> Path:
    return MNIST_DIR / name


def have_mnist() -> bool:
    return all((MNIST_DIR / f).exists() for f in (
        "train-images-idx3-ubyte", "train-labels-idx1-ubyte",
        "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"))


requires_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST IDX files not found in {MNIST_DIR}")


def finite_difference_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` with respect to every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


CRITERIA: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    CRITERIA[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(CRITERIA[number])


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])
