import numpy as np
import pytest

from splitbnn.io import IDX_IMAGES, IDX_LABELS


def _idx(arr, magic):
    header = magic.to_bytes(4, "big") + b"".join(d.to_bytes(4, "big") for d in arr.shape)
    return header + arr.astype(np.uint8).tobytes()


@pytest.fixture(scope="session")
def tiny_mnist(tmp_path_factory):
    """Synthetic IDX files: class-dependent bright stripes plus noise."""
    root = tmp_path_factory.mktemp("mnist")
    rng = np.random.default_rng(0)
    for prefix, n in (("train", 400), ("t10k", 100)):
        labels = rng.integers(0, 10, n)
        img = rng.integers(0, 60, (n, 28, 28))
        for i, c in enumerate(labels):
            img[i, 2 * c + 4:2 * c + 6, :] += 180
        (root / f"{prefix}-images-idx3-ubyte").write_bytes(_idx(img, IDX_IMAGES))
        (root / f"{prefix}-labels-idx1-ubyte").write_bytes(_idx(labels, IDX_LABELS))
    return root


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Record one acceptance criterion's outcome for the end-of-run summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        _CRITERIA[number] = (bool(passed), detail)
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
