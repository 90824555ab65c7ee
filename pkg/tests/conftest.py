import gzip
import struct

import numpy as np
import pytest

from seq2d.blockmap import StateVector
from seq2d.checks import GOLDEN_DIR, scalar_spec


def e0(m, h0):
    """State with ``h0`` in block 0 and zeros elsewhere."""
    h0 = np.atleast_1d(np.asarray(h0, dtype=np.float64))
    return StateVector.from_blocks([h0] + [np.zeros(d) for d in m.partition.sizes[1:]],
                                   m.partition)


def write_idx_bytes(path, magic, dims, payload, gz=False):
    raw = struct.pack(">I" + "I" * len(dims), magic, *dims) + bytes(payload)
    path.write_bytes(gzip.compress(raw) if gz else raw)
    return path


@pytest.fixture
def spec235():
    return scalar_spec(2.0, 3.0, 5.0)


@pytest.fixture
def golden_dir():
    return GOLDEN_DIR


@pytest.fixture
def tiny_mnist(tmp_path):
    """300 synthetic 8x8 'digits' in IDX form: class k lights up row k (k < 8) or a column."""
    rng = np.random.default_rng(0)
    n = 300
    labels = np.arange(n) % 10
    images = rng.integers(0, 40, size=(n, 8, 8))
    for i, k in enumerate(labels):
        if k < 8:
            images[i, k, :] = 250
        else:
            images[i, :, k - 6] = 250
    img = write_idx_bytes(tmp_path / "img.idx.gz", 0x803, (n, 8, 8),
                          images.astype(np.uint8).tobytes(), gz=True)
    lab = write_idx_bytes(tmp_path / "lab.idx", 0x801, (n,), labels.astype(np.uint8).tobytes())
    return img, lab


# acceptance criterion number -> (title, passed, detail)
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"[{'PASS' if passed else 'FAIL'}] {n:2d}. {title}: {detail}")
