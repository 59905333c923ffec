import sys
from pathlib import Path

import numpy as np
import pytest

SRC = Path(__file__).resolve().parent.parent / "src"
if str(SRC) not in sys.path:
    sys.path.insert(0, str(SRC))

from lsrec.ingest import UserSequence  # noqa: E402


def make_sequence(user, items, types=None, timestamps=None):
    items = np.asarray(items, dtype=np.int32)
    if types is None:
        types = np.zeros(len(items), dtype=np.uint8)
    if timestamps is None:
        timestamps = np.arange(len(items), dtype=np.int64)
    return UserSequence(user, items, np.asarray(types, dtype=np.uint8),
                        np.asarray(timestamps, dtype=np.int64))


@pytest.fixture
def tiny_sequences():
    rng = np.random.default_rng(0)
    return [
        make_sequence(f"u{i:02d}", rng.integers(0, 20, rng.integers(2, 12)))
        for i in range(12)
    ]
