import os
import re
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from agegender.data import clear_image_cache  # noqa: E402
from agegender.synthetic import make_utk_folder  # noqa: E402

_ACCEPTANCE = []


class _Criterion:
    def __init__(self, key, text):
        self.key, self.text = key, text
        self.soft = None

    def __enter__(self):
        return self

    def soft_fail(self, why):
        """Report-gated target missed: recorded, but the test itself does not fail."""
        self.soft = why

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None and self.soft:
            _ACCEPTANCE.append((self.key, "SOFT-FAIL", f"{self.text} ({self.soft})"))
        elif exc_type is None:
            _ACCEPTANCE.append((self.key, "PASS", self.text))
        elif issubclass(exc_type, pytest.skip.Exception):
            _ACCEPTANCE.append((self.key, "SKIP", f"{self.text} ({exc})"))
        else:
            _ACCEPTANCE.append((self.key, "FAIL", f"{self.text} ({exc_type.__name__}: {exc})"))
        return False


@pytest.fixture
def criterion():
    """``with criterion("4", "text"):`` records a pass/fail line for the acceptance summary."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    def order(row):
        num, suffix = re.match(r"(\d*)(.*)", row[0]).groups()
        return int(num or 0), suffix

    for key, status, text in sorted(_ACCEPTANCE, key=order):
        terminalreporter.write_line(f"[{status}] criterion {key}: {text}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _fresh_image_cache():
    clear_image_cache()
    yield


@pytest.fixture(scope="session")
def utk_dir(tmp_path_factory):
    """60 synthetic UTK-style PNGs with a learnable signal."""
    d = tmp_path_factory.mktemp("utk")
    make_utk_folder(d, 60, size=64, seed=3)
    return d


def real_utk_dir():
    d = os.environ.get("AAG_UTKFACE_DIR")
    return Path(d) if d and Path(d).is_dir() else None
