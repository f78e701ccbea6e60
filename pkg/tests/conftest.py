"""Shared fixtures for the test suite."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tmp_corpus(tmp_path):
    """A small on-disk synthetic corpus shared by CLI/train tests."""
    from xcryonet.synthgrid import generate_corpus

    out = tmp_path / "corpus"
    corpus = generate_corpus(24, seed=77, label_fraction=0.5, out_dir=out, size=32)
    return out, corpus
