import os

import hypothesis
import numpy as np
import pytest

from geonorm.training import default_corpus_path

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=5)
hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("debugger", report_multiple_bugs=False)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def text_corpus(tmp_path):
    path = tmp_path / 'corpus.txt'
    text = ('the quick brown fox jumps over the lazy dog. ' * 60).encode('utf-8')
    path.write_bytes(text)
    return str(path)


@pytest.fixture(scope='session')
def default_corpus():
    return default_corpus_path(verbose=None)
