import sys

import numpy as np
import pytest

from nmsparse.masks import PatternSpec

SPECS = [PatternSpec(2, 4), PatternSpec(4, 8), PatternSpec(8, 16), PatternSpec(16, 32)]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_matmul(X, W):
    """Triple loop X @ W.T, kept free of numpy reductions."""
    l, h = len(X), len(X[0])
    o = len(W)
    out = [[0.0] * o for _ in range(l)]
    for i in range(l):
        for k in range(o):
            acc = 0.0
            for j in range(h):
                acc += float(X[i][j]) * float(W[k][j])
            out[i][k] = acc
    return np.array(out)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is not None and acceptance.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance.LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line.splitlines()[0])


@pytest.fixture(scope="session")
def default_checkpoint(tmp_path_factory):
    """Default toy LM trained for 2,000 steps on the bundled train split, saved once per session."""
    from nmsparse.toylm import ToyLMConfig, load_corpus, save_checkpoint, split_corpus, train

    model = train(ToyLMConfig(), split_corpus(load_corpus())[0], steps=2000)
    path = tmp_path_factory.mktemp("default") / "default.ckpt"
    save_checkpoint(model, path)
    return path
