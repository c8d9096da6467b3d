import numpy as np
import pytest

from streamtts.corpus import Corpus, CorpusSpec
from streamtts.model import Model, ModelConfig
from streamtts.tensor import Tensor, backward


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f() with respect to array x (in place)."""
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


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def grad_check(build, arrays: list[np.ndarray]) -> float:
    """Max relative error between autodiff and finite differences for all inputs."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(*tensors)
    backward(loss)
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f():
            return float(build(*[Tensor(x) for x in arrays]).data)
        worst = max(worst, rel_error(t.grad, numeric_grad(f, a)))
    return worst


@pytest.fixture(scope="session")
def corpus():
    return Corpus(CorpusSpec(num_utterances=200))


@pytest.fixture(scope="session")
def toy_model():
    return Model(ModelConfig.toy(), seed=3)


@pytest.fixture(scope="session")
def toy_inference(toy_model):
    return toy_model.inference()
