import numpy as np
import pytest

from streamtts import checkpoint
from streamtts.errors import ParseError, ValidationError
from streamtts.grid import NUM_CODEBOOKS, TokenGrid


def test_checkpoint_byte_exact_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal(5).astype(np.float32),
              "c": np.arange(6, dtype=np.int64).reshape(2, 3), "d": np.array([7], dtype=np.int32)}
    path = tmp_path / "x.ckpt"
    checkpoint.save(path, arrays, {"k": [1, 2]})
    back, meta = checkpoint.load(path)
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and back[k].tobytes() == v.tobytes()
    assert checkpoint.dumps(back, meta) == path.read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(ParseError):
        checkpoint.loads(b"NOTACKPT" + b"\0" * 8)
    blob = checkpoint.dumps({"a": np.ones(4)})
    with pytest.raises(ParseError):
        checkpoint.loads(blob[:-3])


def _frames(n, vs=64, va=64, seed=0):
    rng = np.random.default_rng(seed)
    f = rng.integers(0, va, size=(n, NUM_CODEBOOKS))
    f[:, 0] = rng.integers(0, vs, size=n)
    return f


def test_grid_delay_geometry():
    f = _frames(5)
    g = TokenGrid.from_frames(f, 64, 64)
    assert g.width == 6 and g.num_frames == 5
    assert np.all(g.tokens[1:, 0] == 64)
    np.testing.assert_array_equal(g.frames(), f)
    np.testing.assert_array_equal(g.semantic, f[:, 0])
    with pytest.raises(IndexError):
        g.frame(5)


def test_grid_validation():
    bad = np.zeros((NUM_CODEBOOKS, 3), dtype=np.int64)
    with pytest.raises(ValidationError):
        TokenGrid(bad, 64, 64)
    with pytest.raises(ValidationError):
        TokenGrid(np.zeros((3, 3)), 64, 64)
    g = TokenGrid.from_frames(_frames(2), 64, 64).tokens.copy()
    g[0, 0] = 64
    with pytest.raises(ValidationError):
        TokenGrid(g, 64, 64)
