import json

import numpy as np
import pytest

from vcil import checkpoint

from oracle import tiny_model


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {"a": rng.normal(size=(3, 4)), "b": np.array([np.pi, -0.0, 1e-300]), "c": np.zeros((0, 2))}
    size = checkpoint.save(tmp_path / "x.ckpt", arrays, {"task": 2})
    raw = (tmp_path / "x.ckpt").read_bytes()
    assert size == len(raw) == len(checkpoint.header_for(arrays, {"task": 2})) + 15 * 8
    back, meta = checkpoint.load(tmp_path / "x.ckpt")
    assert meta == {"task": 2} and list(back) == ["a", "b", "c"]
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert back[k].tobytes() == arrays[k].tobytes()


def test_header_is_json_line_and_blob_little_endian():
    raw = checkpoint.dumps({"w": np.array([1.0, 2.0])})
    head, blob = raw.split(b"\n", 1)
    h = json.loads(head)
    assert h["format"] == "vcil-ckpt" and h["count"] == 2 and h["tensors"][0]["offset"] == 0
    assert np.frombuffer(blob, dtype="<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("raw,match", [(b"no newline", "header"), (b"{bad\n", "unreadable"),
                                       (b'{"format":"other"}\n', "not a"),
                                       (b'{"format":"vcil-ckpt","version":9}\n', "version")])
def test_corrupt_inputs_rejected(raw, match):
    with pytest.raises(checkpoint.CheckpointError, match=match):
        checkpoint.loads(raw)


def test_truncated_blob_rejected():
    raw = checkpoint.dumps({"w": np.ones(4)})
    with pytest.raises(checkpoint.CheckpointError, match="declares 4"):
        checkpoint.loads(raw[:-8])


def test_model_restore():
    m = tiny_model(tasks=2)
    saved = {k: v.copy() for k, v in checkpoint.model_arrays(m).items()}
    for p in m.params.values():
        p.data[...] = 7.0
    checkpoint.restore(m, saved)
    assert all(np.array_equal(m.params[k].data, v) for k, v in saved.items())
    with pytest.raises(checkpoint.CheckpointError, match="not in model"):
        checkpoint.restore(m, {"ghost": np.ones(1)})
    name = next(iter(saved))
    with pytest.raises(checkpoint.CheckpointError, match="shape"):
        checkpoint.restore(m, {name: np.ones((99,))})
