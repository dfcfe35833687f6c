'''
Unit tests for the TSR1 tensor container.
'''

import json

import numpy as np
import pytest

from bevsearch.errors import DataError
from bevsearch.tensor_io import MAGIC, load_bundle, save_bundle, sidecar_path


class TestBundle:
    '''Binary records plus a JSON sidecar.'''

    def test_reload_keeps_order_and_header(self, tmp_path):
        tensors = {"z": np.arange(6.0).reshape(2, 3), "a": np.array(2.5), "m": np.ones((1, 2, 2))}
        path = save_bundle(tmp_path / "x.tsr", tensors, {"kind": "test"})
        loaded, header = load_bundle(path)
        assert list(loaded) == ["z", "a", "m"]
        assert header == {"kind": "test"}
        for name in tensors:
            np.testing.assert_array_equal(loaded[name], tensors[name])

    def test_record_layout(self, tmp_path):
        path = save_bundle(tmp_path / "x.tsr", {"v": np.array([1.0, 2.0])})
        data = path.read_bytes()
        assert data[:4] == MAGIC
        assert len(data) == 4 + 4 + 4 + 16

    def test_same_input_same_bytes(self, tmp_path):
        tensors = {"v": np.linspace(0, 1, 5)}
        a = save_bundle(tmp_path / "a.tsr", tensors, {"n": 5})
        b = save_bundle(tmp_path / "b.tsr", tensors, {"n": 5})
        assert a.read_bytes() == b.read_bytes()
        assert sidecar_path(a).read_text() == sidecar_path(b).read_text()

    def test_truncated_payload(self, tmp_path):
        path = save_bundle(tmp_path / "x.tsr", {"v": np.ones(4)})
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(DataError):
            load_bundle(path)

    def test_bad_magic(self, tmp_path):
        path = save_bundle(tmp_path / "x.tsr", {"v": np.ones(4)})
        path.write_bytes(b"XXXX" + path.read_bytes()[4:])
        with pytest.raises(DataError):
            load_bundle(path)

    def test_missing_sidecar(self, tmp_path):
        path = save_bundle(tmp_path / "x.tsr", {"v": np.ones(4)})
        sidecar_path(path).unlink()
        with pytest.raises(DataError):
            load_bundle(path)

    def test_malformed_sidecar(self, tmp_path):
        path = save_bundle(tmp_path / "x.tsr", {"v": np.ones(4)})
        sidecar_path(path).write_text(json.dumps({"version": "1.0"}), encoding="utf-8")
        with pytest.raises(DataError):
            load_bundle(path)
