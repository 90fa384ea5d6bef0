import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from pixelrnn import checkpoint
from pixelrnn.errors import ConfigurationError, FormatError
from pixelrnn.network import Network, NetworkSpec


class TestRoundTrip:
    def test_bit_exact_including_special_values(self):
        params = {
            "a": np.array([0.0, -0.0, 1e-310, np.pi, -np.inf, np.inf]),
            "b.scalar": np.array(2.5),
            "c": np.arange(24.0).reshape(2, 3, 4),
            "empty": np.zeros((0, 3)),
        }
        header, out = checkpoint.decode(checkpoint.encode(params, {"kind": "row_lstm", "h": "8"}))
        assert header == {"kind": "row_lstm", "h": "8"}
        assert list(out) == list(params)
        for k in params:
            assert out[k].shape == params[k].shape
            assert out[k].tobytes() == params[k].tobytes()

    def test_nan_payload_preserved(self):
        a = np.array([np.nan, 1.0])
        _, out = checkpoint.decode(checkpoint.encode({"x": a}))
        assert out["x"].tobytes() == a.tobytes()

    @given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=4, max_side=4)))
    def test_property(self, arr):
        _, out = checkpoint.decode(checkpoint.encode({"w": arr}))
        assert out["w"].tobytes() == arr.tobytes() and out["w"].shape == arr.shape

    def test_layout(self):
        buf = checkpoint.encode({"ab": np.array([[1.5]])}, {"k": "v"})
        assert buf[:5] == b"PXSQ1"
        assert struct.unpack("<Q", buf[5:13])[0] == 4 and buf[13:17] == b"k=v\n"
        rest = buf[17:]
        assert struct.unpack("<Q", rest[:8])[0] == 2 and rest[8:10] == b"ab"
        assert struct.unpack("<QQQ", rest[10:34]) == (2, 1, 1)
        assert struct.unpack("<d", rest[34:]) == (1.5,)

    def test_network_save_load(self, tmp_path):
        net = Network(NetworkSpec(kind="diag_bilstm", depth=1, h=3, output_head="softmax256x3", head_width=6), 4, 5)
        net.save(tmp_path / "m.pxsq")
        back = Network.load(tmp_path / "m.pxsq")
        assert back.spec == net.spec and back.n == 4
        for a, b in zip(net.parameters(), back.parameters()):
            assert a.name == b.name and a.data.tobytes() == b.data.tobytes()

    def test_equal_seeds_give_identical_checkpoints(self):
        spec = NetworkSpec(kind="row_lstm", depth=2, h=4)
        a = checkpoint.encode(Network(spec, 5, 3).state_dict(), Network(spec, 5, 3).header())
        b = checkpoint.encode(Network(spec, 5, 3).state_dict(), Network(spec, 5, 3).header())
        assert a == b

    def test_bad_header_entry(self):
        with pytest.raises(ConfigurationError):
            checkpoint.encode({}, {"a=b": "1"})


class TestRejection:
    def _valid(self):
        return checkpoint.encode({"w": np.ones((2, 2)), "b": np.zeros(2)}, {"x": "1"})

    def test_bad_magic(self):
        with pytest.raises(FormatError) as exc:
            checkpoint.decode(b"PXSQ2" + self._valid()[5:])
        assert exc.value.offset == 0

    @pytest.mark.parametrize("cut", [3, 9, 15, 20, 30, 50, -1])
    def test_truncation_reports_offset(self, cut):
        buf = self._valid()
        with pytest.raises(FormatError) as exc:
            checkpoint.decode(buf[:cut])
        assert 0 <= exc.value.offset <= len(buf)
        assert "offset" in str(exc.value)

    def test_duplicate_name(self):
        buf = checkpoint.encode({"w": np.ones(1)})
        body = buf[5 + 8:]
        with pytest.raises(FormatError, match="duplicate"):
            checkpoint.decode(buf + body)

    def test_absurd_rank(self):
        buf = checkpoint.MAGIC + struct.pack("<Q", 0) + struct.pack("<Q", 1) + b"w" + struct.pack("<Q", 99)
        with pytest.raises(FormatError, match="rank"):
            checkpoint.decode(buf)

    def test_fuzz_random_bytes(self):
        rng = np.random.default_rng(0)
        for i in range(1000):
            raw = rng.integers(0, 256, size=int(rng.integers(0, 200)), dtype=np.uint8).tobytes()
            if i % 2:
                raw = checkpoint.MAGIC + raw
            with pytest.raises(FormatError):
                checkpoint.decode(raw)
