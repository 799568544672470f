"""Tests for the .tcpt tensor format and the seeded generator."""

import struct
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tcp_ssm.errors import (
    BadMagic,
    DtypeUnsupported,
    IoFailure,
    TcpError,
    TensorFormatError,
    TruncatedPayload,
)
from tcp_ssm.tensor_io import (
    MAGIC,
    Rng,
    decode_tensor,
    encode_tensor,
    randn,
    read_tensor,
    uniform,
    write_tensor,
)

SEED0_WORDS = [
    0xE220A8397B1DCDAF,
    0x6E789E6AA1B965F4,
    0x06C45D188009454F,
    0xF88BB8A8724C81EC,
    0x1B39896A51A8749B,
    0x53CB9F0C747EA2EA,
    0x2C829ABE1F4532E1,
    0xC584133AC916AB3C,
]

SEED0_RANDN = [
    -1.8839083333524405,
    0.86450685955751483,
    0.22760793546360525,
    -0.042112684686839159,
    -0.22143788059715477,
    0.41933282655598542,
    0.083418544195663927,
    -0.61240709160670592,
]


class TestTensorFormat:
    """Test encoding and decoding of .tcpt files."""

    def test_reads_known_float64_file(self, tmp_path: Path) -> None:
        """Test that a hand-built [2,3] float64 file decodes to 0..5."""
        header = b'{"dtype":"float64","order":"C","shape":[2,3]}'
        payload = struct.pack("<6d", 0, 1, 2, 3, 4, 5)
        path = tmp_path / "t.tcpt"
        path.write_bytes(MAGIC + struct.pack("<I", len(header)) + header + payload)

        t = read_tensor(path)
        assert t.shape == (2, 3)
        assert t.dtype == np.float64
        assert t.ravel().tolist() == [0, 1, 2, 3, 4, 5]

    def test_float32_payload_bytes(self) -> None:
        """Test that float32 1.0 is written as little-endian IEEE-754."""
        blob = encode_tensor(np.array([1.0], dtype=np.float32))
        assert blob.endswith(bytes([0x00, 0x00, 0x80, 0x3F]))

    def test_empty_tensor_has_no_payload(self) -> None:
        blob = encode_tensor(np.zeros(0))
        (header_len,) = struct.unpack("<I", blob[4:8])
        assert len(blob) == 8 + header_len
        assert decode_tensor(blob).shape == (0,)

    def test_header_is_sorted_compact_json(self) -> None:
        blob = encode_tensor(np.eye(2))
        (header_len,) = struct.unpack("<I", blob[4:8])
        assert blob[8 : 8 + header_len] == b'{"dtype":"float64","order":"C","shape":[2,2]}'

    def test_round_trip_identity_matrix(self, tmp_path: Path) -> None:
        path = tmp_path / "eye.tcpt"
        write_tensor(path, np.eye(2))
        np.testing.assert_array_equal(read_tensor(path), np.eye(2))

    @settings(max_examples=50, deadline=None)
    @given(
        shape=st.lists(st.integers(min_value=0, max_value=4), min_size=1, max_size=3),
        use_f32=st.booleans(),
        data=st.data(),
    )
    def test_round_trip_is_bitwise(self, shape: list[int], use_f32: bool, data: st.DataObject) -> None:
        """Test that decode(encode(t)) preserves dtype, shape and every bit."""
        dtype = np.float32 if use_f32 else np.float64
        n = int(np.prod(shape))
        values = data.draw(
            st.lists(
                st.floats(allow_nan=False, allow_infinity=False, width=32 if use_f32 else 64),
                min_size=n,
                max_size=n,
            )
        )
        t = np.array(values, dtype=dtype).reshape(shape)
        back = decode_tensor(encode_tensor(t))
        assert back.dtype == t.dtype
        assert back.shape == t.shape
        assert back.tobytes() == t.tobytes()

    def test_bad_magic(self) -> None:
        blob = b"XXXX" + encode_tensor(np.zeros(1))[4:]
        with pytest.raises(BadMagic):
            decode_tensor(blob)

    def test_truncated_payload(self) -> None:
        blob = encode_tensor(np.arange(4.0))
        with pytest.raises(TruncatedPayload):
            decode_tensor(blob[:-1])

    def test_truncated_header(self) -> None:
        blob = encode_tensor(np.arange(4.0))
        with pytest.raises(TruncatedPayload):
            decode_tensor(blob[:12])

    def test_trailing_bytes_rejected(self) -> None:
        blob = encode_tensor(np.arange(4.0))
        with pytest.raises(TensorFormatError):
            decode_tensor(blob + b"\x00")

    def test_unsupported_dtype_on_write(self) -> None:
        with pytest.raises(DtypeUnsupported):
            encode_tensor(np.arange(3, dtype=np.int32))

    def test_unsupported_dtype_on_read(self) -> None:
        header = b'{"dtype":"int32","order":"C","shape":[1]}'
        blob = MAGIC + struct.pack("<I", len(header)) + header + b"\x00" * 4
        with pytest.raises(DtypeUnsupported):
            decode_tensor(blob)

    def test_refuses_non_finite(self) -> None:
        with pytest.raises(TensorFormatError):
            encode_tensor(np.array([1.0, np.nan]))

    def test_missing_file_is_io_failure(self, tmp_path: Path) -> None:
        with pytest.raises(IoFailure) as exc_info:
            read_tensor(tmp_path / "missing.tcpt")
        assert exc_info.value.exit_code == 2

    def test_format_errors_are_input_errors(self) -> None:
        assert issubclass(BadMagic, TcpError)
        assert BadMagic.exit_code == 2


class TestRng:
    """Test the counter-based SplitMix64 stream."""

    def test_golden_words_seed_0(self) -> None:
        assert Rng(0).words(8).tolist() == SEED0_WORDS

    def test_first_word_seed_42(self) -> None:
        assert int(Rng(42).words(1)[0]) == 0xBDD732262FEB6E95

    def test_golden_randn_seed_0(self) -> None:
        np.testing.assert_allclose(randn(Rng(0), [8]), SEED0_RANDN, rtol=0, atol=1e-12)

    def test_same_seed_same_stream(self) -> None:
        np.testing.assert_array_equal(randn(Rng(0), [4]), randn(Rng(0), [4]))

    def test_different_seeds_differ(self) -> None:
        assert not np.array_equal(randn(Rng(0), [4]), randn(Rng(1), [4]))

    def test_prefix_stable(self) -> None:
        """Test that a longer draw extends a shorter one."""
        np.testing.assert_array_equal(Rng(7).words(16)[:5], Rng(7).words(5))

    def test_split_streams_are_distinct_and_stable(self) -> None:
        root = Rng(3)
        assert root.split(0) == root.split(0)
        assert root.split(0).seed != root.split(1).seed
        assert root.split(0).seed != root.seed

    def test_uniform_range(self) -> None:
        u = uniform(Rng(5), (1000,))
        assert u.min() >= 0.0
        assert u.max() < 1.0

    def test_randn_odd_length_and_dtype(self) -> None:
        z = randn(Rng(0), (3,), dtype=np.float32)
        assert z.dtype == np.float32
        np.testing.assert_allclose(z, np.float32(SEED0_RANDN[:3]), rtol=1e-6)

    def test_rejects_out_of_range_seed(self) -> None:
        with pytest.raises(ValueError, match="64-bit"):
            Rng(-1)

    @pytest.mark.slow
    def test_randn_mean_and_variance(self) -> None:
        z = randn(Rng(0), (1_000_000,))
        assert abs(float(z.mean())) < 0.01
        assert abs(float(z.var()) - 1.0) < 0.01
