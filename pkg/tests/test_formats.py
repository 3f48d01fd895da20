"""Round-trip and layout checks for every on-disk format."""

import numpy as np
import pytest

from jotrecon.formats import (read_bfs, read_dict, read_mlnet, read_pfm,
                              read_pgm, write_bfs, write_dict, write_mlnet,
                              write_pfm, write_pgm)
from jotrecon.mlnet import init_from_ista
from jotrecon.sensor import BinaryFrameStack
from jotrecon.sparse import Dictionary


def random_stack(rng, h=None, w=None, k=None, qmax=12):
    h = h or int(rng.integers(1, 20))
    w = w or int(rng.integers(1, 20))
    k = k or int(rng.integers(1, 6))
    frames = (rng.random((k, h, w)) < 0.5).astype(np.uint8)
    thr = rng.integers(1, qmax, size=(h, w)).astype(np.int64)
    return BinaryFrameStack(frames=frames, thresholds=thr)


class TestPgm:
    def test_roundtrip_8bit(self, tmp_path):
        rng = np.random.default_rng(0)
        for i in range(20):
            img = rng.integers(0, 256, size=(rng.integers(1, 30),
                                             rng.integers(1, 30)),
                               dtype=np.int64)
            p = tmp_path / f"a{i}.pgm"
            write_pgm(p, img, maxval=255)
            np.testing.assert_array_equal(read_pgm(p), img)

    def test_roundtrip_16bit(self, tmp_path):
        rng = np.random.default_rng(1)
        for i in range(10):
            img = rng.integers(0, 65536, size=(7, 9), dtype=np.int64)
            p = tmp_path / f"b{i}.pgm"
            write_pgm(p, img, maxval=65535)
            np.testing.assert_array_equal(read_pgm(p), img)

    def test_16bit_samples_are_big_endian(self, tmp_path):
        p = tmp_path / "be.pgm"
        write_pgm(p, np.array([[258]]), maxval=65535)
        raw = p.read_bytes()
        assert raw.endswith(b"\x01\x02")  # 258 = 0x0102 stored MSB first

    def test_rejects_bad_inputs(self, tmp_path):
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.array([[-1]]))
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "x.pgm", np.array([[300]]), maxval=255)


class TestPfm:
    def test_roundtrip_random(self, tmp_path):
        rng = np.random.default_rng(2)
        for i in range(100):
            img = rng.standard_normal((rng.integers(1, 16),
                                       rng.integers(1, 16))).astype(np.float32)
            p = tmp_path / f"c{i}.pfm"
            write_pfm(p, img)
            np.testing.assert_array_equal(read_pfm(p), img)

    def test_header_is_standard(self, tmp_path):
        p = tmp_path / "h.pfm"
        write_pfm(p, np.zeros((2, 3), dtype=np.float32))
        head = p.read_bytes()[:30].split(b"\n")
        assert head[0] == b"Pf"
        assert head[1] == b"3 2"
        assert float(head[2]) == -1.0  # little-endian marker

    def test_bottom_up_row_order(self, tmp_path):
        img = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)
        p = tmp_path / "r.pfm"
        write_pfm(p, img)
        raw = p.read_bytes()
        body = np.frombuffer(raw.split(b"-1.0\n", 1)[1], dtype="<f4")
        np.testing.assert_array_equal(body, [3.0, 4.0, 1.0, 2.0])


class TestBfs:
    def test_roundtrip_random(self, tmp_path):
        rng = np.random.default_rng(3)
        for i in range(100):
            st = random_stack(rng)
            p = tmp_path / f"d{i}.bfs"
            write_bfs(p, st)
            back = read_bfs(p)
            np.testing.assert_array_equal(back.frames, st.frames)
            np.testing.assert_array_equal(back.thresholds, st.thresholds)

    def test_bit_packing_layout(self, tmp_path):
        # bit j of byte col//8 in a row equals b[row, col] (LSB first)
        frames = np.zeros((1, 1, 10), dtype=np.uint8)
        frames[0, 0, [0, 3, 9]] = 1
        st = BinaryFrameStack(frames=frames,
                              thresholds=np.ones((1, 10), dtype=np.int64))
        p = tmp_path / "bits.bfs"
        write_bfs(p, st)
        raw = p.read_bytes()
        plane = raw[16:18]  # after magic + 3 u32
        assert plane[0] == (1 << 0) | (1 << 3)
        assert plane[1] == (1 << 1)

    def test_rejects_oversized_thresholds(self, tmp_path):
        st = BinaryFrameStack(frames=np.zeros((1, 2, 2), dtype=np.uint8),
                              thresholds=np.full((2, 2), 70000))
        with pytest.raises(ValueError):
            write_bfs(tmp_path / "x.bfs", st)

    def test_magic_checked(self, tmp_path):
        p = tmp_path / "bad.bfs"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            read_bfs(p)


class TestDict:
    def test_roundtrip_random(self, tmp_path):
        rng = np.random.default_rng(4)
        for i in range(100):
            n = int(rng.integers(2, 12))
            m = int(rng.integers(2, 20))
            d = Dictionary.random_unit(n, m, seed=i)
            p = tmp_path / f"e{i}.dict"
            write_dict(p, d)
            back = read_dict(p)
            assert back.atoms.tobytes() == d.atoms.tobytes()

    def test_column_major_layout(self, tmp_path):
        d = Dictionary(atoms=np.eye(2))
        p = tmp_path / "cm.dict"
        write_dict(p, d)
        body = np.frombuffer(p.read_bytes()[12:], dtype="<f8")
        np.testing.assert_array_equal(body, [1.0, 0.0, 0.0, 1.0])


class TestMlnet:
    def test_roundtrip_random(self, tmp_path):
        rng = np.random.default_rng(5)
        for i in range(100):
            n = int(rng.integers(2, 8))
            m = int(rng.integers(2, 10))
            layers = int(rng.integers(1, 4))
            d = Dictionary.random_unit(n, m, seed=100 + i)
            params = init_from_ista(d, eta=float(rng.uniform(0.01, 1)),
                                    mu=float(rng.uniform(0, 2)),
                                    num_layers=layers)
            for t in range(layers):
                params.A[t] += rng.standard_normal((n, m)) * 0.1
            p = tmp_path / f"f{i}.mlnet"
            write_mlnet(p, params)
            back = read_mlnet(p)
            assert back.num_layers == layers
            for t in range(layers):
                assert back.A[t].tobytes() == params.A[t].tobytes()
                assert back.Q[t].tobytes() == params.Q[t].tobytes()
                assert back.W[t].tobytes() == params.W[t].tobytes()
                assert back.theta[t].tobytes() == params.theta[t].tobytes()

    def test_header_fields(self, tmp_path):
        d = Dictionary.random_unit(4, 6, seed=0)
        params = init_from_ista(d, 0.1, 0.5, 3)
        p = tmp_path / "h.mlnet"
        write_mlnet(p, params)
        raw = p.read_bytes()
        assert raw[:4] == b"MLN1"
        import struct
        t, n, m = struct.unpack("<III", raw[4:16])
        assert (t, n, m) == (3, 4, 6)
