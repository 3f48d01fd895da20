"""On-disk formats: images, binary frame stacks, dictionaries, networks.

.pgm    binary (P5) integer images, maxval 255 -> 1 byte, else 2 bytes
        big-endian per the Netpbm standard
.pfm    grayscale Portable FloatMap ("Pf"), 32-bit little-endian floats,
        rows stored bottom-to-top, scale -1.0
.bfs    binary frame stack: magic "BFS1", u32 width/height/K, then K
        bit-packed planes (row padded to whole bytes, LSB-first within a
        byte), then per-jot u16 thresholds in row-major order
.dict   magic "DCT1", u32 atom_dim, u32 num_atoms, f64 atoms column-major
.mlnet  magic "MLN1", u32 T, u32 atom_dim, u32 m, then per layer the f64
        tensors A (n x m), Q (n x m), W (m x n), theta (m), row-major

All multi-byte integers and floats are little-endian except the 16-bit
PGM samples (Netpbm mandates big-endian there).
"""

from __future__ import annotations

import struct

import numpy as np


def _read_exact(f, n):
    data = f.read(n)
    if len(data) != n:
        raise ValueError("unexpected end of file")
    return data


# ---------------------------------------------------------------- PGM


def write_pgm(path, data, maxval=None):
    data = np.asarray(data)
    if data.ndim != 2 or not np.issubdtype(data.dtype, np.integer):
        raise ValueError("PGM wants a 2-D integer array")
    if data.min() < 0:
        raise ValueError("PGM samples must be nonnegative")
    if maxval is None:
        maxval = max(int(data.max()), 1)
    if not 1 <= maxval <= 65535 or data.max() > maxval:
        raise ValueError("invalid PGM maxval")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode())
        if maxval < 256:
            f.write(data.astype(np.uint8).tobytes())
        else:
            f.write(data.astype(">u2").tobytes())


def read_pgm(path):
    with open(path, "rb") as f:
        tokens = []
        while len(tokens) < 4:
            line = f.readline()
            if not line:
                raise ValueError("truncated PGM header")
            body = line.split(b"#", 1)[0]
            tokens.extend(body.split())
        if tokens[0] != b"P5":
            raise ValueError("not a binary PGM file")
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
        raw = _read_exact(f, w * h * dtype.itemsize if maxval >= 256 else w * h)
        img = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return img.astype(np.uint16 if maxval >= 256 else np.uint8)


# ---------------------------------------------------------------- PFM


def write_pfm(path, data):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim != 2:
        raise ValueError("grayscale PFM wants a 2-D array")
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        f.write(data[::-1].astype("<f4").tobytes())


def read_pfm(path):
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ValueError("not a grayscale PFM file")
        w, h = map(int, f.readline().split())
        scale = float(f.readline())
        endian = "<" if scale < 0 else ">"
        raw = _read_exact(f, w * h * 4)
        img = np.frombuffer(raw, dtype=f"{endian}f4").reshape(h, w)
    return img[::-1].astype(np.float32)


# ---------------------------------------------------------------- BFS


def write_bfs(path, stack):
    h, w = stack.jot_shape
    if stack.thresholds.max() > 65535:
        raise ValueError("thresholds exceed the u16 range of .bfs")
    with open(path, "wb") as f:
        f.write(b"BFS1")
        f.write(struct.pack("<III", w, h, stack.num_frames))
        for k in range(stack.num_frames):
            packed = np.packbits(stack.frames[k], axis=1, bitorder="little")
            f.write(packed.tobytes())
        f.write(stack.thresholds.astype("<u2").tobytes())


def read_bfs(path):
    from .sensor import BinaryFrameStack

    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"BFS1":
            raise ValueError("not a .bfs file")
        w, h, num_frames = struct.unpack("<III", _read_exact(f, 12))
        row_bytes = (w + 7) // 8
        frames = np.empty((num_frames, h, w), dtype=np.uint8)
        for k in range(num_frames):
            raw = np.frombuffer(_read_exact(f, row_bytes * h), dtype=np.uint8)
            bits = np.unpackbits(raw.reshape(h, row_bytes), axis=1,
                                 bitorder="little")
            frames[k] = bits[:, :w]
        thr = np.frombuffer(_read_exact(f, 2 * h * w), dtype="<u2")
    return BinaryFrameStack(frames=frames,
                            thresholds=thr.reshape(h, w).astype(np.int64))


# ---------------------------------------------------------------- DICT


def write_dict(path, dictionary):
    with open(path, "wb") as f:
        f.write(b"DCT1")
        f.write(struct.pack("<II", dictionary.atom_dim, dictionary.num_atoms))
        f.write(np.asfortranarray(dictionary.atoms.astype("<f8")).tobytes("F"))


def read_dict(path):
    from .sparse import Dictionary

    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"DCT1":
            raise ValueError("not a .dict file")
        n, m = struct.unpack("<II", _read_exact(f, 8))
        raw = np.frombuffer(_read_exact(f, 8 * n * m), dtype="<f8")
    return Dictionary(atoms=raw.reshape((n, m), order="F").copy())


# ---------------------------------------------------------------- MLNET


def write_mlnet(path, params):
    n, m = params.layer_shape
    with open(path, "wb") as f:
        f.write(b"MLN1")
        f.write(struct.pack("<III", params.num_layers, n, m))
        for t in range(params.num_layers):
            for tensor in (params.A[t], params.Q[t], params.W[t], params.theta[t]):
                f.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())


def read_mlnet(path):
    from .mlnet import MLNetParams

    with open(path, "rb") as f:
        if _read_exact(f, 4) != b"MLN1":
            raise ValueError("not a .mlnet file")
        num_layers, n, m = struct.unpack("<III", _read_exact(f, 12))
        A, Q, W, theta = [], [], [], []
        for _ in range(num_layers):
            A.append(np.frombuffer(_read_exact(f, 8 * n * m),
                                   dtype="<f8").reshape(n, m).copy())
            Q.append(np.frombuffer(_read_exact(f, 8 * n * m),
                                   dtype="<f8").reshape(n, m).copy())
            W.append(np.frombuffer(_read_exact(f, 8 * m * n),
                                   dtype="<f8").reshape(m, n).copy())
            theta.append(np.frombuffer(_read_exact(f, 8 * m),
                                       dtype="<f8").copy())
    return MLNetParams(A=A, Q=Q, W=W, theta=theta)
