"""Writer for the scmm embedding binary format.

Little-endian: magic "SCMM", u32 version=1, u32 sentence count, u32 dim;
then per sentence a u32 token count T followed by (T+1)*dim float32 values,
sentence embedding first. Sentences appear in dataset order.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SCMM"
VERSION = 1


def write_embedding_file(path, blocks: list[np.ndarray]) -> None:
    if not blocks:
        raise ValueError("nothing to write")
    dim = blocks[0].shape[1]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<III", VERSION, len(blocks), dim))
        for mat in blocks:
            if mat.ndim != 2 or mat.shape[0] < 2 or mat.shape[1] != dim:
                raise ValueError("each block must be (T+1) x dim with T >= 1")
            fh.write(struct.pack("<I", mat.shape[0] - 1))
            fh.write(np.ascontiguousarray(mat, dtype="<f4").tobytes())


def read_embedding_file(path) -> list[np.ndarray]:
    """Parser used by the tests to check what was written."""
    blocks = []
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: bad magic")
        version, count, dim = struct.unpack("<III", fh.read(12))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        for _ in range(count):
            (t_len,) = struct.unpack("<I", fh.read(4))
            n = (t_len + 1) * dim
            mat = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(t_len + 1, dim)
            blocks.append(mat)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes")
    return blocks
