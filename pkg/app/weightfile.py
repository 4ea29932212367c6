"""
CCYD weight files.

    magic  b"CCYD"
    u32    format version
    u32    entry count
    per entry:
        u32 name length, UTF-8 name, u32 rank, u32 dims[rank], float32 data (row-major)

All integers and floats are little-endian.
"""
import struct
from pathlib import Path
from typing import Dict

import numpy as np

from ccdet.detector import DetectorConfig, DetectorWeights, weight_shapes
from ccdet.errors import WeightFileError
from ccdet.ndtensor import parameter

MAGIC = b"CCYD"
VERSION = 1
_U32 = struct.Struct("<I")


def save_weights(weights: DetectorWeights, path: Path) -> Path:
    path = Path(path)
    chunks = [MAGIC, _U32.pack(VERSION), _U32.pack(len(weights.params))]
    for name, tensor in weights.params.items():
        raw = name.encode("utf-8")
        data = np.ascontiguousarray(tensor.data, dtype="<f4")
        chunks += [_U32.pack(len(raw)), raw, _U32.pack(data.ndim)]
        chunks += [_U32.pack(d) for d in data.shape]
        chunks.append(data.tobytes())
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, buf: bytes, path: Path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise WeightFileError(f"{self.path}: truncated at byte {self.pos} (needed {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def load_weight_arrays(path: Path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise WeightFileError(f"cannot read weight file {path}: {e}") from e
    r = _Reader(buf, path)
    if r.take(4) != MAGIC:
        raise WeightFileError(f"{path}: not a CCYD weight file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise WeightFileError(f"{path}: unsupported format version {version} (expected {VERSION})")

    arrays: Dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        try:
            name = r.take(r.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise WeightFileError(f"{path}: entry name is not UTF-8") from e
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise WeightFileError(f"{path}: {len(buf) - r.pos} trailing byte(s) after the last entry")
    return arrays


def load_weights(path: Path, config: DetectorConfig) -> DetectorWeights:
    """Weight file checked against the layer shapes `config` declares."""
    arrays = load_weight_arrays(path)
    expected = weight_shapes(config)
    missing = sorted(set(expected) - set(arrays))
    extra = sorted(set(arrays) - set(expected))
    if missing or extra:
        raise WeightFileError(f"{path}: does not match the configured detector "
                              f"(missing={missing[:3]}, unexpected={extra[:3]})")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise WeightFileError(f"{path}: {name} has shape {arrays[name].shape}, config expects {shape}")
    return DetectorWeights(config, {name: parameter(arrays[name]) for name in expected})
