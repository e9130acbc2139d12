"""
Binary array, image and checkpoint files.

VTN1:        b"VTN1" | u32 rank | rank × u32 extents | float64 payload, all little-endian
PGM (P5):    8- or 16-bit grayscale, values scaled from [0, 1]
Checkpoint:  one JSON header line, then the VTN1 records in the declared order
"""

import io
import json
from pathlib import Path
from typing import Any, BinaryIO, Dict, List, Mapping, Tuple, Union

import numpy as np
import structlog

from src.backend.core.exceptions import ArtifactFormatError, ArtifactNotFoundError

logger = structlog.get_logger()

VTN_MAGIC = b"VTN1"
CHECKPOINT_FORMAT = "vip-checkpoint"
CHECKPOINT_VERSION = 1

PathLike = Union[str, Path]


def _require(path: Path) -> Path:
    if not path.exists():
        raise ArtifactNotFoundError(f"File not found: {path}", path=str(path))
    return path


def write_vtn(stream: BinaryIO, array: np.ndarray) -> None:
    array = np.asarray(array, dtype=np.float64)
    stream.write(VTN_MAGIC)
    stream.write(np.array([array.ndim, *array.shape], dtype="<u4").tobytes())
    stream.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_vtn(stream: BinaryIO, source: str = "<stream>") -> np.ndarray:
    magic = stream.read(4)
    if magic != VTN_MAGIC:
        raise ArtifactFormatError(f"Bad VTN1 magic {magic!r}", path=source)
    rank_bytes = stream.read(4)
    if len(rank_bytes) != 4:
        raise ArtifactFormatError("Truncated VTN1 header", path=source)
    rank = int(np.frombuffer(rank_bytes, dtype="<u4")[0])
    extent_bytes = stream.read(4 * rank)
    if len(extent_bytes) != 4 * rank:
        raise ArtifactFormatError("Truncated VTN1 extents", path=source)
    shape = tuple(int(n) for n in np.frombuffer(extent_bytes, dtype="<u4"))
    count = int(np.prod(shape)) if shape else 1
    payload = stream.read(8 * count)
    if len(payload) != 8 * count:
        raise ArtifactFormatError("Truncated VTN1 payload", path=source)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)


def save_array(path: PathLike, array: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        write_vtn(f, array)
    return path


def load_array(path: PathLike) -> np.ndarray:
    path = _require(Path(path))
    with open(path, "rb") as f:
        array = read_vtn(f, str(path))
        if f.read(1):
            raise ArtifactFormatError("Trailing bytes after VTN1 record", path=str(path))
    return array


def save_pgm(path: PathLike, image: np.ndarray, maxval: int = 255) -> Path:
    """Write a 2-D image in [0, 1] as binary PGM; values outside are clipped"""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ArtifactFormatError("PGM needs a 2-D image", path=str(path))
    if not 0 < maxval < 65536:
        raise ArtifactFormatError("PGM maxval must lie in 1..65535", path=str(path))
    levels = np.rint(np.clip(image, 0.0, 1.0) * maxval)
    dtype = ">u1" if maxval < 256 else ">u2"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    height, width = image.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{width} {height}\n{maxval}\n".encode("ascii"))
        f.write(levels.astype(dtype).tobytes())
    return path


def _pgm_tokens(data: bytes, count: int, source: str) -> Tuple[List[int], int]:
    tokens: List[int] = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ArtifactFormatError("Truncated PGM header", path=source)
        try:
            tokens.append(int(data[start:pos]))
        except ValueError as e:
            raise ArtifactFormatError("Malformed PGM header", path=source) from e
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def load_pgm(path: PathLike) -> np.ndarray:
    """Read a binary PGM into [0, 1]"""
    path = _require(Path(path))
    data = path.read_bytes()
    if data[:2] != b"P5":
        raise ArtifactFormatError("Not a binary PGM (P5) file", path=str(path))
    (width, height, maxval), offset = _pgm_tokens(data[2:], 3, str(path))
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise ArtifactFormatError("Invalid PGM dimensions", path=str(path))
    dtype = ">u1" if maxval < 256 else ">u2"
    raster = data[2 + offset:]
    expected = width * height * np.dtype(dtype).itemsize
    if len(raster) < expected:
        raise ArtifactFormatError("Truncated PGM raster", path=str(path))
    levels = np.frombuffer(raster[:expected], dtype=dtype).reshape(height, width)
    return levels.astype(np.float64) / maxval


def save_checkpoint(path: PathLike, arrays: Mapping[str, np.ndarray], meta: Dict[str, Any]) -> Path:
    """JSON header line naming the arrays, then their VTN1 records in that order"""
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "arrays": list(arrays.keys()),
        "meta": meta,
    }
    buffer = io.BytesIO()
    buffer.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for name in header["arrays"]:
        write_vtn(buffer, arrays[name])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(buffer.getvalue())
    logger.debug("Checkpoint written", path=str(path), arrays=len(arrays))
    return path


def load_checkpoint(path: PathLike) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Returns (meta, arrays in declared order)"""
    path = _require(Path(path))
    with open(path, "rb") as f:
        line = f.readline()
        try:
            header = json.loads(line.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise ArtifactFormatError("Checkpoint header is not JSON", path=str(path)) from e
        if header.get("format") != CHECKPOINT_FORMAT or header.get("version") != CHECKPOINT_VERSION:
            raise ArtifactFormatError("Unsupported checkpoint format", path=str(path))
        arrays = {name: read_vtn(f, str(path)) for name in header.get("arrays", [])}
    return header.get("meta", {}), arrays
