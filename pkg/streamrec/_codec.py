"""On-disk formats shared by the pipeline stages.

Binary layouts are little-endian throughout:

* embedding corpus: ``b"LARM"``, version u16, dim u16, count u64, then
  ``count`` rows of ``dim`` f32;
* codebook: ``b"LARQ"``, levels u8, dim u16, sizes u32[levels], then each
  level's f32 centroid rows;
* named tensors: count u32, then per tensor name-length u16, UTF-8 name,
  rows u32, cols u32, rows*cols f32.

Text layouts are tab separated without a header (interaction logs) or
``key=value`` lines (manifests and metric files).
"""
import io
import os
import struct
from typing import TYPE_CHECKING
from typing import Any
from typing import Dict
from typing import List
from typing import Mapping
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import pandas as pd

from streamrec.core import TASKS
from streamrec.core import FloatArray
from streamrec.core import IntArray
from streamrec.core import InteractionEvent
from streamrec.core import InteractionLog
from streamrec.errors import FormatError

if TYPE_CHECKING:  # pragma: no cover
    _Path = Union[str, "os.PathLike[str]"]

CORPUS_MAGIC = b"LARM"
CORPUS_VERSION = 1
CODEBOOK_MAGIC = b"LARQ"

_CORPUS_HEADER = struct.Struct("<4sHHQ")
_CODEBOOK_HEADER = struct.Struct("<4sBH")
_F32 = np.dtype("<f4")

LOG_COLUMNS: Tuple[str, ...] = (
    ("user_id", "author_id", "session_id", "window_index", "timestamp")
    + TASKS
    + ("watch_seconds",)
)
CODE_COLUMNS: Tuple[str, ...] = ("c1", "c2", "c3")


# embedding corpus


def encode_corpus(vectors: FloatArray) -> bytes:
    mat = np.asarray(vectors, dtype=np.float64)
    if mat.ndim != 2:
        raise FormatError(f"Corpus must be a matrix, got {mat.ndim} dimensions")
    count, dim = mat.shape
    header = _CORPUS_HEADER.pack(CORPUS_MAGIC, CORPUS_VERSION, dim, count)
    return header + mat.astype(_F32).tobytes()


def decode_corpus(data: bytes) -> FloatArray:
    if len(data) < _CORPUS_HEADER.size:
        raise FormatError("Corpus file is shorter than its header")
    magic, version, dim, count = _CORPUS_HEADER.unpack_from(data)
    if magic != CORPUS_MAGIC:
        raise FormatError(f"Bad corpus magic {magic!r}")
    if version != CORPUS_VERSION:
        raise FormatError(f"Unsupported corpus version {version}")
    body = data[_CORPUS_HEADER.size:]
    if len(body) != count * dim * _F32.itemsize:
        raise FormatError(
            f"Corpus body holds {len(body)} bytes, header promises {count}x{dim} f32"
        )
    return np.frombuffer(body, dtype=_F32).astype(np.float64).reshape(count, dim)


def write_corpus(path: "_Path", vectors: FloatArray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_corpus(vectors))


def read_corpus(path: "_Path") -> FloatArray:
    with open(path, "rb") as fh:
        return decode_corpus(fh.read())


# interaction logs


def decode_event(line: str, extra_columns: int = 0) -> InteractionEvent:
    """Parse one log row; trailing code columns are checked and dropped."""
    parts = line.rstrip("\n").split("\t")
    expected = len(LOG_COLUMNS) + extra_columns
    if len(parts) != expected:
        raise FormatError(f"Log record has {len(parts)} columns, expected {expected}")
    try:
        values = [int(p) for p in parts]
    except ValueError as exc:
        raise FormatError(f"Non-integer column in log record: {line!r}") from exc
    return InteractionEvent(
        user_id=values[0],
        author_id=values[1],
        session_id=values[2],
        window_index=values[3],
        timestamp=values[4],
        labels={task: values[5 + i] for i, task in enumerate(TASKS)},
        watch_seconds=values[5 + len(TASKS)],
    )


def _log_frame(log: InteractionLog, codes: Optional[IntArray]) -> pd.DataFrame:
    columns: Dict[str, Any] = {
        "user_id": log.user_id,
        "author_id": log.author_id,
        "session_id": log.session_id,
        "window_index": log.window_index,
        "timestamp": log.timestamp,
    }
    for i, task in enumerate(TASKS):
        columns[task] = log.labels[:, i].astype(np.int64)
    columns["watch_seconds"] = log.watch_seconds
    if codes is not None:
        codes = np.asarray(codes, dtype=np.int64).reshape(len(log), len(CODE_COLUMNS))
        for i, name in enumerate(CODE_COLUMNS):
            columns[name] = codes[:, i]
    return pd.DataFrame(columns)


def write_log(
    path: "_Path", log: InteractionLog, codes: Optional[IntArray] = None
) -> None:
    """Write a log as tab-separated integer rows, optionally with code columns."""
    frame = _log_frame(log, codes)
    frame.to_csv(path, sep="\t", header=False, index=False, lineterminator="\n")


def _locate_bad_record(path: "_Path", extra_columns: int) -> Optional[FormatError]:
    """The first row of a log that does not decode, as an error naming its line."""
    with open(path, encoding="utf-8") as fh:
        for number, line in enumerate(fh, start=1):
            try:
                decode_event(line, extra_columns)
            except FormatError as exc:
                return FormatError(f"Log {os.fspath(path)} line {number}: {exc}")
    return None


def read_log(
    path: "_Path", *, with_codes: bool = False
) -> Tuple[InteractionLog, Optional[IntArray]]:
    names = list(LOG_COLUMNS) + (list(CODE_COLUMNS) if with_codes else [])
    if os.path.getsize(path) == 0:
        empty_codes = np.zeros((0, 3), dtype=np.int64) if with_codes else None
        return InteractionLog.empty(), empty_codes
    extra = len(names) - len(LOG_COLUMNS)
    try:
        frame = pd.read_csv(path, sep="\t", header=None, dtype=np.int64)
    except (ValueError, pd.errors.ParserError) as exc:
        located = _locate_bad_record(path, extra)
        if located is None:
            located = FormatError(f"Cannot parse log {os.fspath(path)}: {exc}")
        raise located from exc
    if frame.shape[1] != len(names):
        located = _locate_bad_record(path, extra)
        raise located or FormatError(
            f"Log {os.fspath(path)} has {frame.shape[1]} columns, expected {len(names)}"
        )
    frame.columns = names
    log = InteractionLog(
        frame["user_id"].to_numpy(),
        frame["author_id"].to_numpy(),
        frame["session_id"].to_numpy(),
        frame["window_index"].to_numpy(),
        frame["timestamp"].to_numpy(),
        frame[list(TASKS)].to_numpy(),
        frame["watch_seconds"].to_numpy(),
    )
    codes = frame[list(CODE_COLUMNS)].to_numpy(dtype=np.int64) if with_codes else None
    return log, codes


def write_int_table(path: "_Path", columns: Mapping[str, IntArray]) -> None:
    frame = pd.DataFrame({k: np.asarray(v, dtype=np.int64) for k, v in columns.items()})
    frame.to_csv(path, sep="\t", header=True, index=False, lineterminator="\n")


def read_int_table(path: "_Path", names: Sequence[str]) -> Dict[str, IntArray]:
    frame = pd.read_csv(path, sep="\t", header=0, dtype=np.int64)
    missing = [n for n in names if n not in frame.columns]
    if missing:
        raise FormatError(f"Table {os.fspath(path)} lacks columns {missing}")
    return {n: frame[n].to_numpy(dtype=np.int64) for n in names}


# codebooks


def encode_codebook(levels: Sequence[FloatArray]) -> bytes:
    if not levels:
        raise FormatError("Codebook needs at least one level")
    dim = int(levels[0].shape[1])
    out = io.BytesIO()
    out.write(_CODEBOOK_HEADER.pack(CODEBOOK_MAGIC, len(levels), dim))
    out.write(struct.pack(f"<{len(levels)}I", *[int(c.shape[0]) for c in levels]))
    for centroids in levels:
        if centroids.shape[1] != dim:
            raise FormatError("Codebook levels disagree on dimension")
        out.write(np.asarray(centroids).astype(_F32).tobytes())
    return out.getvalue()


def decode_codebook(data: bytes) -> List[FloatArray]:
    if len(data) < _CODEBOOK_HEADER.size:
        raise FormatError("Codebook file is shorter than its header")
    magic, n_levels, dim = _CODEBOOK_HEADER.unpack_from(data)
    if magic != CODEBOOK_MAGIC:
        raise FormatError(f"Bad codebook magic {magic!r}")
    offset = _CODEBOOK_HEADER.size
    sizes = struct.unpack_from(f"<{n_levels}I", data, offset)
    offset += 4 * n_levels
    levels = []
    for size in sizes:
        nbytes = size * dim * _F32.itemsize
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError("Codebook body is truncated")
        level = np.frombuffer(chunk, dtype=_F32).astype(np.float64)
        levels.append(level.reshape(size, dim))
        offset += nbytes
    if offset != len(data):
        raise FormatError("Trailing bytes after codebook levels")
    return levels


def write_codebook(path: "_Path", levels: Sequence[FloatArray]) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_codebook(levels))


def read_codebook(path: "_Path") -> List[FloatArray]:
    with open(path, "rb") as fh:
        return decode_codebook(fh.read())


# named tensors


def encode_tensors(tensors: Mapping[str, FloatArray]) -> bytes:
    out = io.BytesIO()
    out.write(struct.pack("<I", len(tensors)))
    for name, value in tensors.items():
        arr = np.asarray(value, dtype=np.float64)
        mat = arr.reshape(1, -1) if arr.ndim < 2 else arr.reshape(arr.shape[0], -1)
        raw_name = name.encode("utf-8")
        out.write(struct.pack("<H", len(raw_name)))
        out.write(raw_name)
        out.write(struct.pack("<II", mat.shape[0], mat.shape[1]))
        out.write(mat.astype(_F32).tobytes())
    return out.getvalue()


def decode_tensors(data: bytes) -> Dict[str, FloatArray]:
    (count,) = struct.unpack_from("<I", data, 0)
    offset = 4
    tensors: Dict[str, FloatArray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rows, cols = struct.unpack_from("<II", data, offset)
        offset += 8
        nbytes = rows * cols * _F32.itemsize
        chunk = data[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"Tensor {name!r} is truncated")
        values = np.frombuffer(chunk, dtype=_F32).astype(np.float64)
        tensors[name] = values.reshape(rows, cols)
        offset += nbytes
    if offset != len(data):
        raise FormatError("Trailing bytes after named tensors")
    return tensors


# key=value text


def format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.6f}"
    if isinstance(value, (list, tuple)):
        return ",".join(format_value(v) for v in value)
    return str(value)


def encode_kv(items: Mapping[str, Any]) -> str:
    return "".join(f"{key}={format_value(value)}\n" for key, value in items.items())


def decode_kv(text: str) -> Dict[str, str]:
    items: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"Line {lineno} is not a key=value pair: {line!r}")
        items[key.strip()] = value.strip()
    return items


def write_kv(path: "_Path", items: Mapping[str, Any]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(encode_kv(items))


def read_kv(path: "_Path") -> Dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return decode_kv(fh.read())

