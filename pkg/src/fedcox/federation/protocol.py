"""Message schema and wire codecs for coordinator/center rounds.

Binary frame::

    [u32 length][u8 version][u8 type][payload]

``length`` counts everything after itself.  The payload is ``u32 round``,
``u32 n_arrays`` and then, per array, ``u32 ndim``, ``ndim`` x ``u32`` dims
and the little-endian f64 data.  Error messages carry a UTF-8 text instead
of arrays (``u32 nbytes`` followed by the bytes).

A JSON-lines codec mirrors the same schema with 17-significant-digit floats
for debugging.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from ..errors import PrivacyViolation, TruncatedFrame, UnknownMessageType, VersionMismatch

VERSION = 1

MSG_TYPES = {
    "grad_request": 1,
    "grad_reply": 2,
    "omega_request": 3,
    "omega_reply": 4,
    "scalar_reply": 5,
    "hazard_request": 6,
    "hazard_reply": 7,
    "error": 8,
}
MSG_NAMES = {v: k for k, v in MSG_TYPES.items()}

_U32 = struct.Struct("<I")
_HEAD = struct.Struct("<IBB")


@dataclass
class Message:
    type: str
    round: int = 0
    arrays: list = field(default_factory=list)
    text: str = ""

    def __post_init__(self):
        if self.type not in MSG_TYPES:
            raise UnknownMessageType(f"unknown message type {self.type!r}")
        self.arrays = [np.asarray(a, dtype=np.float64) for a in self.arrays]

    @property
    def n_floats(self) -> int:
        return int(sum(a.size for a in self.arrays))

    def __eq__(self, other):
        if not isinstance(other, Message):
            return NotImplemented
        return (
            self.type == other.type
            and self.round == other.round
            and self.text == other.text
            and len(self.arrays) == len(other.arrays)
            and all(a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(self.arrays, other.arrays))
        )


def encode_message(msg: Message, version: int = VERSION) -> bytes:
    parts = [_U32.pack(msg.round)]
    if msg.type == "error":
        raw = msg.text.encode("utf-8")
        parts += [_U32.pack(0), _U32.pack(len(raw)), raw]
    else:
        parts.append(_U32.pack(len(msg.arrays)))
        for a in msg.arrays:
            parts.append(_U32.pack(a.ndim))
            parts += [_U32.pack(d) for d in a.shape]
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
    payload = b"".join(parts)
    return _HEAD.pack(len(payload) + 2, version, MSG_TYPES[msg.type]) + payload


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf = buf
        self.pos = pos

    def take(self, k: int) -> bytes:
        if self.pos + k > len(self.buf):
            raise TruncatedFrame("payload ends before the declared contents")
        out = self.buf[self.pos:self.pos + k]
        self.pos += k
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def decode_message(buf: bytes) -> Message:
    if len(buf) < _HEAD.size:
        raise TruncatedFrame(f"frame of {len(buf)} bytes is shorter than the header")
    length, version, mtype = _HEAD.unpack_from(buf)
    if length != len(buf) - 4:
        raise TruncatedFrame(f"length prefix says {length} bytes, frame has {len(buf) - 4}")
    if version != VERSION:
        raise VersionMismatch(f"frame version {version}, expected {VERSION}")
    if mtype not in MSG_NAMES:
        raise UnknownMessageType(f"unknown message type code {mtype}")
    r = _Reader(buf, _HEAD.size)
    rnd = r.u32()
    n_arrays = r.u32()
    name = MSG_NAMES[mtype]
    if name == "error":
        text = r.take(r.u32()).decode("utf-8")
        msg = Message(name, rnd, text=text)
    else:
        arrays = []
        for _ in range(n_arrays):
            ndim = r.u32()
            shape = tuple(r.u32() for _ in range(ndim))
            size = int(np.prod(shape, dtype=np.int64))
            arrays.append(np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape))
        msg = Message(name, rnd, arrays)
    if r.pos != len(buf):
        raise TruncatedFrame(f"{len(buf) - r.pos} trailing bytes after the payload")
    return msg


def read_frame(stream) -> bytes:
    """Read one length-prefixed frame from a file-like binary stream."""
    head = _read_exact(stream, 4)
    (length,) = _U32.unpack(head)
    return head + _read_exact(stream, length)


def _read_exact(stream, k: int) -> bytes:
    chunks = []
    while k > 0:
        chunk = stream.read(k)
        if not chunk:
            raise TruncatedFrame("stream closed mid-frame")
        chunks.append(chunk)
        k -= len(chunk)
    return b"".join(chunks)


# ---------------------------------------------------------------------------
# JSON lines

def encode_json(msg: Message) -> str:
    body = {"v": VERSION, "type": msg.type, "round": msg.round}
    if msg.type == "error":
        body["text"] = msg.text
    else:
        body["arrays"] = [
            {"shape": list(a.shape), "data": [float(f"{x:.17g}") for x in a.ravel()]} for a in msg.arrays
        ]
    return json.dumps(body, allow_nan=True) + "\n"


def decode_json(line: str) -> Message:
    try:
        body = json.loads(line)
    except json.JSONDecodeError as exc:
        raise TruncatedFrame(f"malformed JSON frame ({exc})") from None
    if body.get("v") != VERSION:
        raise VersionMismatch(f"frame version {body.get('v')}, expected {VERSION}")
    if body.get("type") not in MSG_TYPES:
        raise UnknownMessageType(f"unknown message type {body.get('type')!r}")
    if body["type"] == "error":
        return Message("error", body["round"], text=body.get("text", ""))
    arrays = [np.array(a["data"], dtype=np.float64).reshape(a["shape"]) for a in body["arrays"]]
    return Message(body["type"], body["round"], arrays)


# ---------------------------------------------------------------------------
# privacy contract

def check_payload(msg: Message, m: int, p: int) -> None:
    """Reject anything that could carry subject-level rows.

    A center of size ``m`` with ``p`` covariates may send p-vectors, short
    stacks of them (at most three), scalars and per-event summaries (at most
    ``m`` entries), but never an array with ``m * p`` or more entries or one
    shaped like its covariate block.  For degenerate sizes where an ``m x p``
    block is no larger than a legitimate payload the size rule cannot tell
    them apart and is not applied.
    """
    limit = m * p
    enforce = limit > max(3 * p, m)
    for a in msg.arrays:
        if enforce and a.size >= limit:
            raise PrivacyViolation(f"{msg.type} carries an array of {a.size} floats (limit {limit - 1})")
        if enforce and a.ndim == 2 and a.shape[0] >= m and a.shape[1] == p:
            raise PrivacyViolation(f"{msg.type} carries an array shaped like the covariate block {a.shape}")
