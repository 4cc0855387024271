"""Length-prefixed JSON envelopes.

A frame is a 4-byte big-endian payload length followed by a UTF-8 JSON
object ``{"v": 1, "from", "to", "seq", "kind", "payload"}``. Payloads by
kind:

* ``FactBatch``, ``Deletion``: list of rendered facts
* ``SnapshotUpdate``: list of ``{"relation": "rel@peer", "facts": [...]}``
* ``DelegateInstall``: list of ``{"id", "rule", "decls"}`` with the rule
  and declarations in surface syntax
* ``DelegateRemove``: list of delegation id strings
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

from ..syntax import WebdamLogError

VERSION = 1

FACT_BATCH = "FactBatch"
SNAPSHOT_UPDATE = "SnapshotUpdate"
DELEGATE_INSTALL = "DelegateInstall"
DELEGATE_REMOVE = "DelegateRemove"
DELETION = "Deletion"

# order in which one stage's messages to a target are emitted
KINDS = (DELETION, FACT_BATCH, SNAPSHOT_UPDATE, DELEGATE_REMOVE, DELEGATE_INSTALL)
DATA_KINDS = (DELETION, FACT_BATCH, SNAPSHOT_UPDATE)

_HEADER = struct.Struct(">I")
MAX_FRAME = 1 << 30


class DecodeError(WebdamLogError):
    pass


@dataclass(frozen=True)
class Message:
    kind: str
    sender: str
    target: str
    seq: int
    payload: list = field(default_factory=list)

    def data_tuples(self) -> int:
        """Number of facts carried (0 for rule traffic)."""
        if self.kind in (FACT_BATCH, DELETION):
            return len(self.payload)
        if self.kind == SNAPSHOT_UPDATE:
            return sum(len(entry["facts"]) for entry in self.payload)
        return 0

    def to_json(self) -> dict:
        return {
            "v": VERSION,
            "from": self.sender,
            "to": self.target,
            "seq": self.seq,
            "kind": self.kind,
            "payload": self.payload,
        }


def _is_str_list(x) -> bool:
    return isinstance(x, list) and all(isinstance(s, str) for s in x)


def check_payload(kind: str, payload) -> None:
    if kind in (FACT_BATCH, DELETION, DELEGATE_REMOVE):
        ok = _is_str_list(payload)
    elif kind == SNAPSHOT_UPDATE:
        ok = isinstance(payload, list) and all(
            isinstance(e, dict)
            and set(e) == {"relation", "facts"}
            and isinstance(e["relation"], str)
            and _is_str_list(e["facts"])
            for e in payload
        )
    elif kind == DELEGATE_INSTALL:
        ok = isinstance(payload, list) and all(
            isinstance(e, dict)
            and set(e) == {"id", "rule", "decls"}
            and isinstance(e["id"], str)
            and isinstance(e["rule"], str)
            and _is_str_list(e["decls"])
            for e in payload
        )
    else:
        raise DecodeError(f"unknown message kind {kind!r}")
    if not ok:
        raise DecodeError(f"malformed {kind} payload")


def encode_body(msg: Message) -> bytes:
    check_payload(msg.kind, msg.payload)
    return json.dumps(msg.to_json(), ensure_ascii=False, separators=(",", ":")).encode("utf-8")


def encode(msg: Message) -> bytes:
    body = encode_body(msg)
    return _HEADER.pack(len(body)) + body


def decode_body(body: bytes) -> Message:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DecodeError(f"invalid JSON body: {e}") from None
    if not isinstance(obj, dict):
        raise DecodeError("envelope is not an object")
    if obj.get("v") != VERSION:
        raise DecodeError(f"unsupported version {obj.get('v')!r}")
    if set(obj) != {"v", "from", "to", "seq", "kind", "payload"}:
        raise DecodeError("envelope fields do not match")
    sender, target, seq, kind = obj["from"], obj["to"], obj["seq"], obj["kind"]
    if not isinstance(sender, str) or not isinstance(target, str):
        raise DecodeError("sender and target must be strings")
    if isinstance(seq, bool) or not isinstance(seq, int) or seq < 0:
        raise DecodeError("seq must be a non-negative integer")
    if not isinstance(kind, str):
        raise DecodeError("kind must be a string")
    check_payload(kind, obj["payload"])
    return Message(kind, sender, target, seq, obj["payload"])


def decode(data: bytes) -> Message:
    """Decode exactly one frame."""
    if len(data) < _HEADER.size:
        raise DecodeError("truncated length prefix")
    (n,) = _HEADER.unpack_from(data)
    if len(data) - _HEADER.size < n:
        raise DecodeError(f"truncated frame: need {n} bytes, have {len(data) - _HEADER.size}")
    if len(data) - _HEADER.size > n:
        raise DecodeError("trailing bytes after frame")
    return decode_body(data[_HEADER.size:])


class FrameDecoder:
    """Incremental decoder for a byte stream carrying back-to-back frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= _HEADER.size:
            (n,) = _HEADER.unpack_from(self._buf)
            if n > MAX_FRAME:
                raise DecodeError(f"frame of {n} bytes exceeds limit")
            end = _HEADER.size + n
            if len(self._buf) < end:
                break
            out.append(decode_body(bytes(self._buf[_HEADER.size:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)
