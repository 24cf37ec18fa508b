"""Worker wire protocol and the worker loop.

A message is ``{"type": "work" | "result" | "failure" | "shutdown", "payload": {...}}``
encoded as UTF-8 JSON behind a 4-byte big-endian length prefix. The same
messages travel over in-process queues and over pipes/sockets between processes.

Run ``python -m nasnet_search.searchd.protocol`` to serve work on stdin/stdout.
"""

from __future__ import annotations

import json
import os
import struct
import sys
from typing import BinaryIO

from .. import genome as G
from .evaluators import WorkerDeath, evaluate_payload

WORK, RESULT, FAILURE, SHUTDOWN = "work", "result", "failure", "shutdown"
MESSAGE_TYPES = (WORK, RESULT, FAILURE, SHUTDOWN)
_LEN = struct.Struct(">I")
MAX_MESSAGE = 64 * 1024 * 1024


class ProtocolError(ValueError):
    pass


def message(kind: str, payload: dict | None = None) -> dict:
    if kind not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {kind!r}")
    return {"type": kind, "payload": payload or {}}


def encode_message(msg: dict) -> bytes:
    if msg.get("type") not in MESSAGE_TYPES:
        raise ProtocolError(f"unknown message type {msg.get('type')!r}")
    body = json.dumps(msg, separators=(",", ":"), sort_keys=True).encode()
    return _LEN.pack(len(body)) + body


def decode_message(body: bytes) -> dict:
    try:
        msg = json.loads(body.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"undecodable message: {exc}") from None
    if not isinstance(msg, dict) or msg.get("type") not in MESSAGE_TYPES or not isinstance(msg.get("payload"), dict):
        raise ProtocolError(f"malformed message {str(msg)[:80]!r}")
    return msg


def _read_exact(stream: BinaryIO, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if buf:
                raise ProtocolError(f"stream ended inside a frame ({len(buf)} of {n} bytes)")
            return None
        buf += chunk
    return buf


def read_message(stream: BinaryIO) -> dict | None:
    """Next message, or None at a clean end of stream."""
    head = _read_exact(stream, _LEN.size)
    if head is None:
        return None
    (n,) = _LEN.unpack(head)
    if n > MAX_MESSAGE:
        raise ProtocolError(f"frame of {n} bytes exceeds limit")
    body = _read_exact(stream, n)
    if body is None:
        raise ProtocolError("stream ended before frame body")
    return decode_message(body)


def write_message(stream: BinaryIO, msg: dict) -> None:
    stream.write(encode_message(msg))
    stream.flush()


def handle_work(payload: dict) -> dict:
    """Evaluate one work payload and build the result payload."""
    res = evaluate_payload(payload)
    out = res.to_record()
    out["id"] = payload["id"]
    out["attempt"] = payload.get("attempt", 0)
    return out


def run_worker(rfile: BinaryIO, wfile: BinaryIO, exit_on_fault: bool = True) -> int:
    """Serve work messages until shutdown or end of stream; returns the number handled.

    An injected fault ends the process abruptly (like a crashed child
    trainer) when ``exit_on_fault`` is set, otherwise it is reported as a
    failure message.
    """
    handled = 0
    while True:
        msg = read_message(rfile)
        if msg is None or msg["type"] == SHUTDOWN:
            return handled
        if msg["type"] != WORK:
            raise ProtocolError(f"worker expected work, got {msg['type']!r}")
        payload = msg["payload"]
        try:
            result = handle_work(payload)
        except WorkerDeath:
            if exit_on_fault:
                os._exit(3)
            write_message(wfile, message(FAILURE, {"id": payload["id"], "attempt": payload.get("attempt", 0),
                                                   "error": "worker died"}))
        except (G.GenomeError, ValueError) as exc:
            write_message(wfile, message(FAILURE, {"id": payload["id"], "attempt": payload.get("attempt", 0),
                                                   "error": str(exc)}))
        else:
            write_message(wfile, message(RESULT, result))
        handled += 1


if __name__ == "__main__":  # pragma: no cover - exercised through subprocess workers
    sys.exit(0 if run_worker(sys.stdin.buffer, sys.stdout.buffer) >= 0 else 1)
