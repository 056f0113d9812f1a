"""Transports between the coordinator and the centers.

Both transports expose ``exchange(requests) -> replies`` for one
synchronous round: request ``k`` goes to center ``k`` and the call returns
once every center has answered (or raises ``RoundFailure``).  Every reply
passes the privacy check before the coordinator sees it.

``InProcessTransport`` calls the handlers directly.  ``StreamTransport``
gives every center its own thread behind a socket pair and speaks the
binary frame format (or JSON lines with ``codec='jsonl'``), so the same
bytes would work across processes.
"""

from __future__ import annotations

import io
import socket
import threading
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor

from ..errors import InvalidArgument, ProtocolError, RoundFailure
from .protocol import Message, check_payload, decode_json, decode_message, encode_json, encode_message, read_frame

DEFAULT_TIMEOUT = 60.0


class CommLog:
    """Running tally of messages and floats per direction and message type.

    A broadcast (the same request to every center) counts once downstream;
    replies count once per center.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with self._lock:
            self.messages = {"down": 0, "up": 0}
            self.floats = {"down": 0, "up": 0}
            self.by_type = defaultdict(int)

    def record(self, direction: str, msg: Message):
        with self._lock:
            self.messages[direction] += 1
            self.floats[direction] += msg.n_floats
            self.by_type[msg.type] += msg.n_floats

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "messages": dict(self.messages),
                "floats": dict(self.floats),
                "by_type": dict(self.by_type),
            }

    @property
    def total_floats(self) -> int:
        return self.floats["down"] + self.floats["up"]


def _check_reply(center, req: Message, reply: Message, k: int):
    if reply.type == "error":
        raise RoundFailure(f"center {k} failed in round {req.round}: {reply.text}", center=k)
    check_payload(reply, center.m, center.data.p)
    return reply


def _check_requests(centers, requests):
    for c, r in zip(centers, requests):
        check_payload(r, c.m, c.data.p)


def _log_round(log: CommLog, requests, replies):
    if all(r is requests[0] for r in requests):
        log.record("down", requests[0])
    else:
        for r in requests:
            log.record("down", r)
    for r in replies:
        log.record("up", r)


class InProcessTransport:
    name = "inproc"

    def __init__(self, centers, workers: int = 1, timeout: float = DEFAULT_TIMEOUT):
        self.centers = list(centers)
        self.workers = workers
        self.timeout = timeout
        self.log = CommLog()

    def exchange(self, requests):
        if len(requests) != len(self.centers):
            raise InvalidArgument("one request per center is required")
        _check_requests(self.centers, requests)
        if self.workers > 1:
            with ThreadPoolExecutor(self.workers) as pool:
                futs = [pool.submit(c.handle, r) for c, r in zip(self.centers, requests)]
                raw = []
                for k, f in enumerate(futs):
                    try:
                        raw.append(f.result(timeout=self.timeout))
                    except TimeoutError:
                        raise RoundFailure(f"center {k} timed out", center=k) from None
        else:
            raw = [c.handle(r) for c, r in zip(self.centers, requests)]
        replies = [_check_reply(c, q, r, k) for k, (c, q, r) in enumerate(zip(self.centers, requests, raw))]
        _log_round(self.log, requests, replies)
        return replies

    def close(self):
        pass


class _StreamEndpoint:
    def __init__(self, center, codec: str):
        self.center = center
        self.codec = codec
        self.coord_sock, self.center_sock = socket.socketpair()
        self.thread = threading.Thread(target=self._serve, daemon=True)
        self.thread.start()

    def _serve(self):
        rf = self.center_sock.makefile("rb")
        wf = self.center_sock.makefile("wb")
        try:
            while True:
                try:
                    req = self._read(rf)
                except (ProtocolError, OSError, ValueError):
                    return
                reply = self.center.handle(req)
                self._write(wf, reply)
        finally:
            rf.close()
            wf.close()

    def _read(self, f):
        if self.codec == "jsonl":
            line = f.readline()
            if not line:
                raise ProtocolError("stream closed")
            return decode_json(line.decode("utf-8"))
        return decode_message(read_frame(f))

    def _write(self, f, msg):
        data = encode_json(msg).encode("utf-8") if self.codec == "jsonl" else encode_message(msg)
        f.write(data)
        f.flush()


class StreamTransport:
    """Binary frames (or JSON lines) over per-center byte streams."""

    name = "stream"

    def __init__(self, centers, codec: str = "binary", timeout: float = DEFAULT_TIMEOUT):
        if codec not in ("binary", "jsonl"):
            raise InvalidArgument(f"unknown codec {codec!r}")
        self.centers = list(centers)
        self.codec = codec
        self.timeout = timeout
        self.log = CommLog()
        self._ends = [_StreamEndpoint(c, codec) for c in self.centers]
        self._files = []
        for e in self._ends:
            e.coord_sock.settimeout(timeout)
            self._files.append((e.coord_sock.makefile("rb"), e.coord_sock.makefile("wb")))

    def exchange(self, requests):
        if len(requests) != len(self.centers):
            raise InvalidArgument("one request per center is required")
        _check_requests(self.centers, requests)
        for k, (req, (_, wf)) in enumerate(zip(requests, self._files)):
            try:
                self._ends[k]._write(wf, req)
            except OSError as exc:
                raise RoundFailure(f"center {k}: send failed ({exc})", center=k) from None
        replies = []
        for k, (rf, _) in enumerate(self._files):
            try:
                replies.append(self._ends[k]._read(rf))
            except (socket.timeout, TimeoutError):
                raise RoundFailure(f"center {k} timed out after {self.timeout} s", center=k) from None
            except (ProtocolError, OSError, io.UnsupportedOperation) as exc:
                raise RoundFailure(f"center {k}: {exc}", center=k) from None
        replies = [_check_reply(c, q, r, k) for k, (c, q, r) in enumerate(zip(self.centers, requests, replies))]
        _log_round(self.log, requests, replies)
        return replies

    def close(self):
        for (rf, wf), e in zip(self._files, self._ends):
            for f in (wf, rf):
                try:
                    f.close()
                except OSError:
                    pass
            e.coord_sock.close()
        for e in self._ends:
            e.thread.join(timeout=1.0)
            e.center_sock.close()
        self._files = []

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass
