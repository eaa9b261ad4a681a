"""
Subject-routed publish/subscribe bus carrying CSI indications up and PMI
control down, with an in-process transport and an NDJSON-over-TCP
transport sharing one wire format.

Subjects are dot-separated tokens: `csi.cell.<pci>.ue.<ue>` and
`ctrl.cell.<pci>`. Patterns may use `*` for one token and a trailing `>`
for one or more tokens.
"""

from __future__ import annotations

import json
import queue
import re
import socket
import socketserver
import threading
from collections import deque
from dataclasses import dataclass
from typing import Callable, Deque, List, Optional, Tuple, Type, Union

from .errors import DecodeError, SchemaError, SubjectError
from .log import get_logger
from .model import ControlDirective, CsiReport, RecordModel

logger = get_logger(__name__)

Payload = Union[CsiReport, ControlDirective]

_TOKEN = re.compile(r"^[A-Za-z0-9_\-]+$")
_CSI_SUBJECT = re.compile(r"^csi\.cell\.(\d+)\.ue\.(\d+)$")
_CTRL_SUBJECT = re.compile(r"^ctrl\.cell\.(\d+)$")


def csi_subject(pci: int, ue: int) -> str:
    return f"csi.cell.{pci}.ue.{ue}"


def ctrl_subject(pci: int) -> str:
    return f"ctrl.cell.{pci}"


def subject_kind(subject: str) -> str:
    """Returns "csi" or "ctrl"; raises SubjectError for anything else."""
    if not isinstance(subject, str):
        raise SubjectError(f"subject must be a string, got {subject!r}")
    if _CSI_SUBJECT.match(subject):
        return "csi"
    if _CTRL_SUBJECT.match(subject):
        return "ctrl"
    raise SubjectError(f"malformed subject {subject!r}")


def payload_type(subject: str) -> Type[RecordModel]:
    return CsiReport if subject_kind(subject) == "csi" else ControlDirective


def parse_pattern(pattern: str) -> Tuple[str, ...]:
    tokens = tuple(pattern.split("."))
    for i, token in enumerate(tokens):
        if token == ">" and i == len(tokens) - 1:
            continue
        if token == "*":
            continue
        if not _TOKEN.match(token):
            raise SubjectError(f"malformed pattern {pattern!r}")
    return tokens


def subject_matches(pattern: Tuple[str, ...], subject: str) -> bool:
    tokens = subject.split(".")
    for i, p in enumerate(pattern):
        if p == ">":
            return len(tokens) > i
        if i >= len(tokens):
            return False
        if p != "*" and p != tokens[i]:
            return False
    return len(tokens) == len(pattern)


@dataclass(frozen=True)
class BusMessage:
    subject: str
    tti: int
    payload: Payload

    @classmethod
    def wrap(cls, payload: Payload) -> BusMessage:
        if isinstance(payload, CsiReport):
            subject = csi_subject(payload.pci, payload.ue)
        else:
            subject = ctrl_subject(payload.pci)
        return cls(subject, payload.tti, payload)


def encode(message: BusMessage) -> bytes:
    """One canonical NDJSON line: subject, tti, payload in that order."""
    document = {
        "subject": message.subject,
        "tti": message.tti,
        "payload": message.payload.to_native_tree(),
    }
    line = json.dumps(
        document, separators=(",", ":"), ensure_ascii=False, allow_nan=False
    )
    return line.encode("utf-8") + b"\n"


def decode(line: bytes, base_offset: int = 0) -> BusMessage:
    """
    Parses one NDJSON line (trailing newline optional). Syntax errors raise
    DecodeError with the absolute byte offset; schema violations raise
    SchemaError naming the field.
    """
    raw = line[:-1] if line.endswith(b"\n") else line
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise DecodeError("invalid UTF-8", base_offset + exc.start) from exc
    try:
        document = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise DecodeError(f"invalid JSON: {exc.msg}", base_offset + offset) from exc
    if not isinstance(document, dict):
        raise DecodeError("message must be a JSON object", base_offset)

    for key in ("subject", "tti", "payload"):
        if key not in document:
            raise SchemaError("missing key", key)
    subject = document["subject"]
    try:
        model = payload_type(subject)
    except SubjectError as exc:
        raise SchemaError(str(exc), "subject") from exc
    tti = document["tti"]
    if isinstance(tti, bool) or not isinstance(tti, int) or tti < 0:
        raise SchemaError("tti must be a non-negative integer", "tti")
    if not isinstance(document["payload"], dict):
        raise SchemaError("payload must be an object", "payload")
    try:
        payload = model.from_native_tree(document["payload"])
    except SchemaError as exc:
        field = f"payload.{exc.field}" if exc.field else "payload"
        raise SchemaError(f"{model.__name__} invalid", field) from exc
    return BusMessage(subject, tti, payload)


class FrameDecoder:
    """
    Incremental NDJSON framing. A bad line is recorded in `errors` and
    decoding resumes at the next newline.
    """

    def __init__(self):
        self._buffer = b""
        self._offset = 0
        self.errors: List[Exception] = []

    def feed(self, data: bytes) -> List[BusMessage]:
        self._buffer += data
        out = []
        while True:
            end = self._buffer.find(b"\n")
            if end < 0:
                break
            line = self._buffer[: end + 1]
            self._buffer = self._buffer[end + 1 :]
            start = self._offset
            self._offset += len(line)
            if not line.strip():
                continue
            try:
                out.append(decode(line, start))
            except (DecodeError, SchemaError) as exc:
                logger.warning("Dropping undecodable line: %s", exc)
                self.errors.append(exc)
        return out

    @property
    def pending(self) -> bytes:
        return self._buffer


def decode_stream(data: bytes) -> Tuple[List[BusMessage], List[Exception]]:
    decoder = FrameDecoder()
    messages = decoder.feed(data)
    if decoder.pending.strip():
        decoder.errors.append(
            DecodeError("truncated final line", decoder._offset)
        )
    return messages, decoder.errors


class Subscription:
    """
    A pattern registration. Without a callback, messages are queued and
    retrieved with `drain()` at the consumer's step boundary.
    """

    def __init__(
        self,
        bus: InProcessBus,
        pattern: str,
        callback: Optional[Callable[[BusMessage], None]] = None,
    ):
        self.bus = bus
        self.pattern = pattern
        self.tokens = parse_pattern(pattern)
        self.callback = callback
        self._queue: Deque[BusMessage] = deque()
        self._lock = threading.Lock()
        self.active = True

    def matches(self, subject: str) -> bool:
        return subject_matches(self.tokens, subject)

    def deliver(self, message: BusMessage) -> None:
        if self.callback is not None:
            self.callback(message)
            return
        with self._lock:
            self._queue.append(message)

    def drain(self) -> List[BusMessage]:
        with self._lock:
            out = list(self._queue)
            self._queue.clear()
        return out

    def unsubscribe(self) -> None:
        self.bus.unsubscribe(self)


class InProcessBus:
    """
    Lossless in-process bus. Dispatch happens under one lock, so every
    subscriber observes a single global order (per-subject FIFO).
    """

    def __init__(self):
        self._lock = threading.RLock()
        self._subscriptions: List[Subscription] = []

    def subscribe(
        self,
        pattern: str,
        callback: Optional[Callable[[BusMessage], None]] = None,
    ) -> Subscription:
        sub = Subscription(self, pattern, callback)
        with self._lock:
            self._subscriptions.append(sub)
        logger.debug("Subscribed %s", pattern)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subscriptions:
                self._subscriptions.remove(sub)
            sub.active = False

    def publish(self, subject: str, message: Union[BusMessage, Payload]) -> int:
        """Delivers to every matching subscriber; returns how many."""
        subject_kind(subject)
        if not isinstance(message, BusMessage):
            message = BusMessage(subject, message.tti, message)
        elif message.subject != subject:
            raise SubjectError(
                f"message subject {message.subject!r} != {subject!r}"
            )
        with self._lock:
            targets = [s for s in self._subscriptions if s.matches(subject)]
            for sub in targets:
                sub.deliver(message)
        return len(targets)

    def publish_payload(self, payload: Payload) -> int:
        message = BusMessage.wrap(payload)
        return self.publish(message.subject, message)


_CLOSE = object()

# frames buffered per TCP subscriber before it is disconnected
OUTBOX_LIMIT = 10_000


class _BusConnectionHandler(socketserver.StreamRequestHandler):
    server: _BusTcpServer

    def handle(self) -> None:
        first = self.rfile.readline()
        try:
            request = json.loads(first.decode("utf-8"))
            if request.get("op") != "sub":
                raise ValueError("first line must be a subscribe request")
            pattern = request["pattern"]
            parse_pattern(pattern)
        except (ValueError, KeyError, AttributeError, SubjectError) as exc:
            logger.warning("Rejecting TCP client %s: %s", self.client_address, exc)
            return

        outbound: queue.Queue = queue.Queue(maxsize=self.server.outbox_limit)
        sub = self.server.bus.subscribe(pattern)
        sub.callback = lambda m: self._enqueue(outbound, sub, m)
        writer = threading.Thread(
            target=self._write_loop, args=(outbound, sub), daemon=True
        )
        writer.start()
        self.server.register(sub)
        try:
            decoder = FrameDecoder()
            for line in self.rfile:
                for message in decoder.feed(line):
                    self.server.bus.publish(message.subject, message)
        except OSError:
            pass
        finally:
            self.server.drop(sub)
            try:
                outbound.put_nowait(_CLOSE)
            except queue.Full:
                self._hang_up()
            writer.join(timeout=1.0)

    def _enqueue(
        self, outbound: queue.Queue, sub: Subscription, message: BusMessage
    ) -> None:
        if not sub.active:
            return
        try:
            outbound.put_nowait(encode(message))
        except queue.Full:
            logger.warning(
                "TCP subscriber %s fell %d frames behind, disconnecting",
                self.client_address,
                outbound.maxsize,
            )
            self.server.drop(sub)
            self._hang_up()

    def _hang_up(self) -> None:
        try:
            self.connection.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def _write_loop(self, outbound: queue.Queue, sub: Subscription):
        while True:
            item = outbound.get()
            if item is _CLOSE:
                return
            try:
                self.wfile.write(item)
                self.wfile.flush()
            except (OSError, ValueError):
                logger.warning("TCP subscriber %s lost", self.client_address)
                self.server.drop(sub)
                return


class _BusTcpServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, bus: InProcessBus, outbox_limit: int):
        self.bus = bus
        self.outbox_limit = outbox_limit
        self._subs: List[Subscription] = []
        self._subs_lock = threading.Lock()
        super().__init__(address, _BusConnectionHandler)

    def register(self, sub: Subscription) -> None:
        with self._subs_lock:
            self._subs.append(sub)

    def drop(self, sub: Subscription) -> None:
        self.bus.unsubscribe(sub)
        with self._subs_lock:
            if sub in self._subs:
                self._subs.remove(sub)

    @property
    def subscriber_count(self) -> int:
        with self._subs_lock:
            return len(self._subs)


class TcpBusServer:
    """
    Bridges an InProcessBus to NDJSON TCP clients. A client that lets more
    than `outbox_limit` frames pile up is unsubscribed and disconnected.
    """

    def __init__(
        self,
        bus: InProcessBus,
        host: str = "127.0.0.1",
        port: int = 0,
        outbox_limit: int = OUTBOX_LIMIT,
    ):
        if outbox_limit < 1:
            raise ValueError(f"outbox_limit must be positive, got {outbox_limit}")
        self._server = _BusTcpServer((host, port), bus, outbox_limit)
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Tuple[str, int]:
        host, port = self._server.server_address[:2]
        return host, port

    @property
    def subscriber_count(self) -> int:
        return self._server.subscriber_count

    def start(self) -> TcpBusServer:
        self._thread = threading.Thread(
            target=self._server.serve_forever, daemon=True
        )
        self._thread.start()
        logger.info("Bus listening on %s:%d", *self.address)
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2.0)


def serve_tcp(
    bus: InProcessBus,
    address: Tuple[str, int] = ("127.0.0.1", 0),
    outbox_limit: int = OUTBOX_LIMIT,
) -> TcpBusServer:
    return TcpBusServer(bus, *address, outbox_limit=outbox_limit).start()


class TcpBusClient:
    """A remote endpoint: one subscription plus the ability to publish."""

    def __init__(self, address: Tuple[str, int], pattern: str, timeout=5.0):
        parse_pattern(pattern)
        self._sock = socket.create_connection(address, timeout=timeout)
        self._sock.settimeout(None)
        self._inbox: queue.Queue = queue.Queue()
        self._decoder = FrameDecoder()
        self._send_lock = threading.Lock()
        line = json.dumps({"op": "sub", "pattern": pattern}) + "\n"
        self._sock.sendall(line.encode("utf-8"))
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                data = self._sock.recv(65536)
                if not data:
                    break
                for message in self._decoder.feed(data):
                    self._inbox.put(message)
        except OSError:
            pass
        finally:
            self._inbox.put(None)

    @property
    def errors(self) -> List[Exception]:
        return self._decoder.errors

    def publish(self, message: BusMessage) -> None:
        with self._send_lock:
            self._sock.sendall(encode(message))

    def receive(self, count: int, timeout: float = 5.0) -> List[BusMessage]:
        """Collects up to `count` messages, waiting at most `timeout` for each."""
        out = []
        while len(out) < count:
            try:
                item = self._inbox.get(timeout=timeout)
            except queue.Empty:
                break
            if item is None:
                break
            out.append(item)
        return out

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def connect_tcp(
    address: Tuple[str, int], pattern: str, timeout: float = 5.0
) -> TcpBusClient:
    return TcpBusClient(address, pattern, timeout)
