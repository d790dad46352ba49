"""Live session control endpoint over a local TCP socket.

Two framings share one port: newline-delimited JSON (scripts, tests)
and WebSocket text messages (browsers), selected per connection by the
first bytes a client sends — an HTTP ``GET`` opens the WebSocket
handshake, anything else (or silence) is treated as line mode.  Event
payloads are identical in both framings: one canonical-JSON object per
message, exactly what the session's snapshot/ack/error sinks produce.

Delivery never blocks the pipeline: each client owns a bounded queue
drained by its own sender thread, and a queued-but-unsent snapshot is
replaced by the next one (acks and errors are never dropped that way).
"""

import base64
import hashlib
import json
import logging
import socket
import struct
import threading
from collections import deque
from typing import List, Optional, Tuple

from .session import SessionCommand, SlamSession, encode_event

log = logging.getLogger("slamkit.control")

MAX_QUEUE = 256                  # per-client event cap (drop-oldest beyond)
MAX_MESSAGE = 1 << 20            # longest accepted inbound message
DETECT_TIMEOUT = 0.25            # seconds to wait for framing-revealing bytes

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


def _ws_accept_key(key: str) -> str:
    digest = hashlib.sha1((key + _WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def _ws_encode_text(payload: bytes) -> bytes:
    n = len(payload)
    if n < 126:
        header = struct.pack("!BB", 0x81, n)
    elif n <= 0xFFFF:
        header = struct.pack("!BBH", 0x81, 126, n)
    else:
        header = struct.pack("!BBQ", 0x81, 127, n)
    return header + payload


def _read_exact(reader, n: int) -> bytes:
    data = reader.read(n)
    if data is None or len(data) < n:
        raise ConnectionError("peer closed mid-frame")
    return data


def _ws_read_frame(reader) -> Tuple[int, bool, bytes]:
    """One frame -> (opcode, fin, payload); client frames must be masked."""
    b1, b2 = _read_exact(reader, 2)
    fin = bool(b1 & 0x80)
    opcode = b1 & 0x0F
    masked = bool(b2 & 0x80)
    length = b2 & 0x7F
    if length == 126:
        (length,) = struct.unpack("!H", _read_exact(reader, 2))
    elif length == 127:
        (length,) = struct.unpack("!Q", _read_exact(reader, 8))
    if length > MAX_MESSAGE:
        raise ConnectionError(f"frame of {length} bytes exceeds limit")
    if not masked:
        raise ConnectionError("client frames must be masked")
    mask = _read_exact(reader, 4)
    payload = bytearray(_read_exact(reader, length))
    for i in range(length):
        payload[i] ^= mask[i & 3]
    return opcode, fin, bytes(payload)


class _Client:
    """One connection: framing, bounded outbound queue, sender thread."""

    def __init__(self, server: "ControlServer", sock: socket.socket, peer):
        self.server = server
        self.sock = sock
        self.peer = peer
        self.websocket = False
        self.alive = True
        self.ready = False            # greeted; broadcasts flow only after
        self._queue: deque = deque()
        self._cond = threading.Condition()
        self._reader = sock.makefile("rb")
        self._send_lock = threading.Lock()
        self._sender = threading.Thread(target=self._send_loop,
                                        name=f"control-send-{peer}",
                                        daemon=True)

    # -- outbound ---------------------------------------------------------

    def push(self, kind: str, data: bytes):
        with self._cond:
            if not self.alive:
                return
            if kind == "snapshot":
                stale = sum(1 for k, _ in self._queue if k == "snapshot")
                if stale:
                    self._queue = deque((k, d) for k, d in self._queue
                                        if k != "snapshot")
            self._queue.append((kind, data))
            while len(self._queue) > MAX_QUEUE:
                self._queue.popleft()
            self._cond.notify()

    def _write(self, data: bytes):
        if self.websocket:
            frame = _ws_encode_text(data.rstrip(b"\n"))
        else:
            frame = data
        with self._send_lock:
            self.sock.sendall(frame)

    def _send_loop(self):
        while True:
            with self._cond:
                while self.alive and not self._queue:
                    self._cond.wait(0.2)
                if not self.alive:
                    return
                kind, data = self._queue.popleft()
            try:
                self._write(data)
            except OSError:
                self.close()
                return

    # -- inbound ----------------------------------------------------------

    def serve(self):
        """Detect framing, greet, then pump inbound messages."""
        try:
            # peek on the raw socket: a timed-out makefile object poisons
            # every later read, MSG_PEEK consumes nothing either way
            self.sock.settimeout(DETECT_TIMEOUT)
            try:
                head = self.sock.recv(4, socket.MSG_PEEK)
            except (TimeoutError, socket.timeout):
                head = b""
            self.sock.settimeout(None)
            # an HTTP upgrade always leads with "GET "; JSON never starts
            # with G, and a silent client is a passive line-mode viewer
            if head[:1] == b"G":
                self._handshake()
                self.websocket = True
        except (OSError, ConnectionError, ValueError) as e:
            log.info("client %s rejected during setup: %s", self.peer, e)
            self.close()
            return
        self.push("hello", encode_event(self.server.session.describe()))
        self.ready = True
        self._sender.start()
        self.server.session.request_snapshot()
        try:
            if self.websocket:
                self._pump_frames()
            else:
                self._pump_lines()
        except (OSError, ConnectionError, ValueError):
            pass
        finally:
            self.close()

    def _handshake(self):
        request_line = self._reader.readline(4096)
        headers = {}
        while True:
            line = self._reader.readline(4096)
            if line in (b"\r\n", b"\n", b""):
                break
            name, _, value = line.decode("latin-1").partition(":")
            headers[name.strip().lower()] = value.strip()
        key = headers.get("sec-websocket-key")
        if (b"HTTP/" not in request_line
                or "websocket" not in headers.get("upgrade", "").lower()
                or not key):
            self.sock.sendall(b"HTTP/1.1 400 Bad Request\r\n"
                              b"Connection: close\r\n\r\n")
            raise ConnectionError("not a websocket upgrade")
        response = ("HTTP/1.1 101 Switching Protocols\r\n"
                    "Upgrade: websocket\r\n"
                    "Connection: Upgrade\r\n"
                    f"Sec-WebSocket-Accept: {_ws_accept_key(key)}\r\n\r\n")
        self.sock.sendall(response.encode("ascii"))

    def _pump_lines(self):
        while self.alive:
            line = self._reader.readline(MAX_MESSAGE + 1)
            if not line:
                return
            if len(line) > MAX_MESSAGE:
                raise ConnectionError("message exceeds limit")
            if line.strip():
                self._handle_message(line)

    def _pump_frames(self):
        message = bytearray()
        while self.alive:
            opcode, fin, payload = _ws_read_frame(self._reader)
            if opcode == 0x8:                      # close
                with self._send_lock:
                    try:
                        self.sock.sendall(struct.pack("!BB", 0x88, 0))
                    except OSError:
                        pass
                return
            if opcode == 0x9:                      # ping -> pong
                with self._send_lock:
                    self.sock.sendall(
                        struct.pack("!BB", 0x8A, len(payload)) + payload)
                continue
            if opcode == 0xA:                      # pong
                continue
            if opcode in (0x1, 0x2):
                message = bytearray(payload)
            elif opcode == 0x0:
                message.extend(payload)
            else:
                raise ConnectionError(f"unsupported opcode {opcode}")
            if len(message) > MAX_MESSAGE:
                raise ConnectionError("message exceeds limit")
            if fin:
                self._handle_message(bytes(message))
                message = bytearray()

    def _handle_message(self, raw: bytes):
        kind = None
        try:
            msg = json.loads(raw.decode("utf-8"))
            if not isinstance(msg, dict):
                raise ValueError("command must be a JSON object")
            kind = msg.get("kind")
            command = SessionCommand(kind, msg.get("payload"))
        except (ValueError, UnicodeDecodeError) as e:
            # a bad message poisons nothing: answer this client only
            event = {"type": "error", "error": str(e),
                     "command": kind if isinstance(kind, str) else None}
            self.push("error", encode_event(event))
            return
        self.server.session.submit(command)

    def close(self):
        with self._cond:
            if not self.alive:
                return
            self.alive = False
            self._cond.notify()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        try:
            self.sock.close()
        except OSError:
            pass
        self.server._forget(self)


class ControlServer:
    """Accepts control clients for one session and fans out its events."""

    def __init__(self, session: SlamSession, host: str = "127.0.0.1",
                 port: int = 0):
        self.session = session
        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(8)
        self._listener.settimeout(0.2)
        self.host, self.port = self._listener.getsockname()[:2]
        self._clients: List[_Client] = []
        self._lock = threading.Lock()
        self._closed = False
        session.subscribe(self._fanout)
        self._acceptor = threading.Thread(target=self._accept_loop,
                                          name="control-accept", daemon=True)
        self._acceptor.start()
        log.info("control endpoint listening on %s:%d", self.host, self.port)

    def _accept_loop(self):
        while not self._closed:
            try:
                sock, peer = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            client = _Client(self, sock, peer)
            with self._lock:
                self._clients.append(client)
            threading.Thread(target=client.serve,
                             name=f"control-recv-{peer}",
                             daemon=True).start()

    def _fanout(self, event: dict):
        data = encode_event(event)
        kind = str(event.get("type", ""))
        with self._lock:
            clients = [c for c in self._clients if c.ready]
        for client in clients:
            client.push(kind, data)

    def _forget(self, client: _Client):
        with self._lock:
            if client in self._clients:
                self._clients.remove(client)

    @property
    def num_clients(self) -> int:
        with self._lock:
            return len(self._clients)

    def close(self):
        if self._closed:
            return
        self._closed = True
        self.session.unsubscribe(self._fanout)
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            clients = list(self._clients)
        for client in clients:
            client.close()
        log.info("control endpoint closed")


class ControlClient:
    """Line-mode client used by scripts and tests."""

    def __init__(self, host: str, port: int, timeout: float = 30.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._reader = self.sock.makefile("rb")

    def send(self, kind: str, payload: Optional[dict] = None):
        msg = {"kind": kind}
        if payload is not None:
            msg["payload"] = payload
        self.sock.sendall((json.dumps(msg) + "\n").encode("utf-8"))

    def read_event(self) -> dict:
        line = self._reader.readline()
        if not line:
            raise ConnectionError("control endpoint closed")
        return json.loads(line.decode("utf-8"))

    def wait_for(self, event_type: str, limit: int = 1000) -> dict:
        """Read until an event of the given type arrives."""
        for _ in range(limit):
            event = self.read_event()
            if event.get("type") == event_type:
                return event
        raise TimeoutError(f"no '{event_type}' event within {limit} reads")

    def close(self):
        try:
            self.sock.close()
        except OSError:
            pass
