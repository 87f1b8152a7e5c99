"""
External generator protocol
Newline-delimited JSON over a byte stream (stdio or TCP) between the
controller and an external generator, plus a stub generator that replays
a recorded entropy series for integration tests.

    controller -> {"type": "hello", "version": 1}
    generator  -> {"type": "hello", "version": 1}
    generator  -> {"type": "step", "entropy": float, "finished": bool}
    controller -> {"type": "continue"}
                | {"type": "rectify", "template": str, "reinit_template": str}
    generator  -> {"type": "anchor", "summary": str}    (after rectify only)
"""

import json
import logging
import math
import queue
import shlex
import socket
import subprocess
import sys
import threading
from dataclasses import dataclass
from typing import BinaryIO, Dict, Optional, Sequence

from dynamics import HaloError

logger = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
DEFAULT_TIMEOUT = 30.0


class AdapterTransportError(HaloError):
    """Base class for failures talking to the external generator"""


class AdapterClosedError(AdapterTransportError):
    """The peer closed the stream"""


class AdapterTimeoutError(AdapterTransportError):
    """No message arrived within the configured timeout"""


class ProtocolViolationError(AdapterTransportError):
    """A message was malformed or arrived out of order"""


class VersionMismatchError(AdapterTransportError):
    """The peer speaks another protocol version"""


class RectifyTransportError(AdapterTransportError):
    """The compress-and-reset exchange failed"""


def encode_message(message: Dict) -> bytes:
    return (json.dumps(message, separators=(",", ":")) + "\n").encode("utf-8")


def decode_message(line) -> Dict:
    """Parse one protocol line; anything but a JSON object with a string ``type`` is a violation"""
    if isinstance(line, bytes):
        line = line.decode("utf-8", errors="replace")
    try:
        message = json.loads(line)
    except json.JSONDecodeError as e:
        raise ProtocolViolationError(f"Malformed protocol line {line.strip()[:80]!r}: {e}") from e
    if not isinstance(message, dict) or not isinstance(message.get("type"), str):
        raise ProtocolViolationError(f"Protocol message without a type: {line.strip()[:80]!r}")
    return message


@dataclass(frozen=True)
class StepMessage:
    entropy: float
    finished: bool

    @classmethod
    def from_message(cls, message: Dict) -> "StepMessage":
        if message["type"] != "step":
            raise ProtocolViolationError(f"Expected a step message, got {message['type']!r}")
        entropy, finished = message.get("entropy"), message.get("finished")
        if isinstance(entropy, bool) or not isinstance(entropy, (int, float)) or not math.isfinite(entropy) \
                or entropy < 0:
            raise ProtocolViolationError(f"step.entropy must be a finite number >= 0, got {entropy!r}")
        if not isinstance(finished, bool):
            raise ProtocolViolationError(f"step.finished must be a boolean, got {finished!r}")
        return cls(float(entropy), finished)


class LineChannel:
    """
    Line-oriented duplex stream with read timeouts.

    A daemon thread drains the read side into a queue so that a blocked
    peer surfaces as AdapterTimeoutError instead of hanging the controller.
    """

    _EOF = object()

    def __init__(self, reader: BinaryIO, writer: BinaryIO, closer=None):
        self._writer = writer
        self._closer = closer
        self._lines: "queue.Queue" = queue.Queue()
        self._thread = threading.Thread(target=self._pump, args=(reader,), daemon=True)
        self._thread.start()

    def _pump(self, reader):
        try:
            for line in iter(reader.readline, b""):
                if line.strip():
                    self._lines.put(line)
        except (OSError, ValueError) as e:
            logger.debug(f"Adapter reader stopped: {e}")
        self._lines.put(self._EOF)

    @classmethod
    def from_socket(cls, sock: socket.socket) -> "LineChannel":
        return cls(sock.makefile("rb"), sock.makefile("wb"), closer=sock.close)

    @classmethod
    def from_process(cls, command: Sequence[str]) -> "LineChannel":
        proc = subprocess.Popen(list(command), stdin=subprocess.PIPE, stdout=subprocess.PIPE)

        def close():
            proc.stdin.close()
            proc.wait(timeout=5)

        return cls(proc.stdout, proc.stdin, closer=close)

    def send(self, message: Dict):
        try:
            self._writer.write(encode_message(message))
            self._writer.flush()
        except (OSError, ValueError) as e:
            raise AdapterClosedError(f"Cannot write to adapter: {e}") from e

    def receive(self, timeout: Optional[float]) -> Dict:
        try:
            line = self._lines.get(timeout=timeout)
        except queue.Empty:
            raise AdapterTimeoutError(f"No adapter message within {timeout}s") from None
        if line is self._EOF:
            self._lines.put(self._EOF)
            raise AdapterClosedError("Adapter closed the stream")
        return decode_message(line)

    def close(self):
        if self._closer is not None:
            try:
                self._closer()
            except (OSError, subprocess.TimeoutExpired) as e:
                logger.debug(f"Adapter close failed: {e}")


class AdapterSession:
    """Controller side of one strictly sequential protocol exchange"""

    def __init__(self, channel: LineChannel, timeout: Optional[float] = DEFAULT_TIMEOUT):
        self.channel = channel
        self.timeout = timeout
        self._ready = False
        self._pending_decision = False

    def handshake(self):
        self.channel.send({"type": "hello", "version": PROTOCOL_VERSION})
        reply = self.channel.receive(self.timeout)
        if reply["type"] != "hello":
            raise ProtocolViolationError(f"Expected hello, got {reply['type']!r}")
        if reply.get("version") != PROTOCOL_VERSION:
            raise VersionMismatchError(
                f"Adapter speaks version {reply.get('version')!r}, expected {PROTOCOL_VERSION}")
        self._ready = True
        logger.info(f"Adapter handshake complete (protocol v{PROTOCOL_VERSION})")

    def next_step(self) -> StepMessage:
        if not self._ready:
            raise ProtocolViolationError("next_step before handshake")
        if self._pending_decision:
            raise ProtocolViolationError("Previous step still awaits continue or rectify")
        step = StepMessage.from_message(self.channel.receive(self.timeout))
        self._pending_decision = not step.finished
        return step

    def send_continue(self):
        self._decide()
        self.channel.send({"type": "continue"})

    def rectify(self, template: str, reinit_template: str = "") -> str:
        """Send compress-and-reset with both prompt templates and return the anchor summary"""
        self._decide()
        try:
            self.channel.send({"type": "rectify", "template": template, "reinit_template": reinit_template})
            reply = self.channel.receive(self.timeout)
            if reply["type"] != "anchor" or not isinstance(reply.get("summary"), str):
                raise ProtocolViolationError(f"Expected an anchor with a summary, got {reply!r}")
        except RectifyTransportError:
            raise
        except AdapterTransportError as e:
            raise RectifyTransportError(f"Rectification failed: {e}") from e
        return reply["summary"]

    def _decide(self):
        if not self._pending_decision:
            raise ProtocolViolationError("No step awaiting a decision")
        self._pending_decision = False

    def close(self):
        self.channel.close()


def connect(endpoint: str, timeout: Optional[float] = DEFAULT_TIMEOUT) -> AdapterSession:
    """
    Open a session to ``tcp://host:port`` or ``stdio:<command line>``.

    The handshake is performed before returning.
    """
    if endpoint.startswith("tcp://"):
        host, _, port = endpoint[len("tcp://"):].rpartition(":")
        try:
            sock = socket.create_connection((host or "127.0.0.1", int(port)), timeout=timeout)
        except (OSError, ValueError) as e:
            raise AdapterClosedError(f"Cannot connect to {endpoint}: {e}") from e
        sock.settimeout(None)
        channel = LineChannel.from_socket(sock)
    elif endpoint.startswith("stdio:"):
        command = shlex.split(endpoint[len("stdio:"):])
        if not command:
            raise ValueError("stdio endpoint needs a command line")
        channel = LineChannel.from_process(command)
    else:
        raise ValueError(f"Unsupported adapter endpoint {endpoint!r}; use tcp://host:port or stdio:<cmd>")
    session = AdapterSession(channel, timeout)
    session.handshake()
    return session


class StubGenerator:
    """
    Generator side that replays a recorded entropy series.

    Every rectify is answered with an anchor ``anchor_template`` formatted
    with the reset count (a template without ``{n}`` yields identical
    anchors). After the series a final ``finished`` step is sent. With
    ``close_after`` the stream is dropped after that many step messages.
    """

    def __init__(self, entropies: Sequence[float], close_after: Optional[int] = None,
                 anchor_template: str = "anchor {n}", version: int = PROTOCOL_VERSION):
        self.entropies = [float(h) for h in entropies]
        self.close_after = close_after
        self.anchor_template = anchor_template
        self.version = version
        self.templates_received = []
        self.reinit_templates_received = []

    def serve(self, reader: BinaryIO, writer: BinaryIO):
        def send(message):
            writer.write(encode_message(message))
            writer.flush()

        def receive():
            line = reader.readline()
            if not line:
                raise AdapterClosedError("Controller closed the stream")
            return decode_message(line)

        hello = receive()
        if hello["type"] != "hello":
            raise ProtocolViolationError(f"Expected hello, got {hello['type']!r}")
        send({"type": "hello", "version": self.version})

        resets = 0
        for sent, entropy in enumerate(self.entropies):
            if self.close_after is not None and sent >= self.close_after:
                logger.info(f"Stub generator closing after {sent} steps")
                return
            send({"type": "step", "entropy": entropy, "finished": False})
            reply = receive()
            if reply["type"] == "rectify":
                resets += 1
                self.templates_received.append(reply.get("template", ""))
                self.reinit_templates_received.append(reply.get("reinit_template", ""))
                send({"type": "anchor", "summary": self.anchor_template.format(n=resets)})
            elif reply["type"] != "continue":
                raise ProtocolViolationError(f"Unexpected controller message {reply['type']!r}")
        send({"type": "step", "entropy": 0.0, "finished": True})

    def serve_socket(self, sock: socket.socket):
        with sock, sock.makefile("rb") as reader, sock.makefile("wb") as writer:
            try:
                self.serve(reader, writer)
            except AdapterTransportError as e:
                logger.warning(f"Stub generator stopped: {e}")

    def serve_stdio(self):
        self.serve(sys.stdin.buffer, sys.stdout.buffer)

    def serve_tcp(self, host: str = "127.0.0.1", port: int = 0, ready=None):
        """Accept a single connection and serve it; ``ready`` receives the bound port"""
        with socket.create_server((host, port)) as server:
            bound = server.getsockname()[1]
            logger.info(f"Stub generator listening on {host}:{bound}")
            if ready is not None:
                ready(bound)
            conn, _ = server.accept()
            self.serve_socket(conn)
