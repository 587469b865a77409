"""Wire protocol v1: canonical message bodies, framing, and two transports.

Every integer on the wire is little-endian. Points are 33-byte compressed
encodings and signatures are raw 64-byte ``r || s``. A signature always covers
the body bytes that precede it, so decoding and re-encoding a message never
invalidates its signature.

Frame layout::

    length (4) | msg_type (1) | sender role (1) | sender index (4) | body

where ``length`` counts everything after itself.
"""

from __future__ import annotations

import logging
import queue
import random
import socket
import struct
import threading
from collections import Counter, deque
from dataclasses import dataclass

import numpy as np

from .commit import IDENTITY, POINT_SIZE, AggregationProof, Commitment, decode_point
from .crypto import SIGNATURE_SIZE
from .errors import (
    ConnectionClosed,
    FrameTooLarge,
    InvalidPoint,
    LengthMismatch,
    MalformedFrame,
)
from .masking import ELEMENT_SIZE
from .messages import (
    AggregatedMaskMsg,
    KeyAnnounce,
    MaskedUpdate,
    MessageType,
    ParticipationMsg,
    PartyId,
    ReconcileRequest,
    RecoveryShare,
    Role,
    RoundResult,
    SecretCiphertext,
    SecretKind,
)

TYPE_CHECKING = False
if TYPE_CHECKING:
    from collections.abc import Callable
    from typing import Final, Protocol

    from .masking import GradientVector
    from .messages import Message

    class ReadableStream(Protocol):
        def read(self, n: int, /) -> bytes: ...

    class WritableStream(Protocol):
        def write(self, data: bytes, /) -> int | None: ...

        def flush(self) -> None: ...

    FrameHandler = Callable[["Frame"], None]
    LinkPolicy = Callable[[PartyId, PartyId, "Frame"], bool]

logger = logging.getLogger(__name__)

HEADER_SIZE: Final = 6
DEFAULT_MAX_FRAME: Final = 256 * 1024 * 1024
DIGEST_SIZE: Final = 32
LANE_SIZE: Final = 32
CIPHERTEXT_SIZE: Final = 48


@dataclass(frozen=True)
class WireFormat:
    """Which optional fields are present on the wire for a deployment."""

    d: int
    malicious: bool = False
    integrity: bool = False
    list_digest: bool = False

    @property
    def vector_size(self) -> int:
        return ELEMENT_SIZE * self.d

    @property
    def signature_size(self) -> int:
        return SIGNATURE_SIZE if self.malicious else 0

    def participation_size(self) -> int:
        return 4 + self.signature_size

    def masked_update_size(self) -> int:
        return (
            4
            + self.vector_size
            + (POINT_SIZE if self.integrity else 0)
            + self.signature_size
        )

    def node_aggregate_size(self) -> int:
        return (
            8
            + self.vector_size
            + (LANE_SIZE if self.integrity else 0)
            + (DIGEST_SIZE if self.list_digest else 0)
            + self.signature_size
        )

    def round_result_size(self) -> int:
        return (
            8
            + self.vector_size
            + (POINT_SIZE if self.integrity else 0)
            + self.signature_size
        )


##############################
# PRIMITIVE READERS          #
##############################


class _Reader:
    def __init__(self, body: bytes, what: str) -> None:
        self.body = body
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            msg = (
                f"Truncated {self.what}: need {self.pos + n} bytes, "
                f"have {len(self.body)}"
            )
            raise MalformedFrame(msg)
        chunk = self.body[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return int.from_bytes(self.take(4), "little")

    def vector(self, d: int) -> GradientVector:
        return np.frombuffer(self.take(ELEMENT_SIZE * d), dtype="<u4").astype(
            np.uint32
        )

    def point(self) -> tuple[int, int]:
        try:
            return decode_point(self.take(POINT_SIZE))
        except InvalidPoint as exc:
            msg = f"Invalid point in {self.what}"
            raise MalformedFrame(msg) from exc

    def done(self) -> None:
        if self.pos != len(self.body):
            msg = f"Trailing bytes after {self.what}: {len(self.body) - self.pos}"
            raise MalformedFrame(msg)


def _u32(value: int) -> bytes:
    return value.to_bytes(4, "little")


def _vector(v: GradientVector, d: int, what: str) -> bytes:
    if len(v) != d:
        msg = f"{what} has {len(v)} elements, expected {d}"
        raise LengthMismatch(msg)
    return np.asarray(v, dtype="<u4").tobytes()


def _signature(sigma: bytes | None, fmt: WireFormat, what: str) -> bytes:
    if not fmt.malicious:
        return b""
    if sigma is None or len(sigma) != SIGNATURE_SIZE:
        msg = f"{what} must carry a {SIGNATURE_SIZE}-byte signature in malicious mode"
        raise ValueError(msg)
    return sigma


def _read_signature(reader: _Reader, fmt: WireFormat) -> bytes | None:
    return reader.take(SIGNATURE_SIZE) if fmt.malicious else None


##############################
# KEY ANNOUNCEMENTS          #
##############################


def encode_key_announce(message: KeyAnnounce, sender: Role, fmt: WireFormat) -> bytes:
    parts = []
    if sender is not Role.SERVER:
        if message.kx_pk is None:
            msg = "Users and nodes must announce a key-exchange key"
            raise ValueError(msg)
        parts.append(message.kx_pk)
    if fmt.malicious:
        if message.sig_pk is None:
            msg = "Malicious mode requires a signature key in every announcement"
            raise ValueError(msg)
        parts.append(message.sig_pk)
    return b"".join(parts)


def decode_key_announce(body: bytes, sender: Role, fmt: WireFormat) -> KeyAnnounce:
    reader = _Reader(body, "key announcement")
    kx_pk = reader.take(POINT_SIZE) if sender is not Role.SERVER else None
    sig_pk = reader.take(POINT_SIZE) if fmt.malicious else None
    reader.done()
    return KeyAnnounce(kx_pk=kx_pk, sig_pk=sig_pk)


##############################
# SECRET DISTRIBUTION        #
##############################


def encode_secret_ciphertext(message: SecretCiphertext) -> bytes:
    if len(message.ciphertext) != CIPHERTEXT_SIZE:
        msg = f"Secret ciphertext must be {CIPHERTEXT_SIZE} bytes"
        raise LengthMismatch(msg)
    return bytes([message.kind]) + _u32(message.user) + message.ciphertext


def decode_secret_ciphertext(body: bytes) -> SecretCiphertext:
    reader = _Reader(body, "secret ciphertext")
    kind_byte = reader.take(1)[0]
    try:
        kind = SecretKind(kind_byte)
    except ValueError as exc:
        msg = f"Unknown secret kind {kind_byte}"
        raise MalformedFrame(msg) from exc
    user = reader.u32()
    ciphertext = reader.take(CIPHERTEXT_SIZE)
    reader.done()
    return SecretCiphertext(kind=kind, user=user, ciphertext=ciphertext)


##############################
# PARTICIPATION              #
##############################


def participation_signing_bytes(message: ParticipationMsg) -> bytes:
    return _u32(message.t)


def encode_participation(message: ParticipationMsg, fmt: WireFormat) -> bytes:
    return participation_signing_bytes(message) + _signature(
        message.sigma, fmt, "Participation"
    )


def decode_participation(body: bytes, fmt: WireFormat) -> ParticipationMsg:
    reader = _Reader(body, "participation")
    t = reader.u32()
    sigma = _read_signature(reader, fmt)
    reader.done()
    return ParticipationMsg(t=t, sigma=sigma)


##############################
# MASKED UPDATES             #
##############################


def masked_update_signing_bytes(message: MaskedUpdate, fmt: WireFormat) -> bytes:
    parts = [_u32(message.t), _vector(message.y, fmt.d, "Masked update")]
    if fmt.integrity:
        if message.cm is None:
            msg = "Integrity mode requires a commitment in every masked update"
            raise ValueError(msg)
        parts.append(message.cm.to_bytes())
    return b"".join(parts)


def encode_masked_update(message: MaskedUpdate, fmt: WireFormat) -> bytes:
    return masked_update_signing_bytes(message, fmt) + _signature(
        message.sigma, fmt, "Masked update"
    )


def decode_masked_update(body: bytes, fmt: WireFormat) -> MaskedUpdate:
    reader = _Reader(body, "masked update")
    t = reader.u32()
    y = reader.vector(fmt.d)
    cm = Commitment(reader.point()) if fmt.integrity else None
    sigma = _read_signature(reader, fmt)
    reader.done()
    return MaskedUpdate(t=t, y=y, cm=cm, sigma=sigma)


##############################
# NODE AGGREGATES            #
##############################


def node_aggregate_signing_bytes(
    message: AggregatedMaskMsg, fmt: WireFormat
) -> bytes:
    parts = [
        _u32(message.t),
        _u32(message.list_len),
        _vector(message.a, fmt.d, "Node mask"),
    ]
    if fmt.integrity:
        if message.r_lane_sum is None:
            msg = "Integrity mode requires a randomness lane in node aggregates"
            raise ValueError(msg)
        parts.append(message.r_lane_sum.to_bytes(LANE_SIZE, "little"))
    if fmt.list_digest:
        if message.list_digest is None or len(message.list_digest) != DIGEST_SIZE:
            msg = "Node aggregate is missing its list digest"
            raise ValueError(msg)
        parts.append(message.list_digest)
    return b"".join(parts)


def encode_node_aggregate(message: AggregatedMaskMsg, fmt: WireFormat) -> bytes:
    return node_aggregate_signing_bytes(message, fmt) + _signature(
        message.sigma, fmt, "Node aggregate"
    )


def decode_node_aggregate(body: bytes, fmt: WireFormat) -> AggregatedMaskMsg:
    reader = _Reader(body, "node aggregate")
    t = reader.u32()
    list_len = reader.u32()
    a = reader.vector(fmt.d)
    lane = int.from_bytes(reader.take(LANE_SIZE), "little") if fmt.integrity else None
    digest = reader.take(DIGEST_SIZE) if fmt.list_digest else None
    sigma = _read_signature(reader, fmt)
    reader.done()
    return AggregatedMaskMsg(
        t=t, list_len=list_len, a=a, r_lane_sum=lane, list_digest=digest, sigma=sigma
    )


##############################
# ROUND RESULTS              #
##############################


def round_result_signing_bytes(message: RoundResult, fmt: WireFormat) -> bytes:
    parts = [
        _u32(message.t),
        _u32(message.contributor_count),
        _vector(message.w_t, fmt.d, "Round result"),
    ]
    if fmt.integrity:
        if message.proof is None:
            # aborted rounds carry no proof
            parts.append(AggregationProof(IDENTITY, message.t).to_bytes())
        else:
            parts.append(message.proof.to_bytes())
    return b"".join(parts)


def encode_round_result(message: RoundResult, fmt: WireFormat) -> bytes:
    return round_result_signing_bytes(message, fmt) + _signature(
        message.sigma, fmt, "Round result"
    )


def decode_round_result(body: bytes, fmt: WireFormat) -> RoundResult:
    reader = _Reader(body, "round result")
    t = reader.u32()
    count = reader.u32()
    w_t = reader.vector(fmt.d)
    proof = None
    if fmt.integrity:
        point = reader.point()
        proof = AggregationProof(point, t) if count else None
    sigma = _read_signature(reader, fmt)
    reader.done()
    return RoundResult(t=t, w_t=w_t, contributor_count=count, proof=proof, sigma=sigma)


##############################
# RECONCILIATION / RECOVERY  #
##############################


def encode_reconcile_request(message: ReconcileRequest, fmt: WireFormat) -> bytes:
    parts = [_u32(message.t), _u32(len(message.participations))]
    for user, participation in message.participations:
        parts.append(_u32(user))
        parts.append(encode_participation(participation, fmt))
    return b"".join(parts)


def decode_reconcile_request(body: bytes, fmt: WireFormat) -> ReconcileRequest:
    reader = _Reader(body, "reconcile request")
    t = reader.u32()
    count = reader.u32()
    entries = []
    for _ in range(count):
        user = reader.u32()
        inner = reader.take(fmt.participation_size())
        entries.append((user, decode_participation(inner, fmt)))
    reader.done()
    return ReconcileRequest(t=t, participations=tuple(entries))


def encode_recovery_share(message: RecoveryShare) -> bytes:
    return (
        _u32(message.dropped_node)
        + _u32(message.share_index)
        + message.value.to_bytes(LANE_SIZE, "little")
    )


def decode_recovery_share(body: bytes) -> RecoveryShare:
    reader = _Reader(body, "recovery share")
    dropped = reader.u32()
    index = reader.u32()
    value = int.from_bytes(reader.take(LANE_SIZE), "little")
    reader.done()
    return RecoveryShare(dropped_node=dropped, share_index=index, value=value)


##############################
# DISPATCH                   #
##############################


def encode_message(
    message: Message, sender: Role, fmt: WireFormat
) -> tuple[MessageType, bytes]:
    if isinstance(message, KeyAnnounce):
        return MessageType.KEY_ANNOUNCE, encode_key_announce(message, sender, fmt)
    if isinstance(message, SecretCiphertext):
        return MessageType.RHO_CIPHERTEXT, encode_secret_ciphertext(message)
    if isinstance(message, ParticipationMsg):
        return MessageType.PARTICIPATION, encode_participation(message, fmt)
    if isinstance(message, MaskedUpdate):
        return MessageType.MASKED_UPDATE, encode_masked_update(message, fmt)
    if isinstance(message, AggregatedMaskMsg):
        return MessageType.NODE_AGGREGATE, encode_node_aggregate(message, fmt)
    if isinstance(message, RoundResult):
        return MessageType.ROUND_RESULT, encode_round_result(message, fmt)
    if isinstance(message, ReconcileRequest):
        return MessageType.RECONCILE_REQUEST, encode_reconcile_request(message, fmt)
    if isinstance(message, RecoveryShare):
        return MessageType.RECOVERY_SHARE, encode_recovery_share(message)
    msg = f"Cannot encode {type(message).__name__}"
    raise TypeError(msg)


def decode_message(frame: Frame, fmt: WireFormat) -> Message:
    body = frame.body
    match frame.msg_type:
        case MessageType.KEY_ANNOUNCE:
            return decode_key_announce(body, frame.sender.role, fmt)
        case MessageType.RHO_CIPHERTEXT:
            return decode_secret_ciphertext(body)
        case MessageType.PARTICIPATION:
            return decode_participation(body, fmt)
        case MessageType.MASKED_UPDATE:
            return decode_masked_update(body, fmt)
        case MessageType.NODE_AGGREGATE:
            return decode_node_aggregate(body, fmt)
        case MessageType.ROUND_RESULT:
            return decode_round_result(body, fmt)
        case MessageType.RECONCILE_REQUEST:
            return decode_reconcile_request(body, fmt)
        case MessageType.RECOVERY_SHARE:
            return decode_recovery_share(body)
    msg = f"Unknown message type {frame.msg_type}"
    raise MalformedFrame(msg)


##############################
# FRAMING                    #
##############################


@dataclass(frozen=True)
class Frame:
    msg_type: MessageType
    sender: PartyId
    body: bytes

    @property
    def length(self) -> int:
        return len(self.body) + HEADER_SIZE

    def to_bytes(self) -> bytes:
        return (
            struct.pack(
                "<IBBI",
                self.length,
                self.msg_type,
                self.sender.role,
                self.sender.index,
            )
            + self.body
        )


def _read_exact(stream: ReadableStream, n: int, *, at_boundary: bool) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            if at_boundary and not buf:
                msg = "Peer closed the connection"
                raise ConnectionClosed(msg)
            msg = f"Stream ended after {len(buf)} of {n} bytes"
            raise MalformedFrame(msg)
        buf += chunk
    return bytes(buf)


def frame_read(stream: ReadableStream, max_size: int = DEFAULT_MAX_FRAME) -> Frame:
    (length,) = struct.unpack("<I", _read_exact(stream, 4, at_boundary=True))
    if length < HEADER_SIZE:
        msg = f"Declared frame length {length} is shorter than the header"
        raise MalformedFrame(msg)
    if length > max_size:
        msg = f"Declared frame length {length} exceeds the limit of {max_size}"
        raise FrameTooLarge(msg)
    payload = _read_exact(stream, length, at_boundary=False)
    msg_type, role, index = struct.unpack("<BBI", payload[:HEADER_SIZE])
    try:
        sender = PartyId(Role(role), index)
        kind = MessageType(msg_type)
    except ValueError as exc:
        msg = f"Unknown message type {msg_type} or role {role}"
        raise MalformedFrame(msg) from exc
    return Frame(msg_type=kind, sender=sender, body=payload[HEADER_SIZE:])


def frame_write(stream: WritableStream, frame: Frame) -> None:
    stream.write(frame.to_bytes())
    stream.flush()


##############################
# IN-PROCESS TRANSPORT       #
##############################


class Endpoint:
    """A party's handle on a transport; counts outbound body bytes per phase."""

    def __init__(
        self, party: PartyId, deliver: Callable[[PartyId, Frame], None]
    ) -> None:
        self.party = party
        self.phase = "setup"
        self.outbound: Counter[str] = Counter()
        self._deliver = deliver

    def send(self, dest: PartyId, msg_type: MessageType, body: bytes) -> None:
        self.forward(dest, Frame(msg_type, self.party, body))

    def forward(self, dest: PartyId, frame: Frame) -> None:
        """Send ``frame`` unchanged; a relay keeps the original sender field."""
        self.outbound[self.phase] += len(frame.body)
        self._deliver(dest, frame)


class InProcessNetwork:
    """Lossless per-link FIFO queues with a seeded delivery scheduler.

    ``drop`` decides, per sent frame, whether the frame is lost; ``delay``
    decides whether it is held back until :meth:`release_delayed`. Both receive
    ``(sender, destination, frame)``. Bytes are metered when sent, whether or
    not the frame arrives.
    """

    def __init__(
        self,
        seed: int = 0,
        drop: LinkPolicy | None = None,
        delay: LinkPolicy | None = None,
    ) -> None:
        self._rng = random.Random(seed)
        self._drop = drop
        self._delay = delay
        self._handlers: dict[PartyId, FrameHandler] = {}
        self._links: dict[tuple[PartyId, PartyId], deque[Frame]] = {}
        self._held: list[tuple[PartyId, Frame]] = []
        self.delivered = 0

    def register(self, party: PartyId, handler: FrameHandler) -> Endpoint:
        self._handlers[party] = handler
        return Endpoint(party, lambda dest, frame: self._enqueue(party, dest, frame))

    def unregister(self, party: PartyId) -> None:
        self._handlers.pop(party, None)

    def _enqueue(self, src: PartyId, dest: PartyId, frame: Frame) -> None:
        if self._drop is not None and self._drop(src, dest, frame):
            logger.debug("dropped %s frame %s -> %s", frame.msg_type.name, src, dest)
            return
        if self._delay is not None and self._delay(src, dest, frame):
            self._held.append((dest, frame))
            return
        self._links.setdefault((src, dest), deque()).append(frame)

    def release_delayed(self) -> None:
        held, self._held = self._held, []
        for dest, frame in held:
            self._links.setdefault((frame.sender, dest), deque()).append(frame)

    def run(self) -> int:
        """Deliver frames until every queue is empty; returns the count delivered."""
        count = 0
        while True:
            busy = sorted(link for link, frames in self._links.items() if frames)
            if not busy:
                return count
            src, dest = self._rng.choice(busy)
            frame = self._links[(src, dest)].popleft()
            handler = self._handlers.get(dest)
            if handler is None:
                logger.debug("no handler for %s; discarding frame", dest)
                continue
            handler(frame)
            count += 1
            self.delivered += 1


##############################
# TCP TRANSPORT              #
##############################


class _Connection:
    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.reader = sock.makefile("rb")
        self.writer = sock.makefile("wb")
        self.lock = threading.Lock()

    def write(self, frame: Frame) -> None:
        with self.lock:
            frame_write(self.writer, frame)

    def close(self) -> None:
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        for closable in (self.reader, self.writer, self.sock):
            try:
                closable.close()
            except OSError:
                pass


class TcpHub:
    """Server side of the star topology.

    Each accepted peer gets a handler thread that pushes inbound frames onto
    :attr:`inbox`. A peer is identified by the sender field of its first frame.
    Frames for peers that have not connected yet are queued until they do.
    """

    def __init__(
        self, host: str, port: int, max_frame: int = DEFAULT_MAX_FRAME
    ) -> None:
        self._server = socket.create_server((host, port))
        self.address: tuple[str, int] = self._server.getsockname()[:2]
        self.max_frame = max_frame
        self.inbox: queue.Queue[Frame] = queue.Queue()
        self._peers: dict[PartyId, _Connection] = {}
        self._pending: dict[PartyId, list[Frame]] = {}
        self._lock = threading.Lock()
        self._closed = threading.Event()
        self._acceptor = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self) -> None:
        self._acceptor.start()

    @property
    def peers(self) -> set[PartyId]:
        with self._lock:
            return set(self._peers)

    def _accept_loop(self) -> None:
        while not self._closed.is_set():
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            conn = _Connection(sock)
            threading.Thread(target=self._serve, args=(conn,), daemon=True).start()

    def _serve(self, conn: _Connection) -> None:
        party = None
        try:
            while True:
                frame = frame_read(conn.reader, self.max_frame)
                if party is None:
                    party = frame.sender
                    self._attach(party, conn)
                self.inbox.put(frame)
        except ConnectionClosed:
            logger.debug("peer %s disconnected", party)
        except (MalformedFrame, FrameTooLarge, OSError) as exc:
            logger.warning("dropping connection to %s: %s", party, exc)
        finally:
            if party is not None:
                with self._lock:
                    if self._peers.get(party) is conn:
                        del self._peers[party]
            conn.close()

    def _attach(self, party: PartyId, conn: _Connection) -> None:
        with self._lock:
            self._peers[party] = conn
            # queued frames go out before anything sent after the attach
            for frame in self._pending.pop(party, []):
                conn.write(frame)

    def send(self, dest: PartyId, frame: Frame) -> None:
        with self._lock:
            conn = self._peers.get(dest)
            if conn is None:
                self._pending.setdefault(dest, []).append(frame)
                return
        try:
            conn.write(frame)
        except (OSError, ValueError) as exc:
            logger.warning("write to %s failed: %s", dest, exc)

    def endpoint(self, party: PartyId) -> Endpoint:
        return Endpoint(party, self.send)

    def close(self) -> None:
        self._closed.set()
        self._server.close()
        with self._lock:
            peers = list(self._peers.values())
            self._peers.clear()
        for conn in peers:
            conn.close()


class TcpLink:
    """Client side of the star topology: every frame goes to the hub."""

    def __init__(
        self, host: str, port: int, max_frame: int = DEFAULT_MAX_FRAME
    ) -> None:
        self._conn = _Connection(socket.create_connection((host, port)))
        self.max_frame = max_frame
        self.inbox: queue.Queue[Frame | None] = queue.Queue()
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self) -> None:
        try:
            while True:
                self.inbox.put(frame_read(self._conn.reader, self.max_frame))
        except ConnectionClosed:
            pass
        except (MalformedFrame, FrameTooLarge, OSError) as exc:
            logger.warning("hub connection failed: %s", exc)
        finally:
            self.inbox.put(None)

    def endpoint(self, party: PartyId) -> Endpoint:
        return Endpoint(party, lambda _dest, frame: self._conn.write(frame))

    def close(self) -> None:
        self._conn.close()
