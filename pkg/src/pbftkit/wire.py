"""Protocol messages and the binary wire format.

Every message travels as a length-prefixed frame:

    [u32 frame_len][u8 kind][u64 view][u64 seq][u16 sender]
    [u32 payload_len][payload bytes]
    [u16 auth_count][per auth: u16 recipient, u16 auth_len, auth bytes]

All integers are little-endian. ``frame_len`` counts every byte after
itself. The payload is a kind-specific body; bodies are defined below and
encoded/decoded independently of the envelope so the envelope can treat
them as opaque bytes (digests and authenticators cover the envelope head
plus payload, never the auths themselves).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from enum import IntEnum

MAX_PAYLOAD = 1 << 20  # 1 MiB application payload bound
MAX_FRAME = 2 << 20  # 2 MiB whole-frame bound

_HEAD = struct.Struct("<BQQHI")  # kind, view, seq, sender, payload_len


class WireError(Exception):
    """Base class for codec failures."""


class EncodeTooLarge(WireError):
    pass


class Incomplete(WireError):
    """Frame or field is truncated."""


class UnknownKind(WireError):
    pass


class Malformed(WireError):
    """Declared lengths inconsistent with the bytes present."""


class FrameTooLarge(WireError):
    """Length prefix exceeds the frame bound; connection must be dropped."""


class MessageKind(IntEnum):
    REQUEST = 0
    PRE_PREPARE = 1
    PREPARE = 2
    COMMIT = 3
    REPLY = 4
    CHECKPOINT = 5
    VIEW_CHANGE = 6
    NEW_VIEW = 7


@dataclass(frozen=True)
class WireEnvelope:
    kind: MessageKind
    view: int
    seq: int
    sender: int
    payload: bytes = b""
    auths: tuple = ()  # ((recipient, auth_bytes), ...)

    def signing_bytes(self) -> bytes:
        """Bytes covered by digests/authenticators: head + payload, no auths."""
        cached = self.__dict__.get("_sbytes")
        if cached is None:
            cached = _HEAD.pack(self.kind, self.view, self.seq, self.sender,
                                len(self.payload)) + self.payload
            object.__setattr__(self, "_sbytes", cached)
        return cached

    def with_auths(self, auths) -> "WireEnvelope":
        env = WireEnvelope(self.kind, self.view, self.seq, self.sender,
                           self.payload, tuple(auths))
        cached = self.__dict__.get("_sbytes")
        if cached is not None:  # auths are outside the signed region
            object.__setattr__(env, "_sbytes", cached)
        return env


def encode(env: WireEnvelope) -> bytes:
    if len(env.payload) > MAX_PAYLOAD:
        raise EncodeTooLarge(f"payload {len(env.payload)} > {MAX_PAYLOAD}")
    parts = [env.signing_bytes(), struct.pack("<H", len(env.auths))]
    for recipient, auth in env.auths:
        parts.append(struct.pack("<HH", recipient, len(auth)))
        parts.append(auth)
    body = b"".join(parts)
    if 4 + len(body) > MAX_FRAME:
        raise EncodeTooLarge(f"frame {4 + len(body)} > {MAX_FRAME}")
    return struct.pack("<I", len(body)) + body


def decode(buf: bytes) -> WireEnvelope:
    """Decode one complete frame. Raises a typed WireError, never crashes."""
    if len(buf) < 4:
        raise Incomplete("missing length prefix")
    (frame_len,) = struct.unpack_from("<I", buf)
    if frame_len > MAX_FRAME - 4:
        raise FrameTooLarge(str(frame_len))
    if len(buf) != 4 + frame_len:
        raise Incomplete(f"have {len(buf) - 4} of {frame_len} frame bytes")
    if frame_len < _HEAD.size + 2:
        raise Malformed("frame shorter than fixed header")
    kind_b, view, seq, sender, payload_len = _HEAD.unpack_from(buf, 4)
    try:
        kind = MessageKind(kind_b)
    except ValueError:
        raise UnknownKind(f"kind byte {kind_b:#x}") from None
    off = 4 + _HEAD.size
    if payload_len > frame_len - _HEAD.size - 2:
        raise Malformed("payload_len exceeds frame")
    payload = buf[off:off + payload_len]
    off += payload_len
    (auth_count,) = struct.unpack_from("<H", buf, off)
    off += 2
    auths = []
    for _ in range(auth_count):
        if off + 4 > len(buf):
            raise Malformed("truncated auth entry")
        recipient, auth_len = struct.unpack_from("<HH", buf, off)
        off += 4
        if off + auth_len > len(buf):
            raise Malformed("auth bytes exceed frame")
        auths.append((recipient, buf[off:off + auth_len]))
        off += auth_len
    if off != len(buf):
        raise Malformed(f"{len(buf) - off} trailing bytes")
    env = WireEnvelope(kind, view, seq, sender, payload, tuple(auths))
    # The signed region is a straight slice of the frame; seed the cache so
    # digest checks on received traffic skip re-encoding the head.
    object.__setattr__(env, "_sbytes",
                       bytes(buf[4:4 + _HEAD.size + payload_len]))
    return env


class FrameBuffer:
    """Per-connection reassembly of length-prefixed frames from a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes):
        """Append stream bytes; yield every complete frame (prefix included)."""
        self._buf += data
        frames = []
        while True:
            if len(self._buf) < 4:
                break
            (frame_len,) = struct.unpack_from("<I", self._buf)
            if frame_len > MAX_FRAME - 4:
                raise FrameTooLarge(str(frame_len))
            if len(self._buf) < 4 + frame_len:
                break
            frames.append(bytes(self._buf[:4 + frame_len]))
            del self._buf[:4 + frame_len]
        return frames


# ---------------------------------------------------------------------------
# Kind-specific bodies.


@dataclass(frozen=True)
class Request:
    """A client operation: an opaque BLOB plus its identity.

    ``signature`` is the client's PK signature over the canonical REQUEST
    envelope head (see :func:`request_envelope`); it rides inside batches so
    followers can re-check authenticity of every batched request.
    """

    client_id: int
    request_id: int
    payload: bytes
    signature: bytes = b""

    def canonical_bytes(self) -> bytes:
        """Identity + payload, excluding the signature; what digests cover."""
        return struct.pack("<HQ", self.client_id, self.request_id) + self.payload


def request_envelope(req: Request) -> WireEnvelope:
    """The canonical envelope a client signs and sends (view/seq fixed at 0)."""
    auths = ((0, req.signature),) if req.signature else ()
    return WireEnvelope(MessageKind.REQUEST, 0, 0, req.client_id,
                        req.canonical_bytes(), auths)


def request_from_envelope(env: WireEnvelope) -> Request:
    if env.kind != MessageKind.REQUEST:
        raise Malformed(f"not a REQUEST: {env.kind!r}")
    if len(env.payload) < 10:
        raise Malformed("REQUEST payload shorter than its header")
    client_id, request_id = struct.unpack_from("<HQ", env.payload)
    sig = env.auths[0][1] if env.auths else b""
    return Request(client_id, request_id, env.payload[10:], sig)


def _pack_bytes(b: bytes) -> bytes:
    return struct.pack("<I", len(b)) + b


def _unpack_bytes(buf: bytes, off: int):
    if off + 4 > len(buf):
        raise Malformed("truncated length field")
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    if off + n > len(buf):
        raise Malformed("length field exceeds buffer")
    return buf[off:off + n], off + n


def _encode_request_item(req: Request) -> bytes:
    return (_pack_bytes(req.canonical_bytes())
            + struct.pack("<H", len(req.signature)) + req.signature)


def _decode_request_item(buf: bytes, off: int):
    canon, off = _unpack_bytes(buf, off)
    if len(canon) < 10:
        raise Malformed("request item shorter than its header")
    if off + 2 > len(buf):
        raise Malformed("truncated signature length")
    (sig_len,) = struct.unpack_from("<H", buf, off)
    off += 2
    if off + sig_len > len(buf):
        raise Malformed("signature exceeds buffer")
    client_id, request_id = struct.unpack_from("<HQ", canon)
    return Request(client_id, request_id, canon[10:],
                   bytes(buf[off:off + sig_len])), off + sig_len


def batch_digest(batch) -> bytes:
    """SHA-256 over the concatenated canonical request encodings.

    Covers client_id/request_id, not just raw payloads, so a request cannot
    be replayed under another client's identity. The empty batch is the
    NOOP filler used in new-view gap entries.
    """
    h = hashlib.sha256()
    for req in batch:
        h.update(req.canonical_bytes())
    return h.digest()


@dataclass(frozen=True)
class PrePrepareBody:
    batch: tuple  # tuple[Request, ...]; empty only for the NOOP filler
    digest: bytes

    def encode(self) -> bytes:
        parts = [struct.pack("<I", len(self.batch))]
        parts += [_encode_request_item(r) for r in self.batch]
        parts.append(self.digest)
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "PrePrepareBody":
        if len(buf) < 4:
            raise Malformed("truncated batch count")
        (count,) = struct.unpack_from("<I", buf)
        off = 4
        batch = []
        for _ in range(count):
            req, off = _decode_request_item(buf, off)
            batch.append(req)
        if len(buf) - off != 32:
            raise Malformed("batch digest missing or trailing bytes")
        return cls(tuple(batch), bytes(buf[off:off + 32]))

    @classmethod
    def for_batch(cls, batch) -> "PrePrepareBody":
        return cls(tuple(batch), batch_digest(batch))


NOOP_BODY_DIGEST = batch_digest(())


@dataclass(frozen=True)
class ReplyBody:
    client_id: int
    request_id: int
    seq: int
    result_digest: bytes  # digest of the committed request's canonical bytes

    _S = struct.Struct("<HQQ32s")

    def encode(self) -> bytes:
        return self._S.pack(self.client_id, self.request_id, self.seq,
                            self.result_digest)

    @classmethod
    def decode(cls, buf: bytes) -> "ReplyBody":
        if len(buf) != cls._S.size:
            raise Malformed("bad REPLY body length")
        return cls(*cls._S.unpack(buf))


@dataclass(frozen=True)
class Certificate:
    """A quorum of matching messages for one (view, seq, digest) triple.

    Votes are full envelope frames (auths included) so embedded certificates
    inside VIEW_CHANGE messages stay independently verifiable.
    """

    view: int
    seq: int
    digest: bytes
    votes: tuple = ()  # ((sender, frame_bytes), ...)

    def senders(self):
        return {s for s, _ in self.votes}

    def encode(self) -> bytes:
        parts = [struct.pack("<QQ32sH", self.view, self.seq, self.digest,
                             len(self.votes))]
        for sender, frame in self.votes:
            parts.append(struct.pack("<H", sender))
            parts.append(_pack_bytes(frame))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes, off: int = 0):
        if off + 50 > len(buf):
            raise Malformed("truncated certificate header")
        view, seq, digest, count = struct.unpack_from("<QQ32sH", buf, off)
        off += 50
        votes = []
        for _ in range(count):
            if off + 2 > len(buf):
                raise Malformed("truncated vote sender")
            (sender,) = struct.unpack_from("<H", buf, off)
            frame, off2 = _unpack_bytes(buf, off + 2)
            votes.append((sender, bytes(frame)))
            off = off2
        return cls(view, seq, bytes(digest), tuple(votes)), off


@dataclass(frozen=True)
class ViewChangeBody:
    new_view: int
    last_stable_seq: int
    checkpoint_proof: Certificate  # empty votes tuple at the genesis checkpoint
    prepared_set: tuple  # ((seq, view, digest, prepare Certificate), ...)

    def encode(self) -> bytes:
        parts = [struct.pack("<QQ", self.new_view, self.last_stable_seq),
                 self.checkpoint_proof.encode(),
                 struct.pack("<I", len(self.prepared_set))]
        for seq, view, digest, cert in self.prepared_set:
            parts.append(struct.pack("<QQ32s", seq, view, digest))
            parts.append(cert.encode())
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "ViewChangeBody":
        if len(buf) < 16:
            raise Malformed("truncated view-change header")
        new_view, last_stable = struct.unpack_from("<QQ", buf)
        proof, off = Certificate.decode(buf, 16)
        if off + 4 > len(buf):
            raise Malformed("truncated prepared-set count")
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        prepared = []
        for _ in range(count):
            if off + 48 > len(buf):
                raise Malformed("truncated prepared entry")
            seq, view, digest = struct.unpack_from("<QQ32s", buf, off)
            cert, off = Certificate.decode(buf, off + 48)
            prepared.append((seq, view, bytes(digest), cert))
        if off != len(buf):
            raise Malformed("trailing bytes after prepared set")
        return cls(new_view, last_stable, proof, tuple(prepared))


@dataclass(frozen=True)
class NewViewBody:
    view: int
    view_change_proof: tuple  # frame bytes of 2f+1 VIEW_CHANGE envelopes
    reproposals: tuple  # ((seq, PrePrepareBody), ...) -- the set O, seq order

    def encode(self) -> bytes:
        parts = [struct.pack("<QH", self.view, len(self.view_change_proof))]
        for frame in self.view_change_proof:
            parts.append(_pack_bytes(frame))
        parts.append(struct.pack("<I", len(self.reproposals)))
        for seq, body in self.reproposals:
            parts.append(struct.pack("<Q", seq))
            parts.append(_pack_bytes(body.encode()))
        return b"".join(parts)

    @classmethod
    def decode(cls, buf: bytes) -> "NewViewBody":
        if len(buf) < 10:
            raise Malformed("truncated new-view header")
        view, vc_count = struct.unpack_from("<QH", buf)
        off = 10
        proof = []
        for _ in range(vc_count):
            frame, off = _unpack_bytes(buf, off)
            proof.append(bytes(frame))
        if off + 4 > len(buf):
            raise Malformed("truncated reproposal count")
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        repro = []
        for _ in range(count):
            if off + 8 > len(buf):
                raise Malformed("truncated reproposal seq")
            (seq,) = struct.unpack_from("<Q", buf, off)
            body_bytes, off = _unpack_bytes(buf, off + 8)
            repro.append((seq, PrePrepareBody.decode(body_bytes)))
        if off != len(buf):
            raise Malformed("trailing bytes after reproposals")
        return cls(view, tuple(proof), tuple(repro))
