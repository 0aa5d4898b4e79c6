"""Codec: golden frames, round trips, fuzz, and framing."""

import struct

import pytest
from hypothesis import given, settings, strategies as st

from pbftkit import wire
from pbftkit.wire import (FrameBuffer, MessageKind, PrePrepareBody, ReplyBody,
                          Request, WireEnvelope, batch_digest, decode, encode,
                          request_envelope)

GOLDEN_REQUEST_EMPTY = bytes.fromhex(
    "23000000"                              # frame length 35
    "00" "0000000000000000" "0000000000000000"  # kind, view, seq
    "0700" "0a000000"                       # sender 7, payload length 10
    "07000100000000000000"                  # canonical request bytes
    "0000")                                 # zero authenticators

GOLDEN_PREPARE = bytes.fromhex(
    "810000000203000000000000002a00000000000000020020000000"
    "aaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaaa"
    "0200"
    "010020000101010101010101010101010101010101010101010101010101010101010101"
    "030020000202020202020202020202020202020202020202020202020202020202020202")


class TestGoldenFrames:
    def test_empty_request_frame_bytes(self):
        env = request_envelope(Request(7, 1, b""))
        assert encode(env) == GOLDEN_REQUEST_EMPTY

    def test_empty_request_lengths(self):
        frame = GOLDEN_REQUEST_EMPTY
        (frame_len,) = struct.unpack_from("<I", frame)
        assert frame_len == 35
        (payload_len,) = struct.unpack_from("<I", frame, 23)
        assert payload_len == 10

    def test_prepare_frame_bytes(self):
        env = WireEnvelope(MessageKind.PREPARE, 3, 42, 2, b"\xaa" * 32,
                           auths=((1, b"\x01" * 32), (3, b"\x02" * 32)))
        assert encode(env) == GOLDEN_PREPARE

    def test_sender_occupies_bytes_21_to_23(self):
        a = encode(WireEnvelope(MessageKind.COMMIT, 1, 2, 0x1234, b""))
        b = encode(WireEnvelope(MessageKind.COMMIT, 1, 2, 0x56F8, b""))
        diff = [i for i in range(len(a)) if a[i] != b[i]]
        assert diff == [21, 22]
        assert a[21:23] == struct.pack("<H", 0x1234)

    def test_golden_decodes_back(self):
        env = decode(GOLDEN_PREPARE)
        assert env.kind == MessageKind.PREPARE
        assert (env.view, env.seq, env.sender) == (3, 42, 2)
        assert env.payload == b"\xaa" * 32
        assert env.auths == ((1, b"\x01" * 32), (3, b"\x02" * 32))


envelopes = st.builds(
    WireEnvelope,
    kind=st.sampled_from(list(MessageKind)),
    view=st.integers(0, 2**64 - 1),
    seq=st.integers(0, 2**64 - 1),
    sender=st.integers(0, 2**16 - 1),
    payload=st.binary(max_size=512),
    auths=st.lists(st.tuples(st.integers(0, 2**16 - 1),
                             st.binary(max_size=300)),
                   max_size=4).map(tuple))


class TestRoundTrip:
    @settings(max_examples=500, deadline=None)
    @given(envelopes)
    def test_encode_decode_identity(self, env):
        assert decode(encode(env)) == env

    @settings(max_examples=200, deadline=None)
    @given(envelopes)
    def test_signing_bytes_exclude_auths(self, env):
        assert env.signing_bytes() == env.with_auths(()).signing_bytes()

    def test_payload_too_large_rejected(self):
        env = WireEnvelope(MessageKind.REQUEST, 0, 0, 0,
                           b"x" * (wire.MAX_PAYLOAD + 1))
        with pytest.raises(wire.EncodeTooLarge):
            encode(env)


class TestDecodeFuzz:
    def test_random_bytes_never_crash(self):
        import random
        rng = random.Random(1337)
        crashes = 0
        decoded = 0
        for _ in range(10_000):
            blob = rng.randbytes(rng.randrange(0, 80))
            try:
                decode(blob)
                decoded += 1
            except wire.WireError:
                pass
            except Exception:
                crashes += 1
        assert crashes == 0

    def test_mutated_valid_frames_never_crash(self):
        import random
        rng = random.Random(7)
        base = bytearray(GOLDEN_PREPARE)
        for _ in range(10_000):
            blob = bytearray(base)
            for _ in range(rng.randrange(1, 4)):
                blob[rng.randrange(len(blob))] = rng.randrange(256)
            try:
                decode(bytes(blob))
            except wire.WireError:
                pass

    def test_unknown_kind(self):
        blob = bytearray(GOLDEN_PREPARE)
        blob[4] = 99
        with pytest.raises(wire.UnknownKind):
            decode(bytes(blob))

    def test_truncated(self):
        with pytest.raises(wire.Incomplete):
            decode(GOLDEN_PREPARE[:10])

    def test_oversized_frame_header(self):
        blob = struct.pack("<I", wire.MAX_FRAME) + b"\x00" * 16
        with pytest.raises(wire.FrameTooLarge):
            decode(blob)


class TestFrameBuffer:
    def test_reassembles_split_stream(self):
        frames = [encode(WireEnvelope(MessageKind.COMMIT, 0, s, 1, b"x" * s))
                  for s in range(5)]
        stream = b"".join(frames)
        buf = FrameBuffer()
        got = []
        for i in range(0, len(stream), 3):
            got.extend(buf.feed(stream[i:i + 3]))
        assert got == frames

    def test_single_feed(self):
        f = encode(WireEnvelope(MessageKind.REPLY, 1, 2, 3, b"abc"))
        assert FrameBuffer().feed(f + f) == [f, f]

    def test_rejects_oversized(self):
        buf = FrameBuffer()
        with pytest.raises(wire.FrameTooLarge):
            buf.feed(struct.pack("<I", wire.MAX_FRAME + 1))


class TestBodies:
    def test_request_canonical_bytes(self):
        assert Request(5, 9, b"hello").canonical_bytes() == bytes.fromhex(
            "0500090000000000000068656c6c6f")

    def test_batch_digest_golden(self):
        assert batch_digest((Request(5, 9, b"hello"),)).hex() == (
            "31a5bf26093d523a187632b2b95027e6085b457e63472d3090d536d37ab7741c")

    def test_batch_digest_order_sensitive(self):
        a, b = Request(1, 1, b"a"), Request(2, 2, b"b")
        assert batch_digest((a, b)) != batch_digest((b, a))

    def test_pre_prepare_round_trip(self):
        reqs = (Request(5, 9, b"hello", b"s" * 16), Request(6, 1, b""))
        body = PrePrepareBody.for_batch(reqs)
        back = PrePrepareBody.decode(body.encode())
        assert back.batch == reqs
        assert back.digest == body.digest

    def test_reply_round_trip(self):
        rb = ReplyBody(5, 9, 4, bytes(range(32)))
        assert ReplyBody.decode(rb.encode()) == rb

    def test_reply_golden(self):
        assert ReplyBody(5, 9, 4, bytes(range(32))).encode().hex() == (
            "05000900000000000000040000000000000000010203040506070809"
            "0a0b0c0d0e0f101112131415161718191a1b1c1d1e1f")
