"""Digests, signatures, MACs, and the mode-dependent authentication policy.

Three deployment modes trade signature cost for trust assumptions:

* ``PK_ONLY``        -- RSA-2048 signatures on every message.
* ``MAC_INTER_NODE`` -- pairwise HMACs between nodes, PK elsewhere.
* ``DOMAIN_OPTIMIZED`` -- HMACs on replies too; PK only on client requests,
  view changes, and periodic checkpoint block signatures.

Client requests are PK-signed in every mode (a MAC-only request channel
lets a malicious client show different-looking requests to different
replicas). MACs are HMAC-SHA-256 over 256-bit pairwise secrets; the signer
and MAC backends sit behind small wrappers so either primitive can be
swapped without touching callers.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import os
import struct
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.exceptions import InvalidSignature

from .wire import MessageKind, WireEnvelope

MAC_TAG_LEN = 32
MAC_KEY_LEN = 32
RSA_BITS = 2048


class CryptoError(Exception):
    pass


class KeyMissing(CryptoError):
    pass


class CryptoMode(Enum):
    PK_ONLY = "pk_only"
    MAC_INTER_NODE = "mac_inter_node"
    DOMAIN_OPTIMIZED = "domain_optimized"


class MessageClass(Enum):
    CLIENT_REQUEST = "client_request"
    INTER_NODE = "inter_node"
    CLIENT_REPLY = "client_reply"
    VIEW_CHANGE_CLASS = "view_change"
    CHECKPOINT_BLOCK_SIG = "checkpoint_block_sig"


class AuthScheme(Enum):
    PK = "pk"
    MAC = "mac"
    NONE = "none"


_POLICY = {
    CryptoMode.PK_ONLY: {
        MessageClass.CLIENT_REQUEST: AuthScheme.PK,
        MessageClass.INTER_NODE: AuthScheme.PK,
        MessageClass.CLIENT_REPLY: AuthScheme.PK,
        MessageClass.VIEW_CHANGE_CLASS: AuthScheme.PK,
        MessageClass.CHECKPOINT_BLOCK_SIG: AuthScheme.NONE,
    },
    CryptoMode.MAC_INTER_NODE: {
        MessageClass.CLIENT_REQUEST: AuthScheme.PK,
        MessageClass.INTER_NODE: AuthScheme.MAC,
        MessageClass.CLIENT_REPLY: AuthScheme.PK,
        MessageClass.VIEW_CHANGE_CLASS: AuthScheme.PK,
        MessageClass.CHECKPOINT_BLOCK_SIG: AuthScheme.NONE,
    },
    CryptoMode.DOMAIN_OPTIMIZED: {
        MessageClass.CLIENT_REQUEST: AuthScheme.PK,
        MessageClass.INTER_NODE: AuthScheme.MAC,
        MessageClass.CLIENT_REPLY: AuthScheme.MAC,
        MessageClass.VIEW_CHANGE_CLASS: AuthScheme.PK,
        MessageClass.CHECKPOINT_BLOCK_SIG: AuthScheme.PK,
    },
}

_KIND_CLASS = {
    MessageKind.REQUEST: MessageClass.CLIENT_REQUEST,
    MessageKind.PRE_PREPARE: MessageClass.INTER_NODE,
    MessageKind.PREPARE: MessageClass.INTER_NODE,
    MessageKind.COMMIT: MessageClass.INTER_NODE,
    MessageKind.CHECKPOINT: MessageClass.INTER_NODE,
    MessageKind.REPLY: MessageClass.CLIENT_REPLY,
    MessageKind.VIEW_CHANGE: MessageClass.VIEW_CHANGE_CLASS,
    MessageKind.NEW_VIEW: MessageClass.VIEW_CHANGE_CLASS,
}


def required_auth(mode: CryptoMode, msg_class: MessageClass) -> AuthScheme:
    """The policy table entry. Total over all 3x5 (mode, class) pairs."""
    return _POLICY[mode][msg_class]


def classify(kind: MessageKind) -> MessageClass:
    return _KIND_CLASS[kind]


def digest(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class Signature:
    value: bytes


@dataclass(frozen=True)
class MacVector:
    tags: tuple  # ((recipient, 32-byte tag), ...), recipients distinct


def _sign_rsa(key, data: bytes) -> bytes:
    # PKCS#1 v1.5 is deterministic, which keeps golden fixtures stable.
    return key.sign(data, padding.PKCS1v15(), hashes.SHA256())


def _verify_rsa(pub, sig: bytes, data: bytes) -> bool:
    try:
        pub.verify(sig, data, padding.PKCS1v15(), hashes.SHA256())
        return True
    except InvalidSignature:
        return False


def pair_key(i: int, j: int):
    """Canonical unordered key for the (i, j) pairwise secret."""
    return (i, j) if i <= j else (j, i)


@dataclass
class KeyStore:
    """One principal's key material.

    Holds its own RSA private key, everyone's verification keys, and the
    pairwise MAC secrets for links involving ``own_id`` only.
    """

    own_id: int
    signing_key: object
    verify_keys: dict = field(default_factory=dict)  # id -> public key
    mac_keys: dict = field(default_factory=dict)  # peer id -> 32-byte secret

    def public_key(self):
        return self.signing_key.public_key()

    def sign(self, data: bytes) -> bytes:
        return _sign_rsa(self.signing_key, data)

    def verify(self, sender: int, sig: bytes, data: bytes) -> bool:
        pub = self.verify_keys.get(sender)
        if pub is None:
            return False
        return _verify_rsa(pub, sig, data)

    def mac(self, peer: int, data: bytes) -> bytes:
        key = self.mac_keys.get(peer)
        if key is None:
            raise KeyMissing(f"no pairwise secret for peer {peer}")
        return _hmac.digest(key, data, "sha256")


def envelope_digest(env: WireEnvelope) -> bytes:
    """SHA-256 over head + payload; excludes the auths and frame length."""
    cached = env.__dict__.get("_sdigest")
    if cached is None:
        cached = digest(env.signing_bytes())
        object.__setattr__(env, "_sdigest", cached)
    return cached


def authenticate(env: WireEnvelope, recipients, mode: CryptoMode,
                 ks: KeyStore):
    """Produce the authenticator the policy demands for this envelope.

    PK schemes yield one signature over the envelope digest regardless of
    recipient count; MAC schemes yield one tag per recipient.
    """
    scheme = required_auth(mode, classify(env.kind))
    d = envelope_digest(env)
    if scheme == AuthScheme.MAC:
        tags = tuple((r, ks.mac(r, d)) for r in recipients)
        return MacVector(tags)
    return Signature(ks.sign(d))


def attach(env: WireEnvelope, auth) -> WireEnvelope:
    if isinstance(auth, Signature):
        return env.with_auths(((0, auth.value),))
    return env.with_auths(auth.tags)


def verify_incoming(env: WireEnvelope, mode: CryptoMode, ks: KeyStore) -> bool:
    """Check the envelope's authenticator. Rejection is a value, never an
    exception, so Byzantine input cannot crash the verify stage."""
    scheme = required_auth(mode, classify(env.kind))
    d = envelope_digest(env)
    if scheme == AuthScheme.MAC:
        for recipient, tag in env.auths:
            if recipient == ks.own_id:
                try:
                    expect = ks.mac(env.sender, d)
                except KeyMissing:
                    return False
                return _hmac.compare_digest(expect, tag)
        return False
    if scheme == AuthScheme.NONE:
        return True
    if len(env.auths) != 1:
        return False
    return ks.verify(env.sender, env.auths[0][1], d)


# ---------------------------------------------------------------------------
# Key generation and on-disk layout.
#
# keys/
#   node_<id>.pem        RSA-2048 private key (PKCS8, unencrypted)
#   node_<id>.pub.pem    matching public key
#   client_<id>.pem / client_<id>.pub.pem
#   pairwise.bin         records of [u16 i][u16 j][32-byte secret], i < j


def generate_keypair():
    return rsa.generate_private_key(public_exponent=65537, key_size=RSA_BITS)


def _write_keypair(outdir: Path, name: str, key):
    (outdir / f"{name}.pem").write_bytes(key.private_bytes(
        serialization.Encoding.PEM, serialization.PrivateFormat.PKCS8,
        serialization.NoEncryption()))
    (outdir / f"{name}.pub.pem").write_bytes(key.public_key().public_bytes(
        serialization.Encoding.PEM, serialization.PublicFormat.SubjectPublicKeyInfo))


def generate_deployment_keys(n: int, clients: int, outdir, force: bool = False):
    """Write a full deployment's keys: node/client RSA pairs plus pairwise
    secrets for every node-node and node-client link."""
    outdir = Path(outdir)
    if outdir.exists() and any(outdir.iterdir()) and not force:
        raise FileExistsError(f"{outdir} is not empty (use force)")
    outdir.mkdir(parents=True, exist_ok=True)
    node_ids = list(range(n))
    client_ids = [n + k for k in range(clients)]
    for i in node_ids:
        _write_keypair(outdir, f"node_{i}", generate_keypair())
    for c in client_ids:
        _write_keypair(outdir, f"client_{c}", generate_keypair())
    records = []
    for a in node_ids:
        for b in node_ids:
            if a < b:
                records.append((a, b))
        for c in client_ids:
            records.append((a, c))
    with open(outdir / "pairwise.bin", "wb") as fh:
        for a, b in records:
            fh.write(struct.pack("<HH", a, b) + os.urandom(MAC_KEY_LEN))
    return node_ids, client_ids


def _load_private(path: Path):
    return serialization.load_pem_private_key(path.read_bytes(), password=None)


def _load_public(path: Path):
    return serialization.load_pem_public_key(path.read_bytes())


def load_keystore(keydir, own_id: int) -> KeyStore:
    """Build the KeyStore for one principal from a keys directory.

    Loads every public key present and only the pairwise secrets whose link
    involves ``own_id``; other principals' private keys are never read.
    """
    keydir = Path(keydir)
    own = None
    verify_keys = {}
    for pub in keydir.glob("*.pub.pem"):
        pid = int(pub.stem.rsplit(".", 1)[0].split("_")[1])
        verify_keys[pid] = _load_public(pub)
        if pid == own_id:
            priv = keydir / pub.name.replace(".pub.pem", ".pem")
            own = _load_private(priv)
    if own is None:
        raise KeyMissing(f"no private key for id {own_id} in {keydir}")
    mac_keys = {}
    data = (keydir / "pairwise.bin").read_bytes()
    rec = 4 + MAC_KEY_LEN
    for off in range(0, len(data), rec):
        a, b = struct.unpack_from("<HH", data, off)
        secret = data[off + 4:off + rec]
        if a == own_id:
            mac_keys[b] = secret
        elif b == own_id:
            mac_keys[a] = secret
    return KeyStore(own_id, own, verify_keys, mac_keys)
