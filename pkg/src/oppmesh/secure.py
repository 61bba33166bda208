"""Authenticated key agreement and the sealed record channel.

The handshake is a two-message pattern over X25519: each side holds a
static key pair and contributes a fresh ephemeral; both derive the
session secret from the three Diffie-Hellman results (ee, es, se) mixed
with the transcript hash through HKDF-SHA256. Message two carries a
confirmation tag sealed under the derived key, so tampering or a
mismatched derivation fails immediately on the initiator; the responder
detects a bad peer on the first sealed record.

Post-handshake records are ChaCha20-Poly1305 sealed with per-direction
keys. Each record carries an explicit 8-byte sequence number (also the
nonce and associated data); receivers require sequence numbers to be
strictly increasing, which drops replays while tolerating records lost
by the lossy transport underneath.
"""

from __future__ import annotations

import base64
import hashlib
import random
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import HandshakeError, SecureChannelError

KEY_LEN = 32
TAG_LEN = 16
SEQ_LEN = 8
_HKDF_INFO = b"oppmesh session v1"


@dataclass(frozen=True)
class StaticKeypair:
    private: X25519PrivateKey

    @property
    def public_bytes(self) -> bytes:
        return self.private.public_key().public_bytes_raw()

    @classmethod
    def generate(cls, rng: random.Random | None = None) -> "StaticKeypair":
        if rng is None:
            return cls(X25519PrivateKey.generate())
        return cls(X25519PrivateKey.from_private_bytes(rng.randbytes(KEY_LEN)))


def peer_id_from_public_key(public_key: bytes) -> str:
    """Stable printable peer id: base-32 of the key's SHA-256 digest."""
    digest = hashlib.sha256(public_key).digest()
    return base64.b32encode(digest).decode("ascii").rstrip("=").lower()


def _hkdf(ikm: bytes, salt: bytes, length: int) -> bytes:
    kdf = HKDF(algorithm=hashes.SHA256(), length=length, salt=salt, info=_HKDF_INFO)
    return kdf.derive(ikm)


@dataclass
class SessionKeys:
    send_key: bytes
    recv_key: bytes
    secret: bytes  # combined secret, equal on both sides


def _derive(
    dh_ee: bytes, dh_es: bytes, dh_se: bytes, transcript: bytes, initiator: bool
) -> SessionKeys:
    material = _hkdf(dh_ee + dh_es + dh_se, hashlib.sha256(transcript).digest(), 64)
    k_i2r, k_r2i = material[:KEY_LEN], material[KEY_LEN:]
    secret = hashlib.sha256(material).digest()
    if initiator:
        return SessionKeys(k_i2r, k_r2i, secret)
    return SessionKeys(k_r2i, k_i2r, secret)


def _nonce(seq: int) -> bytes:
    return seq.to_bytes(12, "big")


class HandshakeInitiator:
    def __init__(self, static: StaticKeypair, rng: random.Random | None = None):
        self._static = static
        self._eph = StaticKeypair.generate(rng)
        self._msg1: bytes | None = None

    def message1(self) -> bytes:
        self._msg1 = self._eph.public_bytes + self._static.public_bytes
        return self._msg1

    def on_message2(self, msg2: bytes) -> SessionKeys:
        if self._msg1 is None:
            raise HandshakeError("message1 not sent yet")
        if len(msg2) != 2 * KEY_LEN + TAG_LEN:
            raise HandshakeError(f"bad message2 length {len(msg2)}")
        re_pub, rs_pub = msg2[:KEY_LEN], msg2[KEY_LEN : 2 * KEY_LEN]
        confirm = msg2[2 * KEY_LEN :]
        try:
            remote_eph = X25519PublicKey.from_public_bytes(re_pub)
            remote_static = X25519PublicKey.from_public_bytes(rs_pub)
            dh_ee = self._eph.private.exchange(remote_eph)
            dh_es = self._eph.private.exchange(remote_static)
            dh_se = self._static.private.exchange(remote_eph)
        except ValueError as exc:
            raise HandshakeError(f"invalid public key: {exc}") from exc
        transcript = self._msg1 + re_pub + rs_pub
        keys = _derive(dh_ee, dh_es, dh_se, transcript, initiator=True)
        try:
            ChaCha20Poly1305(keys.recv_key).decrypt(
                _nonce(0), confirm, hashlib.sha256(transcript).digest()
            )
        except InvalidTag as exc:
            raise HandshakeError("confirmation tag failed") from exc
        return keys


class HandshakeResponder:
    def __init__(self, static: StaticKeypair, rng: random.Random | None = None):
        self._static = static
        self._eph = StaticKeypair.generate(rng)

    def on_message1(self, msg1: bytes) -> tuple[bytes, SessionKeys]:
        if len(msg1) != 2 * KEY_LEN:
            raise HandshakeError(f"bad message1 length {len(msg1)}")
        ie_pub, is_pub = msg1[:KEY_LEN], msg1[KEY_LEN:]
        try:
            remote_eph = X25519PublicKey.from_public_bytes(ie_pub)
            remote_static = X25519PublicKey.from_public_bytes(is_pub)
            dh_ee = self._eph.private.exchange(remote_eph)
            dh_es = self._static.private.exchange(remote_eph)
            dh_se = self._eph.private.exchange(remote_static)
        except ValueError as exc:
            raise HandshakeError(f"invalid public key: {exc}") from exc
        transcript = msg1 + self._eph.public_bytes + self._static.public_bytes
        keys = _derive(dh_ee, dh_es, dh_se, transcript, initiator=False)
        confirm = ChaCha20Poly1305(keys.send_key).encrypt(
            _nonce(0), b"", hashlib.sha256(transcript).digest()
        )
        msg2 = self._eph.public_bytes + self._static.public_bytes + confirm
        return msg2, keys


def handshake(
    initiator_static: StaticKeypair,
    responder_static: StaticKeypair,
    rng: random.Random | None = None,
) -> tuple[SessionKeys, SessionKeys]:
    """Run the 2-message exchange in memory; returns both sides' keys."""
    init = HandshakeInitiator(initiator_static, rng)
    resp = HandshakeResponder(responder_static, rng)
    msg2, responder_keys = resp.on_message1(init.message1())
    initiator_keys = init.on_message2(msg2)
    return initiator_keys, responder_keys


class SecureChannel:
    """Seals and opens records with explicit, strictly increasing seqs.

    The 8-byte sequence header doubles as nonce and associated data;
    gaps are tolerated (the transport below may lose records) but a
    stale or repeated sequence number is rejected as a replay.
    """

    def __init__(self, keys: SessionKeys) -> None:
        self._send = ChaCha20Poly1305(keys.send_key)
        self._recv = ChaCha20Poly1305(keys.recv_key)
        self.secret = keys.secret
        self._send_seq = 0
        self._recv_seq = 0

    def seal(self, plaintext: bytes) -> bytes:
        self._send_seq += 1
        seq = self._send_seq.to_bytes(SEQ_LEN, "big")
        return seq + self._send.encrypt(_nonce(self._send_seq), plaintext, seq)

    def open(self, record: bytes) -> bytes:
        if len(record) < SEQ_LEN + TAG_LEN:
            raise SecureChannelError(f"record too short ({len(record)} bytes)")
        seq_bytes, ciphertext = record[:SEQ_LEN], record[SEQ_LEN:]
        seq = int.from_bytes(seq_bytes, "big")
        if seq <= self._recv_seq:
            raise SecureChannelError(f"replayed or stale sequence {seq}")
        try:
            plaintext = self._recv.decrypt(_nonce(seq), ciphertext, seq_bytes)
        except InvalidTag as exc:
            raise SecureChannelError("authentication failed") from exc
        self._recv_seq = seq
        return plaintext
