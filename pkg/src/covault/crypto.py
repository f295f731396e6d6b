"""Deterministic cryptographic primitives and canonical serialization.

Algorithm choices, fixed across the whole framework:

* hashing      SHA-256 (measurements, PCR values, file hashes)
* signatures   Ed25519 (stakeholder, attestation, and quote signing)
* AEAD         AES-256-GCM, 96-bit random nonces stored beside the ciphertext
* canonical    JSON, lexicographically sorted keys, no insignificant
               whitespace, UTF-8, integers only (floats rejected)

Digests and signatures are rendered as lowercase hex in every file and
wire message.
"""

from __future__ import annotations

import hashlib
import json
import secrets
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives import serialization

DIGEST_SIZE = 32
SIGNATURE_SIZE = 64
PUBLIC_KEY_SIZE = 32
SYMMETRIC_KEY_SIZE = 32
AEAD_NONCE_SIZE = 12

# Domain tags keep the different hash uses from colliding on equal input bytes.
KEY_COMMITMENT_TAG = b"covault.key-commitment.v1"
CODE_MEASUREMENT_TAG = b"covault.code-measurement.v1"


class CryptoError(Exception):
    """Base class for failures in this module."""


class DecodeError(CryptoError):
    """Malformed key, signature, or document encoding (distinct from reject)."""


class AuthenticationFailure(CryptoError):
    """AEAD open failed: ciphertext, nonce, aad, or key does not match."""


class CanonicalEncodingError(CryptoError):
    """Document contains a value the canonical encoding does not admit."""


# ---------------------------------------------------------------------------
# Hashing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Digest:
    """A 32-byte SHA-256 output. Equality is bytewise."""

    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes) or len(self.value) != DIGEST_SIZE:
            raise DecodeError(f"digest must be {DIGEST_SIZE} bytes")

    @classmethod
    def from_hex(cls, text: str) -> "Digest":
        try:
            raw = bytes.fromhex(text)
        except ValueError as e:
            raise DecodeError(f"bad digest hex: {e}") from e
        return cls(raw)

    @property
    def hex(self) -> str:
        return self.value.hex()

    def __repr__(self) -> str:
        return f"Digest({self.hex[:12]}…)"


ZERO_DIGEST = Digest(b"\x00" * DIGEST_SIZE)


def hash_bytes(data: bytes) -> Digest:
    """SHA-256 of the exact input bytes."""
    return Digest(hashlib.sha256(data).digest())


# ---------------------------------------------------------------------------
# Signatures (Ed25519)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Signature:
    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes) or len(self.value) != SIGNATURE_SIZE:
            raise DecodeError(f"signature must be {SIGNATURE_SIZE} bytes")

    @classmethod
    def from_hex(cls, text: str) -> "Signature":
        try:
            raw = bytes.fromhex(text)
        except ValueError as e:
            raise DecodeError(f"bad signature hex: {e}") from e
        return cls(raw)

    @property
    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True)
class PublicKey:
    """Raw 32-byte Ed25519 public key."""

    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, bytes) or len(self.value) != PUBLIC_KEY_SIZE:
            raise DecodeError(f"public key must be {PUBLIC_KEY_SIZE} bytes")
        try:
            Ed25519PublicKey.from_public_bytes(self.value)
        except Exception as e:
            raise DecodeError(f"bad public key: {e}") from e

    @classmethod
    def from_hex(cls, text: str) -> "PublicKey":
        try:
            raw = bytes.fromhex(text)
        except ValueError as e:
            raise DecodeError(f"bad public key hex: {e}") from e
        return cls(raw)

    @property
    def hex(self) -> str:
        return self.value.hex()

    def __repr__(self) -> str:
        return f"PublicKey({self.hex[:12]}…)"


class SigningKey:
    """Ed25519 private key. Never serialized into documents or logs."""

    def __init__(self, raw: Optional[bytes] = None) -> None:
        if raw is None:
            self._key = Ed25519PrivateKey.generate()
        else:
            if len(raw) != 32:
                raise DecodeError("signing key must be 32 bytes")
            self._key = Ed25519PrivateKey.from_private_bytes(raw)

    @classmethod
    def generate(cls) -> "SigningKey":
        return cls()

    @classmethod
    def from_hex(cls, text: str) -> "SigningKey":
        try:
            raw = bytes.fromhex(text)
        except ValueError as e:
            raise DecodeError(f"bad signing key hex: {e}") from e
        return cls(raw)

    def private_hex(self) -> str:
        raw = self._key.private_bytes(
            serialization.Encoding.Raw,
            serialization.PrivateFormat.Raw,
            serialization.NoEncryption(),
        )
        return raw.hex()

    @property
    def public_key(self) -> PublicKey:
        raw = self._key.public_key().public_bytes(
            serialization.Encoding.Raw, serialization.PublicFormat.Raw
        )
        return PublicKey(raw)

    def sign(self, message: bytes) -> Signature:
        return Signature(self._key.sign(message))

    def __repr__(self) -> str:
        return f"SigningKey(pub={self.public_key.hex[:12]}…)"


def sign(sk: SigningKey, message: bytes) -> Signature:
    return sk.sign(message)


def verify(pk: PublicKey, message: bytes, signature: Signature) -> bool:
    """True iff the signature matches; decode errors raise, mismatches return False."""
    try:
        Ed25519PublicKey.from_public_bytes(pk.value).verify(signature.value, message)
        return True
    except InvalidSignature:
        return False


# ---------------------------------------------------------------------------
# Symmetric keys and AEAD
# ---------------------------------------------------------------------------

class SymmetricKey:
    """32 bytes of random key material plus its public commitment.

    key_id = SHA-256(key_bytes || KEY_COMMITMENT_TAG); only key_id may appear
    in manifests, policies, or logs. repr never shows the key.
    """

    __slots__ = ("_bytes", "key_id")

    def __init__(self, raw: bytes) -> None:
        if len(raw) != SYMMETRIC_KEY_SIZE:
            raise DecodeError(f"symmetric key must be {SYMMETRIC_KEY_SIZE} bytes")
        self._bytes = raw
        self.key_id: Digest = hash_bytes(raw + KEY_COMMITMENT_TAG)

    @classmethod
    def generate(cls) -> "SymmetricKey":
        return cls(secrets.token_bytes(SYMMETRIC_KEY_SIZE))

    @classmethod
    def from_hex(cls, text: str) -> "SymmetricKey":
        try:
            raw = bytes.fromhex(text)
        except ValueError as e:
            raise DecodeError(f"bad key hex: {e}") from e
        return cls(raw)

    def reveal_bytes(self) -> bytes:
        return self._bytes

    def reveal_hex(self) -> str:
        return self._bytes.hex()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SymmetricKey):
            return NotImplemented
        return secrets.compare_digest(self._bytes, other._bytes)

    def __hash__(self) -> int:
        return hash(self.key_id)

    def __repr__(self) -> str:
        return f"SymmetricKey(id={self.key_id.hex[:12]}…)"


def aead_seal(key: SymmetricKey, nonce: bytes, aad: bytes, plaintext: bytes) -> bytes:
    """AES-256-GCM seal. The nonce must be unique per (key, message)."""
    if len(nonce) != AEAD_NONCE_SIZE:
        raise DecodeError(f"nonce must be {AEAD_NONCE_SIZE} bytes")
    return AESGCM(key.reveal_bytes()).encrypt(nonce, plaintext, aad)


def aead_open(key: SymmetricKey, nonce: bytes, aad: bytes, ciphertext: bytes) -> bytes:
    """Open a sealed blob; raises AuthenticationFailure on any mismatch."""
    if len(nonce) != AEAD_NONCE_SIZE:
        raise DecodeError(f"nonce must be {AEAD_NONCE_SIZE} bytes")
    try:
        return AESGCM(key.reveal_bytes()).decrypt(nonce, ciphertext, aad)
    except InvalidTag as e:
        raise AuthenticationFailure("AEAD authentication failed") from e


def fresh_nonce() -> bytes:
    return secrets.token_bytes(AEAD_NONCE_SIZE)


# ---------------------------------------------------------------------------
# Canonical encoding
# ---------------------------------------------------------------------------

def _check_encodable(value: Any, path: str) -> None:
    if value is None or isinstance(value, (str, bool)):
        return
    if isinstance(value, int):
        return
    if isinstance(value, float):
        raise CanonicalEncodingError(f"float at {path} not admitted in canonical form")
    if isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _check_encodable(item, f"{path}[{i}]")
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise CanonicalEncodingError(f"non-string key {k!r} at {path}")
            _check_encodable(v, f"{path}.{k}")
        return
    raise CanonicalEncodingError(f"unencodable {type(value).__name__} at {path}")


def canonical_encode(document: Any) -> bytes:
    """Deterministic bytes for a document: sorted keys, no whitespace, UTF-8.

    Identical logical documents yield identical bytes regardless of map
    insertion order. Floats and non-string keys are rejected.
    """
    _check_encodable(document, "$")
    text = json.dumps(
        document, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
        allow_nan=False,
    )
    return text.encode("utf-8")


def canonical_decode(data: bytes) -> Any:
    try:
        document = json.loads(data.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DecodeError(f"bad canonical document: {e}") from e
    _check_encodable(document, "$")
    return document


# ---------------------------------------------------------------------------
# Minimal certificates (subject, public key, issuer signature)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Certificate:
    """X.509-like certificate reduced to its verification semantics."""

    subject: str
    public_key: PublicKey
    issuer: str
    signature: Signature = field(repr=False)

    def signed_body(self) -> bytes:
        return canonical_encode(
            {"issuer": self.issuer, "public_key": self.public_key.hex,
             "subject": self.subject}
        )

    def to_doc(self) -> dict:
        return {
            "subject": self.subject,
            "public_key": self.public_key.hex,
            "issuer": self.issuer,
            "signature": self.signature.hex,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "Certificate":
        if not isinstance(doc, dict):
            raise DecodeError("certificate document must be a map")
        expected = {"subject", "public_key", "issuer", "signature"}
        if set(doc) != expected:
            raise DecodeError(f"certificate fields must be exactly {sorted(expected)}")
        if not isinstance(doc["subject"], str) or not isinstance(doc["issuer"], str):
            raise DecodeError("certificate subject/issuer must be strings")
        return cls(
            subject=doc["subject"],
            public_key=PublicKey.from_hex(doc["public_key"]),
            issuer=doc["issuer"],
            signature=Signature.from_hex(doc["signature"]),
        )


def issue_certificate(
    subject: str, subject_key: PublicKey, issuer: str, issuer_sk: SigningKey
) -> Certificate:
    body = canonical_encode(
        {"issuer": issuer, "public_key": subject_key.hex, "subject": subject}
    )
    return Certificate(
        subject=subject, public_key=subject_key, issuer=issuer,
        signature=issuer_sk.sign(body),
    )


def self_signed_certificate(subject: str, sk: SigningKey) -> Certificate:
    return issue_certificate(subject, sk.public_key, subject, sk)


def verify_certificate_chain(
    chain: Sequence[Certificate], trusted_roots: Iterable[Certificate]
) -> Optional[PublicKey]:
    """Verify a root-to-leaf chain against trust anchors.

    The first element must be one of the trusted roots (compared by content)
    and self-signed; each following certificate must be signed by its
    predecessor's key. Returns the leaf public key, or None if any link fails.
    """
    if not chain:
        return None
    root = chain[0]
    if not any(root == anchor for anchor in trusted_roots):
        return None
    if not verify(root.public_key, root.signed_body(), root.signature):
        return None
    signer = root
    for cert in chain[1:]:
        if cert.issuer != signer.subject:
            return None
        if not verify(signer.public_key, cert.signed_body(), cert.signature):
            return None
        signer = cert
    return signer.public_key
