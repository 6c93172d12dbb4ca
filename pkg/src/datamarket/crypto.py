"""
Cryptographic primitives used by every protocol message.

Algorithm stack:
  Key agreement : X25519 (one ephemeral key per message)
  Key derivation: HKDF-SHA256
  AEAD          : ChaCha20-Poly1305
  Signatures    : Ed25519

All randomness comes from an explicitly passed ``numpy.random.Generator`` so a
whole simulation run is reproducible from one seed.  Passing ``rng=None`` falls
back to the operating system's CSPRNG.

Hybrid ciphertext layout (``OVERHEAD`` = 64 bytes)::

    eph_pub (32) | aead_nonce (12) | AEAD( len(m) u32 | m | zero pad ) | tag (16)

With padding enabled the total blob length is always one of the configured
bucket sizes, so a message's length reveals only which bucket it fell into.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import DecryptFailure, DuplicateNonce, MessageTooLarge

KEY_LEN = 32
NONCE_LEN = 16
AEAD_NONCE_LEN = 12
TAG_LEN = 16
LEN_PREFIX = 4
OVERHEAD = KEY_LEN + AEAD_NONCE_LEN + TAG_LEN + LEN_PREFIX  # 64
SYM_OVERHEAD = AEAD_NONCE_LEN + TAG_LEN

DEFAULT_BUCKETS = (256, 1024, 4096, 65536)

_HKDF_INFO = b"datamarket-hybrid-v1"
_RAW = serialization.Encoding.Raw

RngLike = Union[np.random.Generator, int, None]


def as_rng(seed: RngLike) -> Optional[np.random.Generator]:
    if seed is None or isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def random_bytes(rng: Optional[np.random.Generator], n: int) -> bytes:
    if rng is None:
        return os.urandom(n)
    return rng.bytes(n)


# ---------------------------------------------------------------------------
# Key material
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KeyPair:
    """X25519 encryption key pair (raw 32-byte encodings)."""

    public: bytes
    secret: bytes = b""

    def __repr__(self) -> str:
        return f"KeyPair(public={self.public.hex()[:16]}...)"


@dataclass(frozen=True)
class SigningKeyPair:
    """Ed25519 signing key pair (raw 32-byte encodings)."""

    public: bytes
    secret: bytes = b""

    def __repr__(self) -> str:
        return f"SigningKeyPair(public={self.public.hex()[:16]}...)"


@dataclass(frozen=True)
class Nonce:
    value: bytes

    def __post_init__(self):
        if len(self.value) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes, got {len(self.value)}")

    def hex(self) -> str:
        return self.value.hex()


@dataclass(frozen=True)
class SymmetricKey:
    key: bytes

    def __post_init__(self):
        if len(self.key) != KEY_LEN:
            raise ValueError(f"symmetric key must be {KEY_LEN} bytes")

    def __repr__(self) -> str:
        return "SymmetricKey(<redacted>)"


@dataclass(frozen=True)
class Ciphertext:
    blob: bytes

    @property
    def padded_len(self) -> int:
        return len(self.blob)

    def __len__(self) -> int:
        return len(self.blob)


def _x25519_public(secret: bytes) -> bytes:
    return X25519PrivateKey.from_private_bytes(secret).public_key().public_bytes(
        _RAW, serialization.PublicFormat.Raw
    )


def keygen(seed: RngLike = None) -> KeyPair:
    """Generate an encryption key pair; deterministic for a given seed/generator state."""
    secret = random_bytes(as_rng(seed), KEY_LEN)
    return KeyPair(public=_x25519_public(secret), secret=secret)


def signing_keygen(seed: RngLike = None) -> SigningKeyPair:
    secret = random_bytes(as_rng(seed), KEY_LEN)
    pub = Ed25519PrivateKey.from_private_bytes(secret).public_key().public_bytes(
        _RAW, serialization.PublicFormat.Raw
    )
    return SigningKeyPair(public=pub, secret=secret)


def new_nonce(rng: RngLike = None) -> Nonce:
    return Nonce(random_bytes(as_rng(rng), NONCE_LEN))


def new_symmetric_key(rng: RngLike = None) -> SymmetricKey:
    return SymmetricKey(random_bytes(as_rng(rng), KEY_LEN))


class NonceRegistry:
    """Global freshness check: every nonce (or per-trade public key) is seen once per run."""

    def __init__(self):
        self._seen: set[bytes] = set()

    def register(self, value: bytes) -> None:
        if value in self._seen:
            raise DuplicateNonce(value.hex())
        self._seen.add(value)

    def __contains__(self, value: bytes) -> bool:
        return value in self._seen

    def __len__(self) -> int:
        return len(self._seen)


# ---------------------------------------------------------------------------
# Hybrid public-key encryption
# ---------------------------------------------------------------------------

def padded_size(msg_len: int, buckets: Optional[Sequence[int]]) -> int:
    """Blob length produced for a message of ``msg_len`` bytes."""
    needed = msg_len + OVERHEAD
    if not buckets:
        return needed
    for b in sorted(buckets):
        if b >= needed:
            return b
    raise MessageTooLarge(f"{msg_len} bytes does not fit largest bucket {max(buckets)}")


def _derive(shared: bytes, eph_pub: bytes, recipient_pub: bytes) -> bytes:
    hkdf = HKDF(algorithm=hashes.SHA256(), length=KEY_LEN, salt=None,
                info=_HKDF_INFO + eph_pub + recipient_pub)
    return hkdf.derive(shared)


def hybrid_encrypt(
    pk: bytes,
    m: bytes,
    buckets: Optional[Sequence[int]] = DEFAULT_BUCKETS,
    rng: RngLike = None,
) -> Ciphertext:
    """Encrypt ``m`` to the holder of the X25519 public key ``pk``.

    With ``buckets`` set the result length is the smallest bucket that fits
    ``len(m) + OVERHEAD``; with ``buckets=None`` no padding is added.
    """
    rng = as_rng(rng)
    target = padded_size(len(m), buckets)
    eph_secret = random_bytes(rng, KEY_LEN)
    eph = X25519PrivateKey.from_private_bytes(eph_secret)
    eph_pub = eph.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)
    try:
        shared = eph.exchange(X25519PublicKey.from_public_bytes(pk))
    except ValueError as exc:
        raise ValueError("invalid recipient public key") from exc
    key = _derive(shared, eph_pub, pk)
    aead_nonce = random_bytes(rng, AEAD_NONCE_LEN)
    frame_len = target - OVERHEAD + LEN_PREFIX
    frame = struct.pack(">I", len(m)) + m
    frame += b"\x00" * (frame_len - len(frame))
    ct = ChaCha20Poly1305(key).encrypt(aead_nonce, frame, eph_pub)
    return Ciphertext(eph_pub + aead_nonce + ct)


def hybrid_decrypt(sk: bytes, c: Union[Ciphertext, bytes]) -> bytes:
    blob = c.blob if isinstance(c, Ciphertext) else bytes(c)
    if len(blob) < OVERHEAD:
        raise DecryptFailure("ciphertext shorter than header")
    eph_pub = blob[:KEY_LEN]
    aead_nonce = blob[KEY_LEN:KEY_LEN + AEAD_NONCE_LEN]
    body = blob[KEY_LEN + AEAD_NONCE_LEN:]
    try:
        priv = X25519PrivateKey.from_private_bytes(sk)
        recipient_pub = priv.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)
        shared = priv.exchange(X25519PublicKey.from_public_bytes(eph_pub))
        frame = ChaCha20Poly1305(_derive(shared, eph_pub, recipient_pub)).decrypt(
            aead_nonce, body, eph_pub
        )
    except (InvalidTag, ValueError) as exc:
        raise DecryptFailure("authentication failed") from exc
    (n,) = struct.unpack(">I", frame[:LEN_PREFIX])
    if n > len(frame) - LEN_PREFIX:
        raise DecryptFailure("corrupt length prefix")
    return frame[LEN_PREFIX:LEN_PREFIX + n]


# ---------------------------------------------------------------------------
# Symmetric encryption
# ---------------------------------------------------------------------------

def sym_encrypt(k: SymmetricKey, m: bytes, rng: RngLike = None) -> bytes:
    nonce = random_bytes(as_rng(rng), AEAD_NONCE_LEN)
    return nonce + ChaCha20Poly1305(k.key).encrypt(nonce, m, None)


def sym_decrypt(k: SymmetricKey, c: bytes) -> bytes:
    if len(c) < SYM_OVERHEAD:
        raise DecryptFailure("ciphertext too short")
    try:
        return ChaCha20Poly1305(k.key).decrypt(c[:AEAD_NONCE_LEN], c[AEAD_NONCE_LEN:], None)
    except InvalidTag as exc:
        raise DecryptFailure("authentication failed") from exc


# ---------------------------------------------------------------------------
# Signatures
# ---------------------------------------------------------------------------

def sign(sk: bytes, m: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(sk).sign(m)


def verify(pk: bytes, m: bytes, sig: bytes) -> bool:
    """True iff ``sig`` is a valid signature on ``m`` under ``pk``; never raises."""
    try:
        Ed25519PublicKey.from_public_bytes(pk).verify(sig, m)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def pack(*blobs: bytes) -> bytes:
    """Length-prefixed concatenation of byte strings."""
    return b"".join(struct.pack(">I", len(b)) + b for b in blobs)


def unpack(data: bytes) -> list[bytes]:
    out, i = [], 0
    while i < len(data):
        if i + 4 > len(data):
            raise DecryptFailure("truncated packed payload")
        (n,) = struct.unpack(">I", data[i:i + 4])
        i += 4
        if i + n > len(data):
            raise DecryptFailure("truncated packed payload")
        out.append(data[i:i + n])
        i += n
    return out


def all_in_buckets(lengths: Iterable[int], buckets: Sequence[int]) -> bool:
    allowed = set(buckets)
    return all(n in allowed for n in lengths)
