"""Decentralized certificate authority.

A set of certificate issuers (CIs), each with its own signing key.  The
broker trusts any of them.  Sample authenticity is judged with a per-sensor
plausibility range table; the issuer never sees who the seller is.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import crypto
from .crypto import Nonce, SigningKeyPair
from .errors import DuplicateNonce, ImplausibleSample, InvalidInput
from .protocol import PLAUSIBLE_RANGES, SensorType, b64, unb64


@dataclass(frozen=True)
class EnrollmentRequest:
    # no identity field: the issuer learns only these four things
    claimed_location: str
    sensor_type: SensorType
    sample_data: tuple[float, ...]
    nonce: Nonce

    def __post_init__(self):
        object.__setattr__(self, "sensor_type", SensorType(self.sensor_type))
        object.__setattr__(self, "sample_data", tuple(float(x) for x in self.sample_data))
        if not self.sample_data:
            raise InvalidInput("sample_data must be non-empty")


@dataclass(frozen=True)
class Certificate:
    location_cell: str
    sensor_type: SensorType
    issued_at: int
    expires_at: int
    seller_nonce: Nonce
    issuer_sig: bytes = field(default=b"", repr=False)

    def signed_bytes(self) -> bytes:
        return json.dumps(
            [self.location_cell, SensorType(self.sensor_type).value, self.issued_at,
             self.expires_at, self.seller_nonce.hex()],
            separators=(",", ":"),
        ).encode()

    def to_dict(self) -> dict:
        return {"loc": self.location_cell, "type": SensorType(self.sensor_type).value,
                "iat": self.issued_at, "exp": self.expires_at,
                "n": b64(self.seller_nonce.value), "sig": b64(self.issuer_sig)}

    @classmethod
    def from_dict(cls, d: dict) -> "Certificate":
        return cls(d["loc"], SensorType(d["type"]), int(d["iat"]), int(d["exp"]),
                   Nonce(unb64(d["n"])), unb64(d["sig"]))


def is_plausible(sensor_type: SensorType, samples: Sequence[float]) -> bool:
    lo, hi = PLAUSIBLE_RANGES[SensorType(sensor_type)]
    arr = np.asarray(samples, dtype=float)
    return arr.size > 0 and bool(np.all(np.isfinite(arr)) and np.all((arr >= lo) & (arr <= hi)))


class CertificateIssuer:
    def __init__(self, keys: SigningKeyPair):
        self.keys = keys

    @property
    def public_key(self) -> bytes:
        return self.keys.public


class CertificateAuthority:
    """A pool of issuers sharing one seen-nonce registry."""

    def __init__(self, n_issuers: int = 3, rng: crypto.RngLike = None):
        rng = crypto.as_rng(rng)
        if n_issuers < 1:
            raise InvalidInput("need at least one issuer")
        self.issuers = [CertificateIssuer(crypto.signing_keygen(rng)) for _ in range(n_issuers)]
        self._seen_nonces: set[bytes] = set()
        self._next = 0

    @property
    def trusted_keys(self) -> list[bytes]:
        return [i.public_key for i in self.issuers]

    def issue_certificate(self, req: EnrollmentRequest, now: int, validity: int,
                          issuer: Optional[int] = None) -> Certificate:
        if validity <= 0:
            raise InvalidInput("validity must be positive")
        if not is_plausible(req.sensor_type, req.sample_data):
            raise ImplausibleSample(f"sample outside {req.sensor_type.value} range")
        if req.nonce.value in self._seen_nonces:
            raise DuplicateNonce(req.nonce.hex())
        self._seen_nonces.add(req.nonce.value)
        if issuer is None:
            issuer = self._next
            self._next = (self._next + 1) % len(self.issuers)
        ci = self.issuers[issuer]
        cert = Certificate(req.claimed_location, req.sensor_type, now, now + validity, req.nonce)
        return replace(cert, issuer_sig=crypto.sign(ci.keys.secret, cert.signed_bytes()))


def verify_certificate(cert: Certificate, now: int, trusted_keys: Sequence[bytes],
                       expected_nonce: Optional[Nonce] = None) -> bool:
    """Boolean check: valid issuer signature, unexpired, and nonce binding if requested."""
    if not signature_valid(cert, trusted_keys):
        return False
    if not now < cert.expires_at:
        return False
    if expected_nonce is not None and cert.seller_nonce != expected_nonce:
        return False
    return True


def signature_valid(cert: Certificate, trusted_keys: Sequence[bytes]) -> bool:
    if cert.expires_at <= cert.issued_at:
        return False
    msg = cert.signed_bytes()
    return any(crypto.verify(pk, msg, cert.issuer_sig) for pk in trusted_keys)
