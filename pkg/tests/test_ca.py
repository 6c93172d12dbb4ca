import dataclasses

import pytest
from hypothesis import given, settings, strategies as st

from datamarket import crypto
from datamarket.ca import (CertificateAuthority, EnrollmentRequest, is_plausible,
                           signature_valid, verify_certificate)
from datamarket.errors import DuplicateNonce, ImplausibleSample, InvalidInput
from datamarket.protocol import PLAUSIBLE_RANGES, SensorType


def enroll(samples, nonce_seed=1, t=SensorType.TEMPERATURE):
    return EnrollmentRequest("hx-abc", t, tuple(samples), crypto.new_nonce(nonce_seed))


@pytest.fixture
def ca():
    return CertificateAuthority(n_issuers=3, rng=42)


def test_issue_and_verify(ca):
    req = enroll([-40, 0, 21.5, 60])
    cert = ca.issue_certificate(req, now=10, validity=100)
    assert cert.issued_at == 10 and cert.expires_at == 110
    assert verify_certificate(cert, 10, ca.trusted_keys, req.nonce)
    assert not verify_certificate(cert, 110, ca.trusted_keys)
    assert not verify_certificate(cert, 50, ca.trusted_keys, crypto.new_nonce(99))
    assert not verify_certificate(cert, 50, [crypto.signing_keygen(0).public])


def test_implausible_sample(ca):
    with pytest.raises(ImplausibleSample):
        ca.issue_certificate(enroll([20, 5000]), 0, 10)
    with pytest.raises(ImplausibleSample):
        ca.issue_certificate(enroll([float("nan")]), 0, 10)


def test_duplicate_enrollment_nonce(ca):
    ca.issue_certificate(enroll([1.0], nonce_seed=3), 0, 10)
    with pytest.raises(DuplicateNonce):
        ca.issue_certificate(enroll([2.0], nonce_seed=3), 0, 10)


def test_empty_samples_rejected():
    with pytest.raises(InvalidInput):
        enroll([])


def test_issuers_round_robin(ca):
    certs = [ca.issue_certificate(enroll([1.0], nonce_seed=s), 0, 10) for s in range(3)]
    keys = ca.trusted_keys
    owners = [next(i for i, k in enumerate(keys) if crypto.verify(k, c.signed_bytes(),
                                                                  c.issuer_sig))
              for c in certs]
    assert owners == [0, 1, 2]


@pytest.mark.parametrize("t", list(SensorType))
def test_plausibility_matches_range_oracle(t):
    lo, hi = PLAUSIBLE_RANGES[t]
    # oracle: direct comparison against the table
    for samples in ([lo, hi], [lo - 1], [hi + 1], [(lo + hi) / 2]):
        expected = all(lo <= x <= hi for x in samples)
        assert is_plausible(t, samples) == expected


def test_dict_round_trip(ca):
    cert = ca.issue_certificate(enroll([3.0]), 0, 10)
    assert type(cert).from_dict(cert.to_dict()) == cert


@pytest.fixture(scope="module")
def issued():
    ca = CertificateAuthority(n_issuers=2, rng=5)
    return ca, ca.issue_certificate(enroll([5.0], nonce_seed=8), now=3, validity=500)


def _flip(b: bytes, bit: int) -> bytes:
    a = bytearray(b)
    a[bit // 8] ^= 1 << (bit % 8)
    return bytes(a)


@settings(max_examples=150, deadline=None)
@given(field=st.sampled_from(["location_cell", "sensor_type", "issued_at", "expires_at",
                              "seller_nonce", "issuer_sig"]),
       bit=st.integers(0, 511))
def test_any_single_bit_mutation_invalidates(issued, field, bit):
    ca, cert = issued
    if field == "location_cell":
        raw = cert.location_cell.encode()
        mutated = _flip(raw, bit % (8 * len(raw))).decode("latin-1")
    elif field == "sensor_type":
        others = [t for t in SensorType if t != cert.sensor_type]
        mutated = others[bit % len(others)]
    elif field in ("issued_at", "expires_at"):
        mutated = getattr(cert, field) ^ (1 << (bit % 30))
    elif field == "seller_nonce":
        mutated = crypto.Nonce(_flip(cert.seller_nonce.value, bit % 128))
    else:
        mutated = _flip(cert.issuer_sig, bit)
    bad = dataclasses.replace(cert, **{field: mutated})
    assert not signature_valid(bad, ca.trusted_keys)
    assert not verify_certificate(bad, 4, ca.trusted_keys)
