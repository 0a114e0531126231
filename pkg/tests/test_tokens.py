import ipaddress
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from conftest import TESTDATA
from sharedval.tokens import (
    BODY_LENGTH,
    DEFAULT_MAX_AGE_MS,
    TOKEN_LENGTH,
    GroupSecret,
    RejectReason,
    ReplayStore,
    TokenFields,
    TokenFormatError,
    decode_token,
    encode_token,
    issue_token,
    normalize_ip,
    validate_token,
)

KEY = bytes(range(32))
GROUP = bytes.fromhex("00112233445566778899aabbccddeeff")
NONCE = bytes(range(0xA0, 0xB0))
ISSUED = 1541635200000
SECRET = GroupSecret(KEY)


def golden():
    return bytes.fromhex((TESTDATA / "token_golden.hex").read_text().strip())


def test_golden_vector_matches_reference_construction():
    ref = oracles.build_token(KEY, GROUP, "203.0.113.5", ISSUED, NONCE)
    assert ref == golden()


def test_golden_vector_matches_encoder():
    fields = TokenFields(GROUP, normalize_ip("203.0.113.5"), ISSUED, NONCE)
    assert encode_token(SECRET, fields) == golden()


def test_issue_length_and_round_trip():
    tok = issue_token(SECRET, GROUP, "203.0.113.5", 0, random.Random(1))
    assert len(tok) == TOKEN_LENGTH == 89
    fields = decode_token(tok)
    assert fields.group_id == GROUP
    assert str(fields.client_address()) == "203.0.113.5"
    assert fields.issued_at == 0
    assert oracles.hmac_sha256(KEY, tok[:BODY_LENGTH]) == tok[BODY_LENGTH:]


def test_distinct_rng_states_give_distinct_nonce_and_tag():
    rng = random.Random(7)
    a = issue_token(SECRET, GROUP, "203.0.113.5", 0, rng)
    b = issue_token(SECRET, GROUP, "203.0.113.5", 0, rng)
    assert a[41:57] != b[41:57]
    assert a[57:] != b[57:]


def test_nonces_unique_over_many_issuances():
    rng = random.Random(0)
    nonces = {issue_token(SECRET, GROUP, "192.0.2.1", 0, rng)[41:57] for _ in range(5000)}
    assert len(nonces) == 5000


@given(
    group=st.binary(min_size=16, max_size=16),
    ip=st.one_of(
        st.ip_addresses(v=4).map(str),
        st.ip_addresses(v=6).map(str),
    ),
    now=st.integers(min_value=0, max_value=2**64 - 1),
    seed=st.integers(min_value=0, max_value=2**32),
)
def test_decode_inverts_issue(group, ip, now, seed):
    tok = issue_token(SECRET, group, ip, now, random.Random(seed))
    fields = decode_token(tok)
    assert fields.group_id == group
    assert fields.client_ip == normalize_ip(ip)
    assert fields.issued_at == now
    assert encode_token(SECRET, fields) == tok


def test_ipv6_stored_verbatim():
    assert normalize_ip("2001:db8::1") == ipaddress.IPv6Address("2001:db8::1")
    assert normalize_ip("203.0.113.5").ipv4_mapped == ipaddress.IPv4Address("203.0.113.5")


def test_decode_rejects_short_input():
    with pytest.raises(TokenFormatError) as exc:
        decode_token(golden()[:88])
    assert exc.value.reason is RejectReason.BAD_LENGTH


def test_decode_rejects_unknown_version():
    with pytest.raises(TokenFormatError) as exc:
        decode_token(b"\xff" + golden()[1:])
    assert exc.value.reason is RejectReason.BAD_VERSION


def test_fresh_token_accepted():
    tok = issue_token(SECRET, GROUP, "203.0.113.5", 1000, random.Random(3))
    result = validate_token(SECRET, tok, "203.0.113.5", 1000, DEFAULT_MAX_AGE_MS, ReplayStore())
    assert result.accepted and str(result) == "Accept"


def test_second_use_is_replayed():
    tok = issue_token(SECRET, GROUP, "203.0.113.5", 0, random.Random(3))
    replay = ReplayStore()
    assert validate_token(SECRET, tok, "203.0.113.5", 5, DEFAULT_MAX_AGE_MS, replay).accepted
    again = validate_token(SECRET, tok, "203.0.113.5", 6, DEFAULT_MAX_AGE_MS, replay)
    assert again.reason is RejectReason.REPLAYED


def test_spoofed_source_is_ip_mismatch():
    tok = issue_token(SECRET, GROUP, "203.0.113.5", 0, random.Random(3))
    result = validate_token(SECRET, tok, "198.51.100.7", 0, DEFAULT_MAX_AGE_MS, ReplayStore())
    assert result.reason is RejectReason.IP_MISMATCH


@pytest.mark.parametrize(
    "age, reason",
    [(599_999, None), (600_000, None), (600_001, RejectReason.EXPIRED), (601_000, RejectReason.EXPIRED)],
)
def test_expiry_boundary(age, reason):
    now = 10_000_000
    tok = issue_token(SECRET, GROUP, "203.0.113.5", now - age, random.Random(3))
    assert validate_token(SECRET, tok, "203.0.113.5", now, 600_000, ReplayStore()).reason is reason


def test_other_group_secret_rejected():
    tok = issue_token(SECRET, GROUP, "203.0.113.5", 0, random.Random(3))
    other = GroupSecret(bytes(32))
    assert validate_token(other, tok, "203.0.113.5", 0, DEFAULT_MAX_AGE_MS, ReplayStore()).reason is RejectReason.BAD_TAG


def test_cross_member_acceptance_with_shared_secret():
    # member A issues, member B validates with its own copy of the secret
    member_a = GroupSecret(bytes(KEY))
    member_b = GroupSecret(bytes(bytearray(KEY)))
    tok = issue_token(member_a, GROUP, "203.0.113.5", 0, random.Random(9))
    assert validate_token(member_b, tok, "203.0.113.5", 10, DEFAULT_MAX_AGE_MS, ReplayStore()).accepted


def test_every_single_bit_flip_rejected():
    tok = golden()
    positions = 0
    for bit in range(TOKEN_LENGTH * 8):
        flipped = bytearray(tok)
        flipped[bit // 8] ^= 0x80 >> (bit % 8)
        result = validate_token(SECRET, bytes(flipped), "203.0.113.5", ISSUED, DEFAULT_MAX_AGE_MS, ReplayStore())
        # the version byte is checked before the tag
        expected = RejectReason.BAD_VERSION if bit < 8 else RejectReason.BAD_TAG
        assert result.reason is expected, bit
        positions += 1
    assert positions == 712


def test_rejection_precedence_on_multi_fault_tokens():
    replay = ReplayStore()
    tok = oracles.build_token(KEY, GROUP, "203.0.113.5", 0, NONCE)
    assert validate_token(SECRET, tok, "203.0.113.5", 0, 10, replay).accepted
    # expired, wrong ip, replayed: ip wins
    assert validate_token(SECRET, tok, "198.51.100.7", 10**9, 10, replay).reason is RejectReason.IP_MISMATCH
    # expired and replayed: expiry wins
    assert validate_token(SECRET, tok, "203.0.113.5", 10**9, 10, replay).reason is RejectReason.EXPIRED
    # bad tag beats everything after it
    bad = tok[:-1] + bytes([tok[-1] ^ 1])
    assert validate_token(SECRET, bad, "198.51.100.7", 10**9, 10, replay).reason is RejectReason.BAD_TAG
    # version beats tag
    assert validate_token(SECRET, b"\x02" + bad[1:], "203.0.113.5", 0, 10, replay).reason is RejectReason.BAD_VERSION
    assert validate_token(SECRET, b"\x02" + bad[1:-1], "203.0.113.5", 0, 10, replay).reason is RejectReason.BAD_LENGTH


@settings(max_examples=200)
@given(
    ops=st.lists(
        st.tuples(
            st.integers(min_value=0, max_value=4),
            st.sampled_from(["203.0.113.5", "198.51.100.7"]),
            st.integers(min_value=0, max_value=1_300_000),
        ),
        max_size=40,
    )
)
def test_validation_agrees_with_reference_and_is_single_use(ops):
    pool = [oracles.build_token(KEY, GROUP, "203.0.113.5", 100_000 * i, bytes([i]) * 16) for i in range(5)]
    replay, seen = ReplayStore(), set()
    accepts = {}
    for idx, ip, now in ops:
        got = validate_token(SECRET, pool[idx], ip, now, DEFAULT_MAX_AGE_MS, replay)
        want = oracles.token_accepts(KEY, pool[idx], ip, now, DEFAULT_MAX_AGE_MS, seen)
        assert (got.reason.value if got.reason else None) == want
        if got.accepted:
            accepts[idx] = accepts.get(idx, 0) + 1
    assert all(v == 1 for v in accepts.values())


@given(st.binary(max_size=120))
def test_arbitrary_bytes_never_raise(data):
    result = validate_token(SECRET, data, "203.0.113.5", 0, DEFAULT_MAX_AGE_MS, ReplayStore())
    assert not result.accepted
