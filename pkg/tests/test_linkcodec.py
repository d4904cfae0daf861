import random

import pytest
from hypothesis import given, strategies as st

from heaplab.errors import LinkCorrupt, OffsetInvalid
from heaplab.linkcodec import (
    KEYED_MIX,
    MODEXP,
    MODEXP_PRIMES,
    OFFSET_LIMIT,
    LinkCodec,
    decode,
    derive_key,
    encode,
    modexp_key,
)

from oracles import extended_euclid, square_and_multiply

CODEC_IDS = [KEYED_MIX, MODEXP]
offsets = st.integers(min_value=1, max_value=OFFSET_LIMIT // 8 - 1).map(lambda n: n * 8)


def test_textbook_rsa_oracle():
    # n = 61 * 53
    assert square_and_multiply(65, 17, 3233) == 2790
    assert square_and_multiply(2790, 2753, 3233) == 65
    g, x, _ = extended_euclid(17, 60 * 52)
    assert g == 1 and x % (60 * 52) == 2753


def test_textbook_key_through_codec():
    key = modexp_key(61, 53, e=17)
    assert (key.n, key.e, key.d) == (3233, 17, 2753)
    word = encode(64, key)
    assert word & ((1 << 48) - 1) == square_and_multiply(64, 17, 3233)
    assert decode(word, key) == 64


def test_derive_key_is_deterministic():
    assert derive_key(42) == derive_key(42)
    assert derive_key(42, MODEXP) == derive_key(42, MODEXP)
    assert derive_key(42) != derive_key(43)


def test_keyed_mix_k1_always_odd():
    assert all(derive_key(s).k1 & 1 for s in range(10_000))


@pytest.mark.parametrize("seed", [0, 1, 7, 15, 16, 255, 9999])
def test_modexp_exponents_are_inverse(seed):
    key = derive_key(seed, MODEXP)
    primes = [p for p in MODEXP_PRIMES if key.n % p == 0]
    assert len(primes) == 2 and primes[0] * primes[1] == key.n
    phi = (primes[0] - 1) * (primes[1] - 1)
    g, x, _ = extended_euclid(key.e, phi)
    assert g == 1
    assert x % phi == key.d
    assert key.n > OFFSET_LIMIT


@pytest.mark.parametrize("codec", CODEC_IDS)
def test_null_is_canonical(codec):
    key = derive_key(3, codec)
    assert encode(0, key) == 0
    assert decode(0, key) == 0


@pytest.mark.parametrize("codec", CODEC_IDS)
@given(off=offsets, seed=st.integers(0, 2**32))
def test_round_trip(codec, off, seed):
    key = derive_key(seed, codec)
    word = encode(off, key)
    assert word != 0
    assert decode(word, key) == off


@pytest.mark.parametrize("bad", [-8, 3, 12, OFFSET_LIMIT])
def test_encode_rejects_invalid_offsets(bad):
    with pytest.raises(OffsetInvalid):
        encode(bad, derive_key(0))


@pytest.mark.parametrize("codec", CODEC_IDS)
def test_injective_over_small_arena(codec):
    key = derive_key(11, codec)
    words = {encode(off, key) for off in range(8, 1 << 16, 8)}
    assert len(words) == (1 << 16) // 8 - 1


def test_decode_enforces_arena_bound():
    key = derive_key(5)
    word = encode(4096, key)
    assert decode(word, key, limit=8192) == 4096
    with pytest.raises(LinkCorrupt):
        decode(word, key, limit=4096)


@pytest.mark.parametrize("codec", CODEC_IDS)
def test_wrong_key_is_detected(codec):
    rng = random.Random(8)
    trials, escaped = 20_000, 0
    for _ in range(trials):
        off = rng.randrange(1, 1 << 17) * 8
        word = encode(off, derive_key(rng.getrandbits(32), codec))
        try:
            decode(word, derive_key(rng.getrandbits(32), codec), limit=1 << 20)
            escaped += 1
        except LinkCorrupt:
            pass
    assert escaped / trials <= 2 ** -15


def test_bound_codec_memoises_consistently():
    lc = LinkCodec(derive_key(9), 1 << 20)
    word = lc.encode(512)
    assert lc.encode(512) == word == encode(512, lc.key)
    assert lc.decode(word) == 512
    with pytest.raises(LinkCorrupt):
        lc.decode(512)
    with pytest.raises(LinkCorrupt):
        lc.decode(512)
