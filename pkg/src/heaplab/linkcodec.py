"""Keyed, verifiable encoding of heap metadata links.

Every link word that the allocator keeps inside free chunks (tree links,
same-size chains, size-class list heads, deferred-free cache slots) is
stored through one of these codecs.  An encoded link packs a 16-bit
verification tag into bits 48..63 and a transformed offset into bits 0..47;
decoding recomputes the tag from the recovered offset, so a value written by
someone who does not hold the key almost never decodes.

Two codecs share the interface:

``keyed-mix``
    ``low = ((off ^ k2) * k1) mod 2**48`` with ``k1`` odd, hence invertible.
``modexp``
    ``low = off ** e mod n`` for a small RSA-style modulus.  Desk scale only;
    the primes are far too small to mean anything cryptographically.

The all-zero word is the canonical null link under both codecs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

from .errors import LinkCorrupt, OffsetInvalid

KEYED_MIX = "keyed-mix"
MODEXP = "modexp"
CODECS = (KEYED_MIX, MODEXP)

MASK64 = (1 << 64) - 1
MASK48 = (1 << 48) - 1
TAG_SHIFT = 48
OFFSET_LIMIT = 1 << 40

# splitmix64 constants (Steele, Lea, Flood 2014)
GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_C1 = 0xBF58476D1CE4E5B9
MIX_C2 = 0x94D049BB133111EB

# Primes in [2**20, 2**23): any pair gives 2**40 <= n < 2**46, so every
# offset below OFFSET_LIMIT is encodable and the residue fits in 48 bits.
MODEXP_PRIMES = (
    1363121, 1453643, 1535111, 1656223, 1769563, 1838203, 2314003, 2849617,
    3765089, 4116209, 4360627, 5305273, 5543903, 5937361, 6509017, 7937927,
)
DEFAULT_EXPONENT = 65537


def mix64(x: int) -> int:
    """splitmix64 finalizer: a bijective multiply-xor-shift on 64-bit words."""
    x &= MASK64
    x ^= x >> 30
    x = (x * MIX_C1) & MASK64
    x ^= x >> 27
    x = (x * MIX_C2) & MASK64
    return x ^ (x >> 31)


def splitmix64(seed: int) -> Iterator[int]:
    state = seed & MASK64
    while True:
        state = (state + GOLDEN_GAMMA) & MASK64
        yield mix64(state)


def hash16(value: int, key: int) -> int:
    return mix64(value ^ key) >> 48


@dataclass(frozen=True)
class CodecKey:
    codec_id: str
    k1: int
    k2: int
    tag_key: int
    guard_key: int
    n: int = 0
    e: int = 0
    d: int = 0
    k1_inv: int = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.codec_id not in CODECS:
            raise ValueError(f"unknown codec {self.codec_id!r}")
        if not self.k1 & 1:
            raise ValueError("k1 must be odd")
        object.__setattr__(self, "k1_inv", pow(self.k1, -1, 1 << 48))


def _key_words(seed: int) -> tuple[int, int, int, int]:
    rng = splitmix64(seed)
    k1 = next(rng) | 1
    # bit 47 set keeps (off ^ k2) nonzero for every off < 2**40, so no valid
    # offset can encode to the null word
    k2 = (next(rng) & MASK48) | (1 << 47)
    return k1, k2, next(rng), next(rng)


def modexp_key(p: int, q: int, e: int = DEFAULT_EXPONENT, seed: int = 0) -> CodecKey:
    """Build a modexp key from an explicit prime pair.

    ``e`` is bumped to the next odd value coprime with phi(n) if needed.
    """
    phi = (p - 1) * (q - 1)
    while math.gcd(e, phi) != 1:
        e += 2
    k1, k2, tag_key, guard_key = _key_words(seed)
    return CodecKey(MODEXP, k1, k2, tag_key, guard_key, n=p * q, e=e, d=pow(e, -1, phi))


def derive_key(seed: int, codec_id: str = KEYED_MIX) -> CodecKey:
    if codec_id == KEYED_MIX:
        return CodecKey(KEYED_MIX, *_key_words(seed))
    if codec_id == MODEXP:
        count = len(MODEXP_PRIMES)
        i = seed % count
        j = (i + 1 + (seed // count) % (count - 1)) % count
        return modexp_key(MODEXP_PRIMES[i], MODEXP_PRIMES[j], seed=seed)
    raise ValueError(f"unknown codec {codec_id!r}")


def _transform(off: int, key: CodecKey) -> int:
    if key.codec_id == KEYED_MIX:
        return ((off ^ key.k2) * key.k1) & MASK48
    return pow(off, key.e, key.n)


def _untransform(low: int, key: CodecKey) -> int:
    if key.codec_id == KEYED_MIX:
        return ((low * key.k1_inv) & MASK48) ^ key.k2
    if low >= key.n:
        return -1
    return pow(low, key.d, key.n)


def encode(off: int, key: CodecKey) -> int:
    if off == 0:
        return 0
    if off < 0 or off & 7 or off >= OFFSET_LIMIT or (key.n and off >= key.n):
        raise OffsetInvalid(f"cannot encode offset {off:#x}")
    return (hash16(off, key.tag_key) << TAG_SHIFT) | _transform(off, key)


def decode(link: int, key: CodecKey, limit: int = OFFSET_LIMIT) -> int:
    """Recover the offset behind ``link``; 0 means null.

    Raises LinkCorrupt when the tag does not match or the recovered offset
    is misaligned or not below ``limit``.
    """
    if link == 0:
        return 0
    off = _untransform(link & MASK48, key)
    if off <= 0 or off & 7 or off >= limit:
        raise LinkCorrupt(f"link word {link:#018x} decodes outside the arena")
    if hash16(off, key.tag_key) != link >> TAG_SHIFT:
        raise LinkCorrupt(f"link word {link:#018x} fails tag verification")
    return off


class LinkCodec:
    """A codec bound to one key and one arena bound."""

    hardened = True

    def __init__(self, key: CodecKey, limit: int = OFFSET_LIMIT):
        self.key = key
        self.limit = limit
        # memo tables; only successful results are cached
        self._enc: dict[int, int] = {0: 0}
        self._dec: dict[int, int] = {0: 0}

    def encode(self, off: int) -> int:
        word = self._enc.get(off)
        if word is None:
            word = self._enc[off] = encode(off, self.key)
        return word

    def decode(self, link: int) -> int:
        off = self._dec.get(link)
        if off is None:
            off = self._dec[link] = decode(link, self.key, self.limit)
        return off


class PlainCodec:
    """Identity codec for the undefended baseline: links stored raw, unchecked."""

    hardened = False

    def __init__(self, key: CodecKey | None = None, limit: int = OFFSET_LIMIT):
        self.key = key
        self.limit = limit

    def encode(self, off: int) -> int:
        return off

    def decode(self, link: int) -> int:
        return link
