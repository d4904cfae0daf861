"""
Encoded metadata links
======================

Every link stored in a free chunk goes through a keyed codec.  A value
written by someone who does not know the key fails to decode.
"""

import random

from heaplab import KEYED_MIX, MODEXP, decode, derive_key, encode
from heaplab.errors import LinkCorrupt
from heaplab.linkcodec import modexp_key

for codec in (KEYED_MIX, MODEXP):
    key = derive_key(7, codec)
    word = encode(0x40, key)
    print(f"{codec:<10} encode(0x40) = {word:#018x}  decode -> {decode(word, key):#x}")

# textbook RSA numbers: n = 61 * 53, e = 17, d = 2753
tb = modexp_key(61, 53, e=17)
print("\ntextbook key:", tb.n, tb.e, tb.d, " 65^17 mod 3233 =", pow(65, 17, 3233))

# an attacker plants raw offsets
key = derive_key(7)
rng = random.Random(1)
caught = 0
for _ in range(10_000):
    try:
        decode(rng.randrange(1, 1 << 14) * 8, key, limit=1 << 17)
    except LinkCorrupt:
        caught += 1
print(f"\nraw offsets rejected: {caught} / 10000")

# and a single flipped bit
word = encode(0x1230, key)
for bit in (0, 5, 30, 47, 50, 63):
    try:
        decode(word ^ (1 << bit), key, limit=1 << 17)
        print(f"bit {bit:2d}: accepted")
    except LinkCorrupt:
        print(f"bit {bit:2d}: rejected")
