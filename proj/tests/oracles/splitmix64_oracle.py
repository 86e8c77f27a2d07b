#!/usr/bin/env python3
# Standalone SplitMix64 reference used to freeze the golden values in
# tests/unit/test_corpus.cpp. Independent of the C++ sources.
MASK = (1 << 64) - 1


def splitmix64_first(n):
    z = (n + 0x9E3779B97F4A7C15) & MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
    return z ^ (z >> 31)


def private_label(a, b, c):
    return (splitmix64_first(a + c) + b) % 2


if __name__ == "__main__":
    for n in (0, 3, 4, 18):
        print(f"hash64({n}) = 0x{splitmix64_first(n):016X}")
    print("private_label(2,5,1) =", private_label(2, 5, 1))
    triples = [(a, b, c) for a in range(10) for b in range(10) for c in range(10)]
    pub = [1 if a == b else 0 for a, b, c in triples]
    priv = [private_label(a, b, c) for a, b, c in triples]
    n = len(triples)
    mp, mq = sum(pub) / n, sum(priv) / n
    cov = sum((p - mp) * (q - mq) for p, q in zip(pub, priv)) / n
    vp = sum((p - mp) ** 2 for p in pub) / n
    vq = sum((q - mq) ** 2 for q in priv) / n
    print("mean_priv =", mq, "mean_pub =", mp, "corr =", cov / (vp * vq) ** 0.5)
    print("low bits 0..18:", [splitmix64_first(s) & 1 for s in range(19)])


def rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


def xoshiro_outputs(seed, count):
    s, x = [], seed
    for _ in range(4):
        x = (x + 0x9E3779B97F4A7C15) & MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        s.append(z ^ (z >> 31))
    out = []
    for _ in range(count):
        out.append((rotl((s[1] * 5) & MASK, 7) * 9) & MASK)
        t = (s[1] << 17) & MASK
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
    return out


def fnv1a64(data):
    h = 0xCBF29CE484222325
    for ch in data:
        h = ((h ^ ch) * 0x100000001B3) & MASK
    return h


if __name__ == "__main__":
    print("xoshiro256** seed 42:", [f"0x{v:016X}" for v in xoshiro_outputs(42, 3)])
    print("fnv1a64('corpus') =", f"0x{fnv1a64(b'corpus'):016X}")
