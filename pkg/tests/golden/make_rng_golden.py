"""Reference generator for the pinned RNG golden file.

Standalone reimplementation of the seeded sampling pipeline (SHA-256 stream
keying -> SplitMix64 -> uniform / Box-Muller transforms), kept free of any
package imports so it stays an independent oracle. Run once to (re)produce
rng_golden.json; the library samplers must reproduce these values exactly.

    python tests/golden/make_rng_golden.py > tests/golden/rng_golden.json
"""

import hashlib
import json
import math
from decimal import Decimal, ROUND_HALF_EVEN

MASK64 = (1 << 64) - 1


def stream_seed(master_seed, site_id, round_index, purpose):
    key = f"{master_seed}|{site_id}|{round_index}|{purpose}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "big")


def splitmix64(state):
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, (z ^ (z >> 31)) & MASK64


class Stream:
    def __init__(self, master_seed, site_id, round_index, purpose):
        self.state = stream_seed(master_seed, site_id, round_index, purpose)

    def next_u64(self):
        self.state, out = splitmix64(self.state)
        return out

    def uniform(self):
        return (self.next_u64() >> 11) * 2.0**-53

    def normal(self):
        u1 = ((self.next_u64() >> 11) + 1) * 2.0**-53
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)


def q3(x):
    return Decimal(repr(x)).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN)


def q6(x):
    return Decimal(repr(x)).quantize(Decimal("0.000001"), rounding=ROUND_HALF_EVEN)


def lognormal_ms(stream, mu, sigma):
    value = q3(math.exp(mu + sigma * stream.normal()))
    return max(value, Decimal("0.001"))


def main():
    cases = []
    for master_seed, site_id, round_index, purpose in [
        (42, "site00001", 0, "latency:appnexus"),
        (42, "site00001", 1, "latency:appnexus"),
        (42, "site00002", 0, "latency:appnexus"),
        (7, "alpha", 0, "bid:criteo:slot-a"),
        (123456789, "site-x", 3, "adserver_latency"),
    ]:
        s = Stream(master_seed, site_id, round_index, purpose)
        raw = [s.next_u64() for _ in range(4)]
        s = Stream(master_seed, site_id, round_index, purpose)
        uniforms = [repr(s.uniform()) for _ in range(4)]
        s = Stream(master_seed, site_id, round_index, purpose)
        normals = [repr(s.normal()) for _ in range(2)]
        s = Stream(master_seed, site_id, round_index, purpose)
        logn = [str(lognormal_ms(s, 5.0, 0.5)) for _ in range(3)]
        cases.append(
            {
                "master_seed": master_seed,
                "site_id": site_id,
                "round_index": round_index,
                "purpose": purpose,
                "stream_seed": stream_seed(master_seed, site_id, round_index, purpose),
                "raw_u64": raw,
                "uniforms": uniforms,
                "normals": normals,
                "lognormal_ms_mu5_sigma0.5": logn,
            }
        )
    print(json.dumps({"cases": cases}, indent=2))


if __name__ == "__main__":
    main()
