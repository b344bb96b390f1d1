"""Seeded byte-level mutators for the grid-file and delta-stream parsers."""

from __future__ import annotations

import random

TOKENS = [b"-", b"nan", b"inf", b"-1e999", b"1e308", b"0", b"-0", b'"', b'""', b'\\"', b"//",
          b"#", b"@", b"<Device>", b"</Device>", b"<Link>", b"\xff", b"\xc3", b"\x00", b"\t",
          b"\r\n", b"\n", b"\n\n", b" ", b"END", b"RESUME 3", b"SWITCH", b"MEAS", b"INJ",
          b"closed", b"open", b"LD2:Q", b":", b"99999999999999999999", b"1_0", b"0x10", b"\xe2\x80\xa8"]


def mutate(data: bytes, rng: random.Random, max_ops: int = 4) -> bytes:
    buf = bytearray(data)
    for _ in range(rng.randint(1, max_ops)):
        op = rng.randrange(8)
        pos = rng.randint(0, len(buf))
        if op == 0 and buf:                     # flip a byte
            buf[min(pos, len(buf) - 1)] = rng.randrange(256)
        elif op == 1:                           # insert a random byte
            buf.insert(pos, rng.randrange(256))
        elif op == 2 and buf:                   # delete a span
            del buf[pos:pos + rng.randint(1, 16)]
        elif op == 3:                           # splice in an interesting token
            buf[pos:pos] = rng.choice(TOKENS)
        elif op == 4:                           # replace a whitespace-separated word
            words = bytes(buf).split(b" ")
            words[rng.randrange(len(words))] = rng.choice(TOKENS)
            buf = bytearray(b" ".join(words))
        elif op == 5:                           # duplicate, drop or swap lines
            lines = bytes(buf).split(b"\n")
            i, j = rng.randrange(len(lines)), rng.randrange(len(lines))
            how = rng.randrange(3)
            if how == 0:
                lines.insert(j, lines[i])
            elif how == 1:
                del lines[i]
            else:
                lines[i], lines[j] = lines[j], lines[i]
            buf = bytearray(b"\n".join(lines))
        elif op == 6:                           # truncate
            del buf[pos:]
        else:                                   # copy a chunk elsewhere
            a = rng.randint(0, len(buf))
            buf[pos:pos] = buf[a:a + rng.randint(1, 32)]
    return bytes(buf)


def chunks(data: bytes, rng: random.Random):
    """Split ``data`` at random points, the way a socket might deliver it."""
    out, i = [], 0
    while i < len(data):
        k = rng.randint(1, 24)
        out.append(data[i:i + k])
        i += k
    return out


def run_fuzz(seed_inputs, parse, allowed, n: int, seed: int = 0):
    """Feed ``n`` mutants to ``parse``; return the mutants that raised something not in ``allowed``.

    Returns ``(crashes, rejected)`` where ``rejected`` counts structured errors.
    """
    rng = random.Random(seed)
    crashes, rejected = [], 0
    for _ in range(n):
        data = mutate(rng.choice(seed_inputs), rng)
        try:
            parse(data, rng)
        except allowed:
            rejected += 1
        except Exception as exc:                # noqa: BLE001 - anything else is a crash
            crashes.append((data, repr(exc)))
    return crashes, rejected
