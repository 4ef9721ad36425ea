"""Writes golden.asnap and golden_moments.csv with an encoder independent of the crate."""
import struct
from fractions import Fraction

layers = [
    (0, [[1.0, 2.0], [3.0, -4.0]]),
    (1, [[0.5, 0.25], [-1.5, 2.0]]),
]

buf = b"ABES" + struct.pack("<IQBI", 1, 7, 1, len(layers))
for lid, rows in layers:
    buf += struct.pack("<III", lid, len(rows), len(rows[0]))
    for row in rows:
        buf += struct.pack(f"<{len(row)}f", *row)
open("golden.asnap", "wb").write(buf)

out = ["layer,m1,m2,m3,m4"]
for lid, rows in layers:
    n, d = len(rows), len(rows[0])
    x = [[Fraction(v) for v in r] for r in rows]
    mu = [sum(r[i] for r in x) / n for i in range(d)]
    s = [[sum(r[i] * r[j] for r in x) / n for j in range(d)] for i in range(d)]
    m1 = sum(mu)
    m2 = sum(v * v for v in mu)
    m3 = sum(s[i][i] for i in range(d))
    m4 = sum(s[i][j] for i in range(d) for j in range(d) if i != j)
    out.append(",".join([str(lid)] + [repr(float(v)) for v in (m1, m2, m3, m4)]))
open("golden_moments.csv", "w").write("\n".join(out) + "\n")
