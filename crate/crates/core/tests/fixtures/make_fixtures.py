"""Regenerates the golden tensor files with an encoder independent of the crate."""
import math
import struct
from pathlib import Path

HERE = Path(__file__).parent


def tensor_file(dtype_code, fmt, shape, values):
    out = b"TDAE" + struct.pack("<BBB", 1, dtype_code, len(shape))
    out += b"".join(struct.pack("<Q", d) for d in shape)
    out += b"".join(struct.pack("<" + fmt, v) for v in values)
    return out


fixtures = {
    "f32_2x3.tdae": tensor_file(1, "f", [2, 3], [1.0, -2.5, 0.125, 3.0e8, -0.0, 7.0]),
    "f64_4.tdae": tensor_file(2, "d", [4], [math.pi, -1e-300, 2.0, 1.0 / 3.0]),
    "u8_3x2x2.tdae": tensor_file(3, "B", [3, 2, 2], [i % 4 for i in range(12)]),
}

for name, data in fixtures.items():
    (HERE / name).write_bytes(data)
