"""Flip one bit of a checkpoint tensor file (tamper-test helper)."""
import sys
from pathlib import Path

TENSOR_WIDTH = 8  # float64


def main():
    if len(sys.argv) not in (2, 3):
        print("Usage: corrupt_one_byte.py <tensor file> [element]")
        raise SystemExit(2)

    p = Path(sys.argv[1])
    element = int(sys.argv[2]) if len(sys.argv) == 3 else 0
    b = bytearray(p.read_bytes())
    if len(b) < TENSOR_WIDTH * (element + 1):
        print(f"{p} has fewer than {element + 1} float64 values.")
        raise SystemExit(2)

    # lowest mantissa byte of the chosen value: a change no reader would spot
    idx = element * TENSOR_WIDTH
    b[idx] ^= 0x01
    p.write_bytes(bytes(b))
    print(f"Corrupted 1 byte at offset {idx} in {p}")


if __name__ == "__main__":
    main()
