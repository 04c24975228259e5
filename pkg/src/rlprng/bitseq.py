"""Binary sequences, the +/-1 mapping, bitfile I/O and the bit-image rendering."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Union

import numpy as np
from scipy import ndimage


class BitSequence:
    """Immutable ordered sequence of 0/1 symbols.

    Stored as a read-only ``uint8`` array, so reads and single-bit copies are
    cheap and no operation can mutate a sequence in place.
    """

    __slots__ = ("_bits",)

    def __init__(self, bits: Union[Iterable[int], np.ndarray, "BitSequence"] = ()):
        if isinstance(bits, BitSequence):
            arr = bits._bits
        else:
            arr = np.asarray(list(bits) if not isinstance(bits, np.ndarray) else bits)
            if arr.size == 0:
                arr = np.zeros(0, dtype=np.uint8)
            if arr.ndim != 1:
                raise ValueError(f"bit sequence must be one-dimensional, got shape {arr.shape}")
            if not np.all((arr == 0) | (arr == 1)):
                raise ValueError("bit sequence elements must be 0 or 1")
            arr = arr.astype(np.uint8, copy=True)
        arr.flags.writeable = False
        self._bits = arr

    @classmethod
    def from_string(cls, text: str) -> "BitSequence":
        text = text.strip()
        bad = [c for c in text if c not in "01"]
        if bad:
            raise ValueError(f"invalid bit character {bad[0]!r}")
        return cls(np.frombuffer(text.encode("ascii"), dtype=np.uint8) - ord("0"))

    @property
    def bits(self) -> np.ndarray:
        return self._bits

    @property
    def length(self) -> int:
        return int(self._bits.size)

    def __len__(self) -> int:
        return int(self._bits.size)

    def __getitem__(self, idx):
        if isinstance(idx, slice):
            return BitSequence(self._bits[idx])
        return int(self._bits[idx])

    def __iter__(self):
        return (int(b) for b in self._bits)

    def __eq__(self, other) -> bool:
        if not isinstance(other, BitSequence):
            return NotImplemented
        return np.array_equal(self._bits, other._bits)

    def __hash__(self) -> int:
        return hash(self._bits.tobytes())

    def __repr__(self) -> str:
        s = self.to_string()
        if len(s) > 64:
            s = s[:61] + "..."
        return f"BitSequence('{s}')"

    def to_string(self) -> str:
        return (self._bits + ord("0")).tobytes().decode("ascii")

    def complement(self) -> "BitSequence":
        return BitSequence(1 - self._bits)

    def reversed(self) -> "BitSequence":
        return BitSequence(self._bits[::-1])


def set_bit(seq: BitSequence, n: int, v: int) -> BitSequence:
    """Return a copy of `seq` whose 1-based position `n` holds `v`."""
    if not 1 <= n <= len(seq):
        raise IndexError(f"bit position {n} outside 1..{len(seq)}")
    if v not in (0, 1):
        raise ValueError(f"bit value must be 0 or 1, got {v!r}")
    arr = seq.bits.copy()
    arr[n - 1] = v
    return BitSequence(arr)


def append_pattern(seq: BitSequence, pattern: BitSequence) -> BitSequence:
    if len(pattern) == 0:
        raise ValueError("cannot append an empty pattern")
    return BitSequence(np.concatenate([seq.bits, pattern.bits]))


def to_pm1(seq: BitSequence) -> np.ndarray:
    """Map 1 -> +1.0 and 0 -> -1.0."""
    return 2.0 * seq.bits.astype(np.float64) - 1.0


@dataclass(frozen=True)
class BitImageSpec:
    """Layout of a bit image.

    `smoothing` is the width of a square box filter applied once after
    block expansion; ``None`` (or 1) disables smoothing.
    """

    rows: int = 40
    cols: int = 25
    block_px: int = 10
    smoothing: Optional[int] = 3

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be positive")
        if self.block_px < 1:
            raise ValueError("block_px must be >= 1")
        if self.smoothing is not None and self.smoothing < 1:
            raise ValueError("smoothing width must be >= 1 or None")


def render_image(seq: BitSequence, spec: BitImageSpec = BitImageSpec()) -> np.ndarray:
    """Render bits row-major into a grayscale ``uint8`` raster.

    Ones become white blocks and zeros black blocks of ``block_px`` pixels,
    the first bit at the top-left. Smoothing uses a box filter with
    edge-replicated borders.
    """
    if len(seq) != spec.rows * spec.cols:
        raise ValueError(
            f"sequence has {len(seq)} bits but image grid is {spec.rows}x{spec.cols}"
        )
    grid = seq.bits.reshape(spec.rows, spec.cols).astype(np.float64) * 255.0
    img = np.kron(grid, np.ones((spec.block_px, spec.block_px)))
    if spec.smoothing is not None and spec.smoothing > 1:
        img = ndimage.uniform_filter(img, size=spec.smoothing, mode="nearest")
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_pgm(path: Union[str, Path], raster: np.ndarray) -> None:
    """Write a binary (P5) PGM with maxval 255."""
    raster = np.asarray(raster, dtype=np.uint8)
    if raster.ndim != 2:
        raise ValueError("raster must be two-dimensional")
    h, w = raster.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(raster.tobytes())


def read_pgm(path: Union[str, Path]) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    if tokens[0] != "P5":
        raise ValueError(f"not a binary PGM: magic {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise ValueError(f"unsupported maxval {maxval}")
    pos += 1
    return np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w).copy()


class BitfileError(ValueError):
    pass


def write_bitfile(path: Union[str, Path], seq: BitSequence) -> None:
    Path(path).write_text(seq.to_string() + "\n", encoding="ascii")


def read_bitfile(path: Union[str, Path]) -> BitSequence:
    """Parse a text file of '0'/'1' characters.

    Line breaks are tolerated (a single trailing newline is the canonical
    form); any other character raises `BitfileError` naming line and column.
    """
    text = Path(path).read_text(encoding="ascii", errors="replace")
    chunks = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\r")
        for col, ch in enumerate(line, start=1):
            if ch not in "01":
                raise BitfileError(f"{path}: line {lineno}, column {col}: invalid character {ch!r}")
        chunks.append(line)
    return BitSequence.from_string("".join(chunks))
