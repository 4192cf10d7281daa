"""Result tables and image grids written by the command-line tools."""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError, FormatError


def fmt(value: float) -> str:
    """Six significant digits, independent of locale."""
    return format(float(value), ".6g")


@dataclass(frozen=True)
class MseRow:
    model: str
    rate_bpi: float
    train_mse: float
    test_mse: float

    @property
    def gap(self) -> float:
        return self.test_mse - self.train_mse


@dataclass
class MseReport:
    rows: list[MseRow] = field(default_factory=list)

    COLUMNS = ("model", "rate_bpi", "train_mse", "test_mse", "gap")

    def add(self, model: str, rate_bpi: float, train_mse: float, test_mse: float) -> MseRow:
        row = MseRow(model, rate_bpi, train_mse, test_mse)
        self.rows.append(row)
        return row

    def _cells(self) -> list[list[str]]:
        return [[r.model, fmt(r.rate_bpi), fmt(r.train_mse), fmt(r.test_mse), fmt(r.gap)] for r in self.rows]

    def to_table(self) -> str:
        cells = [list(self.COLUMNS)] + self._cells()
        widths = [max(len(row[i]) for row in cells) for i in range(len(self.COLUMNS))]
        lines = []
        for row in cells:
            # model id left-aligned, numbers right-aligned
            parts = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
            lines.append("  ".join(parts).rstrip())
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        w.writerows(self._cells())
        return buf.getvalue()


def image_shape_for(width: int) -> tuple[int, int]:
    side = math.isqrt(width)
    return (side, side) if side * side == width else (1, width)


@dataclass
class ImageGrid:
    rows: int
    cols: int
    cell_w: int
    cell_h: int
    pixels: np.ndarray  # uint8, (rows * cell_h) x (cols * cell_w)

    def __post_init__(self):
        if min(self.rows, self.cols, self.cell_w, self.cell_h) <= 0:
            raise DomainError("grid dimensions must be positive")
        expected = (self.rows * self.cell_h, self.cols * self.cell_w)
        if self.pixels.shape != expected or self.pixels.dtype != np.uint8:
            raise DomainError(f"grid buffer must be uint8 {expected}, got {self.pixels.dtype} {self.pixels.shape}")

    @property
    def width(self) -> int:
        return self.cols * self.cell_w

    @property
    def height(self) -> int:
        return self.rows * self.cell_h

    @classmethod
    def from_images(cls, images, rows: int, cols: int, cell_shape: tuple[int, int]) -> "ImageGrid":
        """Tile flattened images in ``[0, 1]`` row-major; missing cells stay black."""
        if rows <= 0 or cols <= 0:
            raise DomainError(f"grid needs positive rows and cols, got {rows}x{cols}")
        h, w = cell_shape
        images = np.asarray(images, dtype=np.float64)
        if images.shape[0] > rows * cols:
            raise DomainError(f"{images.shape[0]} images do not fit a {rows}x{cols} grid")
        cells = np.rint(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8).reshape(-1, h, w)
        buf = np.zeros((rows * h, cols * w), dtype=np.uint8)
        for k, cell in enumerate(cells):
            r, c = divmod(k, cols)
            buf[r * h:(r + 1) * h, c * w:(c + 1) * w] = cell
        return cls(rows, cols, w, h, buf)

    def cell(self, r: int, c: int) -> np.ndarray:
        return self.pixels[r * self.cell_h:(r + 1) * self.cell_h, c * self.cell_w:(c + 1) * self.cell_w]

    def to_pgm(self) -> bytes:
        return f"P5\n{self.width} {self.height}\n255\n".encode("ascii") + self.pixels.tobytes()


_PGM_HEADER = re.compile(rb"P5\s+(\d+)\s+(\d+)\s+255\s")


def read_pgm(blob: bytes) -> np.ndarray:
    """Parse a binary P5 file with maxval 255 (no comments)."""
    m = _PGM_HEADER.match(blob)
    if m is None:
        raise FormatError("not a P5 file with maxval 255")
    w, h = int(m.group(1)), int(m.group(2))
    if len(blob) - m.end() != w * h:
        raise FormatError(f"PGM payload holds {len(blob) - m.end()} bytes, expected {w * h}")
    return np.frombuffer(blob, np.uint8, w * h, m.end()).reshape(h, w)
