"""Delimited and image output formats.

CSV files begin with a `# schema=<name>.v<n>` comment line so readers can
reject layouts they do not understand; floats carry 9 significant digits.
Images are binary PPM (P6, maxval 255) with channel values rounded half
away from zero.
"""

from __future__ import annotations

import csv
import io
from pathlib import Path

import numpy as np


class FormatError(Exception):
    pass


def format_value(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.9g}"


def emit_csv(path, schema: str, header: list[str], rows) -> None:
    """Write a schema-tagged CSV; rows must match the header width."""
    buf = io.StringIO()
    buf.write(f"# schema={schema}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        row = list(row)
        if len(row) != len(header):
            raise FormatError(
                f"row width {len(row)} does not match header width {len(header)}")
        writer.writerow([format_value(v) for v in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path, expected_schema: str | None = None
             ) -> tuple[str, list[str], list[list[str]]]:
    """Read a schema-tagged CSV; returns (schema, header, rows)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# schema="):
        raise FormatError(f"{path}: missing schema comment line")
    schema = lines[0][len("# schema="):].strip()
    if expected_schema is not None and schema != expected_schema:
        raise FormatError(
            f"{path}: schema {schema!r}, expected {expected_schema!r}")
    reader = csv.reader(lines[1:])
    parsed = [row for row in reader if row]
    if not parsed:
        raise FormatError(f"{path}: missing header row")
    return schema, parsed[0], parsed[1:]


def emit_ppm(path, image: np.ndarray) -> None:
    """Write a binary PPM; image is (H, W) or (H, W, 3) with values in [0, 1]."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    if image.ndim != 3 or image.shape[2] != 3:
        raise FormatError(f"image must be (H, W) or (H, W, 3), got {image.shape}")
    if image.size == 0:
        raise FormatError("image must be nonempty")
    if image.min() < 0.0 or image.max() > 1.0:
        raise FormatError("image values must lie in [0, 1]")
    h, w = image.shape[:2]
    # round half away from zero; values are nonnegative here
    channels = np.floor(image * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(channels.tobytes())


def tile_fields(fields: np.ndarray, cols: int | None = None,
                pad: int = 1) -> np.ndarray:
    """Tile per-sample scalar fields (n, H, W) into one [0, 1] image.

    Fields are jointly min-max normalized so relative magnitudes survive;
    padding cells are set to 0.
    """
    fields = np.asarray(fields, dtype=np.float64)
    if fields.ndim != 3:
        raise FormatError(f"expected (n, H, W) fields, got {fields.shape}")
    n, h, w = fields.shape
    lo, hi = fields.min(), fields.max()
    scaled = (fields - lo) / (hi - lo) if hi > lo else np.zeros_like(fields)
    if cols is None:
        cols = int(np.ceil(np.sqrt(n)))
    rows = int(np.ceil(n / cols))
    canvas = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad))
    for i in range(n):
        r, c = divmod(i, cols)
        top = pad + r * (h + pad)
        left = pad + c * (w + pad)
        canvas[top:top + h, left:left + w] = scaled[i]
    return canvas
