"""CSV output with a provenance comment line (seed and config hash) at the top."""

from __future__ import annotations

import csv
import io
from pathlib import Path


def header_line(seed: int, config_sha: str) -> str:
    return f"# seed={seed} config_sha={config_sha}"


def fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows, seed: int, config_sha: str, append: bool = False) -> None:
    """Write (or append to) a CSV whose first line is the provenance comment."""
    path = Path(path)
    if append and path.exists() and path.stat().st_size > 0:
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        if len(lines) < 2 or lines[1] != ",".join(columns):
            raise ValueError(f"{path}: cannot append, header differs from {columns}")
        mode, preamble = "a", []
    else:
        mode, preamble = "w", [header_line(seed, config_sha), ",".join(columns)]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in rows:
        w.writerow([fmt(v) for v in row])
    with open(path, mode, newline="") as fh:
        if preamble:
            fh.write("\n".join(preamble) + "\n")
        fh.write(buf.getvalue())


def read_csv(path) -> tuple[str, list[dict[str, str]]]:
    """Provenance comment and rows as dicts."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    comment = lines[0] if lines and lines[0].startswith("#") else ""
    body = lines[1:] if comment else lines
    return comment, list(csv.DictReader(body))
