"""Plain-text formats for planted instances and matrices."""

from __future__ import annotations

from typing import Sequence, TextIO

import numpy as np

from coalign.alignment import PlantedInstance, Phrase, TokenSpace, region_from_rect
from coalign.errors import ContractViolation

INSTANCE_MAGIC = "TOKENSPACE1"


def _fmt(v: float) -> str:
    return repr(float(v))


def write_instance(inst: PlantedInstance, fh: TextIO):
    sp = inst.space
    fh.write(f"{INSTANCE_MAGIC}\n")
    fh.write(f"H {sp.H}\nW {sp.W}\nL2 {sp.L2}\nd {sp.d}\nseed {inst.seed}\n")
    fh.write(f"noise {_fmt(inst.noise)}\npart_scale {_fmt(inst.part_scale)}\n")
    fh.write("patches\n")
    for row in sp.patches:
        fh.write(" ".join(_fmt(v) for v in row) + "\n")
    fh.write("words\n")
    for row in sp.words:
        fh.write(" ".join(_fmt(v) for v in row) + "\n")
    fh.write(f"planted {len(inst.rects)}\n")
    for rect, span in zip(inst.rects, inst.spans):
        fh.write(" ".join(str(v) for v in (*rect, *span)) + "\n")


def read_instance(fh: TextIO) -> PlantedInstance:
    lines = [ln for ln in fh.read().splitlines() if ln.strip()]
    if not lines or lines[0].strip() != INSTANCE_MAGIC:
        raise ContractViolation(f"not a {INSTANCE_MAGIC} file")
    pos = 1
    head = {}
    for key in ("H", "W", "L2", "d", "seed", "noise", "part_scale"):
        k, v = lines[pos].split()
        if k != key:
            raise ContractViolation(f"expected {key!r}, found {k!r}")
        head[key] = v
        pos += 1
    H, W, L2, d = (int(head[k]) for k in ("H", "W", "L2", "d"))

    def block(tag, rows):
        nonlocal pos
        if lines[pos].strip() != tag:
            raise ContractViolation(f"expected {tag!r} block")
        data = np.array([[float(v) for v in ln.split()] for ln in lines[pos + 1 : pos + 1 + rows]])
        if data.shape != (rows, d):
            raise ContractViolation(f"{tag} block has shape {data.shape}, expected {(rows, d)}")
        pos += 1 + rows
        return data

    patches = block("patches", H * W)
    words = block("words", L2)
    tag, count = lines[pos].split()
    if tag != "planted":
        raise ContractViolation("expected planted list")
    rects, spans = [], []
    for ln in lines[pos + 1 : pos + 1 + int(count)]:
        t, l, h, w, a, b = (int(v) for v in ln.split())
        rects.append((t, l, h, w))
        spans.append((a, b))
    return PlantedInstance(
        TokenSpace(patches, words, H, W),
        rects,
        spans,
        [region_from_rect(*r, H, W) for r in rects],
        [Phrase(*s) for s in spans],
        int(head["seed"]),
        float(head["noise"]),
        float(head["part_scale"]),
    )


def format_matrix_csv(matrix, row_labels: Sequence[str] | None = None, col_labels: Sequence[str] | None = None) -> str:
    m = np.atleast_2d(np.asarray(matrix, dtype=float))
    lines = []
    if col_labels is not None:
        lines.append(",".join(([""] if row_labels is not None else []) + list(col_labels)))
    for k, row in enumerate(m):
        cells = [f"{v:.12g}" for v in row]
        if row_labels is not None:
            cells.insert(0, row_labels[k])
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"
