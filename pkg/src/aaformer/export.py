"""Assignment-map export: one grayscale PGM per part token plus a CSV of plan and mask."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .attention import LayerTrace

CSV_FIELDS = ("set", "part", "patch", "row", "col", "similarity", "plan", "assigned", "weight")


def part_maps(trace: LayerTrace, head: int, grid: tuple[int, int], image: int | None = None) -> np.ndarray:
    """uint8 [P, rows, cols]: attention weight scaled so each map's max is 255; 0 outside the subset."""
    weights, member = _select(trace, head, image)
    rows, cols = grid
    out = np.zeros(weights.shape, dtype=np.uint8)
    for p in range(weights.shape[0]):
        w = np.where(member[p], weights[p], 0.0)
        top = w.max()
        if top > 0:
            out[p] = np.rint(w / top * 255.0).astype(np.uint8)
    return out.reshape(-1, rows, cols)


def _select(trace: LayerTrace, head: int, image: int | None):
    weights = trace.part_weights
    member = trace.membership()
    if image is not None:
        weights, member = weights[image], member[image]
    if weights.ndim != 3:
        raise ValueError("trace has leading batch axes; pass an image index")
    if not 0 <= head < weights.shape[0]:
        raise IndexError(f"head {head} out of range [0, {weights.shape[0]})")
    return weights[head], member[head]


def write_pgm(path, pixels: np.ndarray, scale: int = 1) -> Path:
    """Binary (P5) 8-bit PGM; ``scale`` repeats each cell into a scale x scale block."""
    px = np.asarray(pixels, dtype=np.uint8)
    if scale > 1:
        px = np.kron(px, np.ones((scale, scale), dtype=np.uint8))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii"))
        fh.write(px.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ValueError("only 8-bit PGM supported")
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def export_maps(traces: list[LayerTrace | None], layer: int, head: int, out_dir, grid: tuple[int, int],
                image: int | None = None, scale: int = 1, prefix: str = "part") -> list[Path]:
    """Write ``<prefix>_L<layer>_H<head>_P<p>.pgm`` per part token and a CSV sidecar."""
    if not 0 <= layer < len(traces) or traces[layer] is None:
        raise IndexError(f"no trace recorded for layer {layer}")
    trace = traces[layer]
    maps = part_maps(trace, head, grid, image)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for p, m in enumerate(maps):
        paths.append(write_pgm(out_dir / f"{prefix}_L{layer}_H{head}_P{p}.pgm", m, scale))
    paths.append(write_plan_csv(out_dir / f"{prefix}_L{layer}_H{head}.csv", trace, head, grid, image))
    return paths


def write_plan_csv(path, trace: LayerTrace, head: int, grid: tuple[int, int], image: int | None = None) -> Path:
    weights, member = _select(trace, head, image)
    cols = grid[1]
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_FIELDS)
        part = 0
        for s, g in enumerate(trace.granularity_sets):
            sim = trace.similarities[s]
            plan = None if trace.plans[s] is None else trace.plans[s].values
            if image is not None:
                sim = sim[image]
                plan = None if plan is None else plan[image]
            sim = sim[head]
            plan = None if plan is None else plan[head]
            for k in range(g):
                for n in range(sim.shape[-1]):
                    w.writerow((
                        s, part, n, n // cols, n % cols,
                        repr(float(sim[k, n])),
                        "" if plan is None else repr(float(plan[k, n])),
                        int(member[part, n]),
                        repr(float(weights[part, n])),
                    ))
                part += 1
    return path


def read_plan_csv(path) -> dict[str, np.ndarray]:
    """Re-read a sidecar into [P, N] arrays keyed by column name (plan is NaN when absent)."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    P = max(int(r["part"]) for r in rows) + 1
    N = max(int(r["patch"]) for r in rows) + 1
    out = {k: np.full((P, N), np.nan) for k in ("similarity", "plan", "weight")}
    out["assigned"] = np.zeros((P, N), dtype=bool)
    out["set"] = np.zeros(P, dtype=np.int64)
    for r in rows:
        p, n = int(r["part"]), int(r["patch"])
        for k in ("similarity", "plan", "weight"):
            if r[k] != "":
                out[k][p, n] = float(r[k])
        out["assigned"][p, n] = r["assigned"] == "1"
        out["set"][p] = int(r["set"])
    return out
