"""Trace CSV and metadata serialization.

The CSV column schema is a fixed contract (consumed by the plotting
package and by `diagnose`):

    t, y_1..y_n, yref_1..yref_n, e_norm, phi, funnel_ratio,
    xi_{i}_1..xi_{i}_n for i = 1..r-1, theta_{i}_norm for i = 1..r-1,
    u_1..u_n, h

Floats are written with 17 significant digits so that parsing a file
reproduces the in-memory doubles bit-exactly.
"""

from __future__ import annotations

import json
from typing import List, Tuple

import numpy as np

from .integrator import SimResult

FLOAT_FMT = "{:.17g}"


def csv_header(r: int, n: int) -> List[str]:
    cols = ["t"]
    cols += [f"y_{i}" for i in range(1, n + 1)]
    cols += [f"yref_{i}" for i in range(1, n + 1)]
    cols += ["e_norm", "phi", "funnel_ratio"]
    for i in range(1, r):
        cols += [f"xi_{i}_{j}" for j in range(1, n + 1)]
    cols += [f"theta_{i}_norm" for i in range(1, r)]
    cols += [f"u_{i}" for i in range(1, n + 1)]
    cols += ["h"]
    return cols


def trace_matrix(sim: SimResult) -> np.ndarray:
    """Assemble the trace in the fixed column order."""
    N = sim.t.size
    e_norm = np.linalg.norm(sim.e, axis=1)
    theta_norms = sim.theta_norms()
    blocks = [
        sim.t[:, None],
        sim.y,
        sim.y_ref,
        e_norm[:, None],
        sim.phi[:, None],
        sim.funnel_ratio[:, None],
        sim.xi.reshape(N, (sim.r - 1) * sim.n),
        theta_norms,
        sim.u,
        sim.h[:, None],
    ]
    return np.hstack(blocks)


def write_trace_csv(path, sim: SimResult) -> None:
    header = csv_header(sim.r, sim.n)
    data = trace_matrix(sim)
    assert data.shape[1] == len(header)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(FLOAT_FMT.format(v) for v in row) + "\n")


def read_trace_csv(path) -> Tuple[List[str], np.ndarray]:
    with open(path, "r") as fh:
        header = fh.readline().rstrip("\n").split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data


def render_trace_csv(sim: SimResult) -> str:
    """The exact bytes write_trace_csv would emit (for determinism checks)."""
    header = csv_header(sim.r, sim.n)
    lines = [",".join(header)]
    for row in trace_matrix(sim):
        lines.append(",".join(FLOAT_FMT.format(v) for v in row))
    return "\n".join(lines) + "\n"


def write_metadata(path, meta: dict) -> None:
    with open(path, "w") as fh:
        json.dump(meta, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_metadata(path) -> dict:
    with open(path, "r") as fh:
        return json.load(fh)
