"""Render tracking figures from a funnelsim trace CSV and its metadata.

Panels (selectable):
  error  -- tracking-error components overlaid with the +-1/phi funnel
            envelope (the admissible error radius)
  input  -- input components
  theta  -- surrogate-error norms against their constant radius lines

Usage:
  funnel-plots --csv runs/benchmark.csv --meta runs/benchmark.meta.json \
      --out benchmark.svg [--panels error,input,theta] [--format svg|png]

The envelope and radius lines carry stable SVG group ids
(funnel-envelope-upper/lower, theta-hat-<i>) so downstream checks can
assert their presence structurally.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

PANELS = ("error", "input", "theta")


class SchemaError(ValueError):
    """The CSV does not follow the trace column contract."""


@dataclass
class PlotSpec:
    csv_path: str
    meta_path: str
    out_path: str
    panels: Sequence[str] = PANELS
    fmt: str | None = None  # derived from out_path suffix when None


def load_trace(csv_path: str) -> Tuple[List[str], np.ndarray]:
    with open(csv_path, "r") as fh:
        header = fh.readline().rstrip("\n").split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.shape[1] != len(header):
        raise SchemaError(f"row width {data.shape[1]} does not match header width {len(header)}")
    return header, data


def _column(header: List[str], data: np.ndarray, name: str) -> np.ndarray:
    try:
        return data[:, header.index(name)]
    except ValueError:
        raise SchemaError(f"missing column '{name}'") from None


def _dims(header: List[str]) -> Tuple[int, int]:
    n = sum(1 for h in header if h.startswith("y_") and not h.startswith("yref"))
    k = sum(1 for h in header if h.startswith("theta_") and h.endswith("_norm"))
    if n < 1 or k < 1:
        raise SchemaError("cannot infer dimensions: no y_* or theta_*_norm columns")
    return k + 1, n


def render(spec: PlotSpec) -> str:
    """Draw the requested panels and write the image; returns the path.

    Read-only over its inputs; rendering the same bundle twice produces
    the same figure.  A funnel_ratio at or above 1 anywhere in the trace
    is impossible for traces written by the simulator and triggers a
    warning on stderr, but the figure is still produced.
    """
    panels = [p for p in spec.panels if p]
    unknown = set(panels) - set(PANELS)
    if unknown:
        raise ValueError(f"unknown panels: {sorted(unknown)}; available: {PANELS}")

    header, data = load_trace(spec.csv_path)
    with open(spec.meta_path, "r") as fh:
        meta = json.load(fh)
    r, n = _dims(header)

    t = _column(header, data, "t")
    phi = _column(header, data, "phi")
    ratio = _column(header, data, "funnel_ratio")
    if np.any(ratio >= 1.0):
        print(
            "warning: funnel_ratio >= 1 in the trace; the simulator never "
            "emits such rows, check the file's provenance",
            file=sys.stderr,
        )

    fig, axes = plt.subplots(
        len(panels), 1, figsize=(7.0, 2.4 * len(panels)), sharex=True, squeeze=False
    )
    axes = axes[:, 0]

    for ax, panel in zip(axes, panels):
        if panel == "error":
            for j in range(1, n + 1):
                e_j = _column(header, data, f"y_{j}") - _column(header, data, f"yref_{j}")
                ax.plot(t, e_j, label=f"e_{j}", linewidth=1.0)
            upper = ax.plot(t, 1.0 / phi, "k--", linewidth=1.2, label="+1/phi")[0]
            lower = ax.plot(t, -1.0 / phi, "k--", linewidth=1.2, label="-1/phi")[0]
            upper.set_gid("funnel-envelope-upper")
            lower.set_gid("funnel-envelope-lower")
            ax.set_ylabel("tracking error")
            ax.legend(loc="upper right", fontsize=8, ncol=2)
        elif panel == "input":
            for j in range(1, n + 1):
                ax.plot(t, _column(header, data, f"u_{j}"), label=f"u_{j}", linewidth=1.0)
            ax.set_ylabel("input")
            ax.legend(loc="upper right", fontsize=8)
        else:  # theta
            hats = meta.get("controller", {}).get("theta_hat")
            if hats is None or len(hats) != r - 1:
                raise SchemaError("metadata lacks controller.theta_hat matching the trace")
            for i in range(1, r):
                ax.plot(t, _column(header, data, f"theta_{i}_norm"),
                        label=f"||theta_{i}||", linewidth=1.0)
                line = ax.axhline(hats[i - 1], linestyle=":", color=f"C{i - 1}", linewidth=1.2)
                line.set_gid(f"theta-hat-{i}")
            ax.set_yscale("log")
            ax.set_ylabel("surrogate errors")
            ax.legend(loc="lower right", fontsize=8)

    axes[-1].set_xlabel("time")
    fig.align_ylabels(axes)
    fig.tight_layout()
    fmt = spec.fmt or (spec.out_path.rsplit(".", 1)[-1].lower() if "." in spec.out_path else "svg")
    if fmt == "svg":
        # fixed hash salt and no creation timestamp keep repeated renders
        # byte-identical
        with plt.rc_context({"svg.hashsalt": "funnelsim-plots"}):
            fig.savefig(spec.out_path, format=fmt, metadata={"Date": None})
    else:
        fig.savefig(spec.out_path, format=fmt)
    plt.close(fig)
    return spec.out_path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="funnel-plots", description="Render figures from a funnelsim trace bundle"
    )
    parser.add_argument("--csv", required=True, help="trace CSV written by `funnelsim simulate`")
    parser.add_argument("--meta", required=True, help="metadata JSON written alongside the trace")
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument(
        "--panels", default=",".join(PANELS), help="comma-separated subset of error,input,theta"
    )
    parser.add_argument("--format", default=None, choices=("svg", "png"), dest="fmt")
    args = parser.parse_args(argv)
    spec = PlotSpec(
        csv_path=args.csv,
        meta_path=args.meta,
        out_path=args.out,
        panels=tuple(p.strip() for p in args.panels.split(",") if p.strip()),
        fmt=args.fmt,
    )
    try:
        out = render(spec)
    except (OSError, SchemaError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"wrote {out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
