"""TOML experiment configuration: parsing, validation, object building.

A configuration names a registered plant, the controller tuning, funnel
and reference kinds, integrator settings, output paths and (optionally)
sweep axes.  Validation collects every problem it can find before
failing, each message prefixed with the offending key path.
"""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .controller import ControllerParams
from .errors import ValidationError
from .integrator import IntegratorConfig
from .plant import PLANTS, SystemSpec, validate_system
from .signals import (
    FUNNEL_KINDS,
    REFERENCE_KINDS,
    FunnelSpec,
    ReferenceSpec,
    validate_funnel,
    validate_reference,
)

ENV_OUT_DIR = "FUNNELSIM_OUT_DIR"
ENV_WORKERS = "FUNNELSIM_WORKERS"


@dataclass
class ExperimentConfig:
    """Validated configuration plus the built simulation objects."""

    path: str
    raw: dict
    system: SystemSpec
    params: ControllerParams
    funnel: FunnelSpec
    reference: ReferenceSpec
    integrator: IntegratorConfig
    out_dir: str
    basename: str
    workers: int = 1
    sweep_axes: Dict[str, list] = field(default_factory=dict)

    def echo(self) -> dict:
        """Raw config as parsed, for run metadata."""
        return copy.deepcopy(self.raw)


def _require(table: dict, key: str, types, errors: List[str], path: str, default=None):
    if key not in table:
        if default is not None:
            return default
        errors.append(f"[{path}] missing key '{key}'")
        return None
    val = table[key]
    if types is not None and not isinstance(val, types):
        errors.append(f"[{path}] key '{key}' has type {type(val).__name__}")
        return None
    return val


def _build_plant(table: dict, errors: List[str]) -> Optional[SystemSpec]:
    name = _require(table, "name", str, errors, "plant")
    if name is None:
        return None
    if name not in PLANTS:
        errors.append(f"[plant] unknown plant '{name}'; registered: {', '.join(sorted(PLANTS))}")
        return None
    kwargs = {}
    if name == "benchmark_nonlinear":
        kwargs["integral_arg"] = table.get("integral_arg", "s")
        if kwargs["integral_arg"] not in ("s", "t"):
            errors.append("[plant] integral_arg must be 's' or 't'")
            return None
    else:
        for key in ("r", "n", "seed"):
            if key in table:
                kwargs[key] = int(table[key])
        if "gamma" in table:
            kwargs["gamma"] = table["gamma"]
    if "t0" in table:
        kwargs["t0"] = float(table["t0"])
    try:
        sys = PLANTS[name](**kwargs)
    except TypeError as exc:
        errors.append(f"[plant] bad parameters for '{name}': {exc}")
        return None
    if "y0" in table:
        y0 = np.asarray(table["y0"], dtype=float)
        if y0.shape != (sys.r, sys.n):
            errors.append(f"[plant] y0 shape {y0.shape} != ({sys.r}, {sys.n})")
        else:
            sys.y0_stack = y0
    try:
        validate_system(sys)
    except ValidationError as exc:
        errors.extend(exc.errors)
        return None
    return sys


def _build_controller(table: dict, sys: Optional[SystemSpec], errors: List[str]) -> Optional[ControllerParams]:
    gain = _require(table, "gain", (int, float), errors, "controller")
    theta_hat = _require(table, "theta_hat", list, errors, "controller")
    if gain is None or theta_hat is None or sys is None:
        return None
    theta_hat = np.asarray(theta_hat, dtype=float)
    for i, v in enumerate(theta_hat):
        if not v > 0:
            errors.append(f"[controller] theta_hat[{i}] must be > 0, got {v}")
    if not gain > 0:
        errors.append(f"[controller] gain must be > 0, got {gain}")
    xi0 = table.get("xi0")
    xi0 = np.zeros((sys.r - 1, sys.n)) if xi0 is None else np.asarray(xi0, dtype=float)
    if xi0.ndim == 1 and sys.n == 1:
        xi0 = xi0[:, None]
    params = ControllerParams(gain=float(gain), theta_hat=theta_hat, xi0=xi0)
    try:
        params.validate(sys.r, sys.n)
    except ValidationError as exc:
        errors.extend(exc.errors)
        return None
    return params


def _build_funnel(table: dict, errors: List[str]) -> Optional[FunnelSpec]:
    kind = _require(table, "kind", str, errors, "funnel")
    if kind is None:
        return None
    if kind not in FUNNEL_KINDS:
        errors.append(f"[funnel] unknown kind '{kind}'; known: {', '.join(FUNNEL_KINDS)}")
        return None
    try:
        if kind == "benchmark":
            return FunnelSpec(kind="benchmark")
        if kind == "exponential":
            return FunnelSpec(
                kind="exponential",
                a=float(table.get("a", 0.0)),
                b=float(table.get("b", 1.0)),
                c=float(table.get("c", 2.0)),
            )
        return FunnelSpec(kind="table", times=table.get("times"), values=table.get("values"))
    except ValidationError as exc:
        errors.extend(exc.errors)
        return None


def _build_reference(table: dict, errors: List[str]) -> Optional[ReferenceSpec]:
    kind = _require(table, "kind", str, errors, "reference")
    if kind is None:
        return None
    if kind not in REFERENCE_KINDS:
        errors.append(f"[reference] unknown kind '{kind}'; known: {', '.join(REFERENCE_KINDS)}")
        return None
    try:
        if kind == "benchmark":
            return ReferenceSpec(kind="benchmark")
        if kind == "sinusoid":
            return ReferenceSpec(
                kind="sinusoid",
                amplitude=table.get("amplitude"),
                frequency=table.get("frequency"),
                phase=table.get("phase"),
            )
        if kind == "constant":
            return ReferenceSpec(kind="constant", value=table.get("value"))
        return ReferenceSpec(kind="polynomial", coeffs=table.get("coeffs"))
    except (ValidationError, TypeError) as exc:
        msgs = exc.errors if isinstance(exc, ValidationError) else [f"[reference] {exc}"]
        errors.extend(msgs)
        return None


def _build_integrator(table: dict, t0: float, errors: List[str]) -> Optional[IntegratorConfig]:
    t_end = _require(table, "t_end", (int, float), errors, "integrator")
    if t_end is None:
        return None
    cfg = IntegratorConfig(
        t_end=float(t_end),
        rel_tol=float(table.get("rel_tol", 1e-8)),
        abs_tol=float(table.get("abs_tol", 1e-6)),
        h_init=float(table["h_init"]) if "h_init" in table else None,
        h_min=float(table.get("h_min", 1e-10)),
        h_max=float(table["h_max"]) if "h_max" in table else None,
        guard_factor=float(table.get("guard_factor", 1e-12)),
    )
    try:
        cfg.validate(t0)
    except ValidationError as exc:
        errors.extend(exc.errors)
        return None
    return cfg


def parse_config(path: str) -> ExperimentConfig:
    """Load and validate a TOML experiment file.

    Raises ValidationError carrying the full list of problems (not just
    the first); output directory and worker count honor the
    FUNNELSIM_OUT_DIR and FUNNELSIM_WORKERS environment overrides.
    """
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    return config_from_dict(raw, path=str(path))


def config_from_dict(raw: dict, path: str = "<memory>") -> ExperimentConfig:
    errors: List[str] = []
    for section in ("plant", "controller", "funnel", "reference", "integrator"):
        if section not in raw:
            errors.append(f"[{section}] missing section")
    if errors:
        raise ValidationError(errors)

    sys = _build_plant(raw["plant"], errors)
    params = _build_controller(raw["controller"], sys, errors)
    funnel = _build_funnel(raw["funnel"], errors)
    reference = _build_reference(raw["reference"], errors)
    t0 = sys.t0 if sys is not None else 0.0
    integ = _build_integrator(raw["integrator"], t0, errors)

    if sys is not None and reference is not None and reference.n != sys.n:
        errors.append(
            f"[reference] dimension {reference.n} does not match plant output dimension {sys.n}"
        )
    if sys is not None and funnel is not None and integ is not None:
        try:
            validate_funnel(funnel, sys.t0, integ.t_end)
        except ValidationError as exc:
            errors.extend(exc.errors)
    if sys is not None and reference is not None and integ is not None and reference.n == sys.n:
        try:
            validate_reference(reference, sys.n, sys.t0, integ.t_end)
        except ValidationError as exc:
            errors.extend(exc.errors)

    out = raw.get("output", {})
    out_dir = os.environ.get(ENV_OUT_DIR, out.get("directory", "runs"))
    basename = out.get("basename", "run")

    sweep = raw.get("sweep", {})
    axes = dict(sweep.get("axes", {}))
    for key, vals in axes.items():
        if not isinstance(vals, list) or len(vals) == 0:
            errors.append(f"[sweep.axes] '{key}' must be a non-empty list")
    workers = int(os.environ.get(ENV_WORKERS, sweep.get("workers", 1)))
    if workers < 1:
        errors.append("[sweep] workers must be >= 1")

    if errors:
        raise ValidationError(errors)
    return ExperimentConfig(
        path=path,
        raw=raw,
        system=sys,
        params=params,
        funnel=funnel,
        reference=reference,
        integrator=integ,
        out_dir=out_dir,
        basename=basename,
        workers=workers,
        sweep_axes=axes,
    )


def set_by_path(raw: dict, dotted: str, value: Any) -> None:
    """Assign a scalar inside a nested config dict.

    Path segments are dot-separated; an integer segment indexes a list,
    e.g. "controller.theta_hat.0".
    """
    parts = dotted.split(".")
    node = raw
    for seg in parts[:-1]:
        node = node[int(seg)] if isinstance(node, list) else node[seg]
    last = parts[-1]
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value


def expand_sweep(cfg: ExperimentConfig) -> List[dict]:
    """Cartesian product of the sweep axes, in deterministic order.

    Returns one raw config dict per cell with the axis values applied
    and the sweep table removed.
    """
    if not cfg.sweep_axes:
        raise ValidationError("[sweep] no axes configured")
    keys = list(cfg.sweep_axes.keys())
    cells = [{}]
    for key in keys:
        cells = [dict(c, **{key: v}) for c in cells for v in cfg.sweep_axes[key]]
    out = []
    for cell in cells:
        raw = copy.deepcopy(cfg.raw)
        raw.pop("sweep", None)
        for key, val in cell.items():
            set_by_path(raw, key, val)
        out.append({"overrides": cell, "raw": raw})
    return out
