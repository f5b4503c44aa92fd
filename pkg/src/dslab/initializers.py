"""Initialization schemes applied through parameter role tags.

Random weights are drawn from a stream keyed by (seed, parameter name),
so the backbone under LION-DG is bitwise identical to He-init for the
same seed.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import rng
from . import tensor as T
from .layers import Layer, Parameter
from .models import ModelGraph

log = logging.getLogger(__name__)

SCHEMES = ("he", "xavier", "lion-dg", "lsuv", "hybrid", "fixup", "rezero", "zero-all")


class DeadLayerError(RuntimeError):
    pass


@dataclass
class LSUVSettings:
    samples: int = 256
    target_var: float = 1.0
    tol: float = 0.01
    max_iter: int = 10
    include_aux: bool = True


@dataclass
class LayerCalibration:
    layer: str
    variance: float
    iterations: int
    scale: float
    converged: bool


@dataclass
class InitReport:
    scheme: str
    seed: int
    layers: list[LayerCalibration] = field(default_factory=list)
    notices: list[str] = field(default_factory=list)


def _require_fan_in(p: Parameter) -> int:
    if not p.fan_in:
        raise ValueError(f"parameter {p.name!r} has no fan_in")
    return p.fan_in


def _reset(model: ModelGraph, weight_std, seed: int) -> None:
    for p in model.parameters():
        if p.kind == "weight":
            p.data[...] = rng.normal(seed, p.name, p.shape, weight_std(p))
        elif p.kind in ("bias", "bn_shift"):
            p.data[...] = 0.0
        elif p.kind in ("bn_scale", "gate"):
            p.data[...] = 1.0
        p.grad = None
    for bn in model.batchnorms():
        bn.reset_running_stats()


def he_std(p: Parameter) -> float:
    return math.sqrt(2.0 / _require_fan_in(p))


def xavier_std(p: Parameter) -> float:
    return math.sqrt(2.0 / (_require_fan_in(p) + p.fan_out))


def he_init(model: ModelGraph, seed: int) -> InitReport:
    """Weights ~ N(0, 2/fan_in); biases 0; BN scale 1, shift 0; gates 1."""
    _reset(model, he_std, seed)
    return InitReport("he", seed)


def xavier_init(model: ModelGraph, seed: int) -> InitReport:
    _reset(model, xavier_std, seed)
    return InitReport("xavier", seed)


def zero_aux(model: ModelGraph) -> None:
    for p in model.aux_parameters():
        p.data[...] = 0.0


def lion_dg_init(model: ModelGraph, seed: int) -> InitReport:
    he_init(model, seed)
    report = InitReport("lion-dg", seed)
    if model.num_aux == 0:
        msg = "model has no auxiliary heads; LION-DG reduces to He-init"
        warnings.warn(msg)
        report.notices.append(msg)
    zero_aux(model)
    return report


def zero_all_init(model: ModelGraph, seed: int) -> InitReport:
    """Every weight, bias and gate zero; BN scale stays 1 so normalization is defined."""
    he_init(model, seed)
    for p in model.parameters():
        if p.kind != "bn_scale":
            p.data[...] = 0.0
    return InitReport("zero-all", seed)


# ------------------------------------------------------------------ LSUV


def _batch_variance(out: T.Tensor) -> float:
    return float(np.var(out.data))


def lsuv_calibrate(model: ModelGraph, calib_batch: np.ndarray, settings: LSUVSettings,
                   include: Callable[[Layer], bool]) -> list[LayerCalibration]:
    """Rescale each selected Conv/Linear layer in forward order until its output variance hits the target.

    Runs a single forward pass: when execution reaches a layer, the layer is
    calibrated on its actual input and the calibrated output flows on, so
    every later layer sees calibrated predecessors.
    """
    if len(calib_batch) < settings.samples:
        raise ValueError(f"calibration batch has {len(calib_batch)} rows, need {settings.samples}")
    batch = np.asarray(calib_batch[: settings.samples], dtype=np.float64)
    report: list[LayerCalibration] = []

    def hook(layer: Layer, x: T.Tensor) -> T.Tensor:
        out = layer(x)
        if not include(layer):
            return out
        scale, iters = 1.0, 0
        var = _batch_variance(out)
        while True:
            if not np.isfinite(var) or var == 0.0:
                raise DeadLayerError(f"layer {layer.name!r} output has variance {var} on the calibration batch")
            if abs(var - settings.target_var) <= settings.tol or iters >= settings.max_iter:
                break
            s = math.sqrt(settings.target_var / var)
            layer.weight.data *= s
            scale *= s
            iters += 1
            out = layer(x)
            var = _batch_variance(out)
        report.append(LayerCalibration(layer.name, var, iters, scale,
                                       abs(var - settings.target_var) <= settings.tol))
        return out

    saved = [(bn.running_mean.copy(), bn.running_var.copy()) for bn in model.batchnorms()]
    prev_hook, prev_mode = model.layer_hook, model.training
    model.layer_hook = hook
    model.train()
    try:
        with T.no_grad():
            model(batch)
    finally:
        model.layer_hook = prev_hook
        model.training = prev_mode
        for bn, (m, v) in zip(model.batchnorms(), saved):
            bn.running_mean[...] = m
            bn.running_var[...] = v
    return report


def lsuv_init(model: ModelGraph, calib_batch: np.ndarray, seed: int,
              settings: LSUVSettings | None = None) -> InitReport:
    """He-init, then LSUV on backbone and main head (and aux heads unless ``include_aux`` is off)."""
    settings = settings or LSUVSettings()
    he_init(model, seed)
    include = (lambda layer: True) if settings.include_aux else (lambda layer: not layer.role.is_aux)
    report = InitReport("lsuv", seed)
    report.layers = lsuv_calibrate(model, calib_batch, settings, include)
    return report


def hybrid_init(model: ModelGraph, calib_batch: np.ndarray, seed: int,
                settings: LSUVSettings | None = None) -> InitReport:
    """LSUV backbone and main head, then zero every aux parameter."""
    settings = settings or LSUVSettings()
    he_init(model, seed)
    zero_aux(model)
    report = InitReport("hybrid", seed)
    report.layers = lsuv_calibrate(model, calib_batch, settings, lambda layer: not layer.role.is_aux)
    zero_aux(model)
    return report


# -------------------------------------------------------- residual schemes


def fixup_init(model: ModelGraph, seed: int) -> InitReport:
    """He-init; branch weights scaled by L^-1/2, final branch convs and the main classifier zeroed."""
    he_init(model, seed)
    report = InitReport("fixup", seed)
    branch_params = [p for p in model.backbone_parameters() if p.kind == "weight" and p.branch]
    if not branch_params:
        msg = f"{model.arch_kind} has no residual branches; Fixup reduces to He-init with a zero classifier"
        log.info(msg)
        report.notices.append(msg)
    else:
        n_branches = len({p.branch for p in branch_params})
        factor = n_branches ** -0.5
        for p in branch_params:
            if p.is_final_in_branch:
                p.data[...] = 0.0
            else:
                p.data *= factor
    for p in model.main_parameters():
        p.data[...] = 0.0
    return report


def rezero_init(model: ModelGraph, seed: int) -> InitReport:
    """He-init with every residual gate set to 0."""
    he_init(model, seed)
    report = InitReport("rezero", seed)
    gates = [p for p in model.parameters() if p.is_residual_scale]
    if not gates:
        msg = f"{model.arch_kind} has no residual gates; ReZero reduces to He-init"
        log.info(msg)
        report.notices.append(msg)
    for p in gates:
        p.data[...] = 0.0
    return report


def build_flags(scheme: str) -> dict:
    """Model construction flags a scheme requires (no BN for Fixup/ReZero, gates for ReZero)."""
    if scheme == "fixup":
        return {"batchnorm": False}
    if scheme == "rezero":
        return {"batchnorm": False, "gates": True}
    return {}


def apply_scheme(model: ModelGraph, scheme: str, seed: int, calib_batch: np.ndarray | None = None,
                 lsuv: LSUVSettings | None = None) -> InitReport:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {SCHEMES}")
    if scheme in ("lsuv", "hybrid"):
        if calib_batch is None:
            raise ValueError(f"{scheme} needs a calibration batch")
        fn = lsuv_init if scheme == "lsuv" else hybrid_init
        return fn(model, calib_batch, seed, lsuv)
    return {
        "he": he_init,
        "xavier": xavier_init,
        "lion-dg": lion_dg_init,
        "fixup": fixup_init,
        "rezero": rezero_init,
        "zero-all": zero_all_init,
    }[scheme](model, seed)


def zeroes_aux(scheme: str) -> bool:
    return scheme in ("lion-dg", "hybrid", "zero-all")


__all__ = [
    "SCHEMES", "LSUVSettings", "LayerCalibration", "InitReport", "DeadLayerError",
    "he_init", "xavier_init", "lion_dg_init", "lsuv_init", "hybrid_init", "fixup_init",
    "rezero_init", "zero_all_init", "apply_scheme", "build_flags", "zeroes_aux",
]
