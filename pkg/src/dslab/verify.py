"""Executable property suites: gradient decoupling, linear aux growth,
architecture dependence of the invariance, and implicit vs explicit warmup.

Every suite returns :class:`PropertyResult` objects carrying the measured
quantities, so the CLI can dump them as JSON and exit nonzero on failure.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import rng
from . import tensor as T
from .data import make_synthetic
from .initializers import apply_scheme, he_init, lion_dg_init
from .models import ModelGraph, ResNetDS, build_model
from .training import composite_loss, grads_of, measure_awakening

DECOUPLING_TOL = 1e-15
COUPLED_FLOOR = 1e-6
GROWTH_TOL = 1e-10
R2_FLOOR = 0.99
SPREAD_CEIL = 0.20
JVP_MATCH_TOL = 1e-8
JVP_DIVERGE_FLOOR = 1e-6

PROPS = ("decoupling", "growth", "architecture", "warmup")


@dataclass
class PropertyResult:
    prop: str
    case: str
    passed: bool
    measured: dict = field(default_factory=dict)
    seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def random_batch(model: ModelGraph, n: int, seed: int, classes: int) -> tuple[np.ndarray, np.ndarray]:
    shape = model.example_input(n).shape
    if len(shape) == 4:
        shape = (n, 3, 32, 32)
    gen = rng.stream(seed, "verify.batch")
    return gen.standard_normal(shape), gen.integers(0, classes, n)


CASES = (
    ("densenet", "side_tap"),
    ("resnet", "side_tap"),
    ("mlp", "side_tap"),
)


def _model(arch: str, variant: str = "side_tap") -> ModelGraph:
    classes = 4 if arch == "mlp" else 10
    return build_model(arch, classes, variant, input_dim=16, hidden_dims=(32, 32))


def aux_backbone_grad(model: ModelGraph, x, y, alpha: float = 0.3) -> float:
    """Max |grad| on backbone parameters from ``alpha * sum_k L_aux_k`` alone."""
    parts = composite_loss(model(x), y, alpha)
    g = grads_of(model, T.scalar_mul(parts.aux_sum, alpha))
    return max(float(np.max(np.abs(g[p.name]))) for p in model.backbone_parameters())


def check_decoupling(seed: int = 0, batch: int = 8) -> list[PropertyResult]:
    out = []
    for arch, variant in CASES:
        for scheme in ("lion-dg", "hybrid", "he"):
            t0 = time.perf_counter()
            model = _model(arch, variant)
            classes = 4 if arch == "mlp" else 10
            calib = None
            if scheme == "hybrid":
                calib, _ = random_batch(model, 256, seed + 1, classes)
            apply_scheme(model, scheme, seed, calib)
            x, y = random_batch(model, batch, seed, classes)
            g = aux_backbone_grad(model, x, y)
            ok = g >= COUPLED_FLOOR if scheme == "he" else g <= DECOUPLING_TOL
            out.append(PropertyResult("decoupling", f"{model.arch_kind}/{scheme}", bool(ok),
                                      {"max_abs_backbone_grad": g,
                                       "bound": COUPLED_FLOOR if scheme == "he" else DECOUPLING_TOL},
                                      time.perf_counter() - t0))
    return out


def check_growth(seed: int = 42, lr: float = 1e-3, steps: int = 10) -> list[PropertyResult]:
    t0 = time.perf_counter()
    data = make_synthetic(seed=0)
    model = _model("mlp")
    lion_dg_init(model, seed)
    rec = measure_awakening(model, data, steps=steps, lr=lr)
    c = rec.growth_constant
    w1_err = abs(float(rec.aux_weight_norm[1]) - lr * c)
    r2 = rec.linear_fit_r2(steps)
    monotone = bool(np.all(np.diff(rec.aux_weight_norm) >= 0))
    spread = rec.proportionality_spread(2, steps)
    secs = time.perf_counter() - t0
    return [
        PropertyResult("growth", "w_aux(1) = lr*C", w1_err <= GROWTH_TOL,
                       {"w_aux_1": float(rec.aux_weight_norm[1]), "lr_times_C": lr * c, "abs_err": w1_err}, secs),
        PropertyResult("growth", "linear fit t in [0,10]", r2 >= R2_FLOOR and monotone,
                       {"r2": r2, "monotone": monotone, "norms": rec.aux_weight_norm.tolist()}, 0.0),
        PropertyResult("growth", "proportionality t in [2,10]", spread < SPREAD_CEIL,
                       {"relative_spread": spread}, 0.0),
    ]


def _perturb_aux(model: ModelGraph, seed: int, scale: float = 0.5) -> None:
    for p in model.aux_parameters():
        p.data[...] = rng.normal(seed, "verify.perturb." + p.name, p.shape, scale)


def _backbone_capture(model: ModelGraph, x) -> dict[str, np.ndarray]:
    cap: dict[str, T.Tensor] = {}
    with T.no_grad():
        model(x, capture=cap)
    aux_names = {layer.name for layer in model.layers.values() if layer.role.is_aux}
    aux_names |= {f"{n}.fc" for n in aux_names}
    return {k: v.data.copy() for k, v in cap.items() if k not in aux_names and k != "main"
            and not k.startswith("main.")}


def check_side_tap_invariance(seed: int = 0) -> list[PropertyResult]:
    out = []
    for arch in ("densenet", "resnet"):
        t0 = time.perf_counter()
        model = _model(arch, "side_tap")
        lion_dg_init(model, seed)
        model.eval()
        x, _ = random_batch(model, 4, seed, 10)
        before = _backbone_capture(model, x)
        _perturb_aux(model, seed)
        after = _backbone_capture(model, x)
        diff = max(float(np.max(np.abs(before[k] - after[k]))) for k in before)
        out.append(PropertyResult("architecture", f"{model.arch_kind}/perturb-aux", diff <= DECOUPLING_TOL,
                                  {"max_backbone_activation_diff": diff, "activations": len(before)},
                                  time.perf_counter() - t0))
    return out


def on_path_jvps(model: ResNetDS, h: np.ndarray, v: np.ndarray, stage: int = 1,
                 eps: float = 1e-5) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference JVPs at ``h`` along ``v`` of the next stage's first block,
    with the aux path feeding it and with the aux path removed."""
    name = f"stage{stage + 1}.block1"
    g = model.layers[f"aux{stage}.g"]

    def with_aux(z):
        zt = T.Tensor(z)
        return model.block(name, zt, g(zt)).data

    def without_aux(z):
        return model.block(name, T.Tensor(z)).data

    with T.no_grad():
        j_aux = (with_aux(h + eps * v) - with_aux(h - eps * v)) / (2 * eps)
        j_free = (without_aux(h + eps * v) - without_aux(h - eps * v)) / (2 * eps)
    return j_aux, j_free


def check_on_path(seed: int = 0) -> list[PropertyResult]:
    t0 = time.perf_counter()
    model = _model("resnet", "on_path")
    lion_dg_init(model, seed)
    model.eval()
    x, _ = random_batch(model, 4, seed, 10)
    cap: dict[str, T.Tensor] = {}
    with T.no_grad():
        model(x, capture=cap)
    h = cap["stage1"].data
    v = rng.stream(seed, "verify.direction").standard_normal(h.shape)
    j_aux, j_free = on_path_jvps(model, h, v)
    match = float(np.max(np.abs(j_aux - j_free)))
    _perturb_aux(model, seed)
    j_aux2, j_free2 = on_path_jvps(model, h, v)
    diverge = float(np.max(np.abs(j_aux2 - j_free2)))
    secs = time.perf_counter() - t0
    return [
        PropertyResult("architecture", "ResNetDS_OnPath/zero-aux JVP", match <= JVP_MATCH_TOL,
                       {"max_jvp_diff": match, "bound": JVP_MATCH_TOL}, secs),
        PropertyResult("architecture", "ResNetDS_OnPath/nonzero-aux JVP", diverge > JVP_DIVERGE_FLOOR,
                       {"max_jvp_diff": diverge, "floor": JVP_DIVERGE_FLOOR}, 0.0),
    ]


def check_architecture(seed: int = 0) -> list[PropertyResult]:
    return check_side_tap_invariance(seed) + check_on_path(seed)


def check_warmup(seed: int = 0, batch: int = 8) -> list[PropertyResult]:
    """LION-DG at t=0 vs He-init with an explicit aux warmup whose weight is 0 at t=0."""
    out = []
    for arch, variant in CASES:
        t0 = time.perf_counter()
        lion, warm = _model(arch, variant), _model(arch, variant)
        lion_dg_init(lion, seed)
        he_init(warm, seed)
        classes = 4 if arch == "mlp" else 10
        x, y = random_batch(lion, batch, seed, classes)
        g_lion = grads_of(lion, composite_loss(lion(x), y, 0.3).total)
        parts_w = composite_loss(warm(x), y, 0.3, step=0, warmup_steps=100)
        g_warm = grads_of(warm, parts_w.total)
        g_main = grads_of(lion, composite_loss(lion(x), y, 0.3).main)
        names = [p.name for p in lion.backbone_parameters()]
        same = all(np.array_equal(g_lion[n], g_warm[n]) for n in names)
        same_main = all(np.array_equal(g_lion[n], g_main[n]) for n in names)
        worst = max(float(np.max(np.abs(g_lion[n] - g_warm[n]))) for n in names)
        out.append(PropertyResult("warmup", lion.arch_kind, bool(same and same_main and parts_w.alpha == 0.0),
                                  {"bitwise_equal": same, "equals_main_only": same_main,
                                   "max_abs_diff": worst, "alpha_eff_0": parts_w.alpha},
                                  time.perf_counter() - t0))
    return out


SUITES = {
    "decoupling": check_decoupling,
    "growth": check_growth,
    "architecture": check_architecture,
    "warmup": check_warmup,
}


def run(props=PROPS) -> list[PropertyResult]:
    results = []
    for p in props:
        if p not in SUITES:
            raise ValueError(f"unknown property {p!r}; expected one of {PROPS}")
        results += SUITES[p]()
    return results
