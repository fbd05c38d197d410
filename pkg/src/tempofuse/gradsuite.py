"""Finite-difference suite over every layer and every model kind, in float64."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .models import MODEL_KINDS, BackboneConfig, ModelConfig, TempoBranchConfig, build_model
from .nn import tensor as T
from .nn.gradcheck import GradCheckReport, finite_difference_check
from .nn.layers import BatchNorm, Conv1d, Conv2d, Dense
from .nn.tensor import Tensor

# Small shapes so one check is milliseconds; capacity as in the reduced configs.
# Model losses sit around 1-10 while some branch gradients are ~1e-6, so model
# checks use h = 1e-4 to keep float64 roundoff (eps * |f| / h) well below 1e-4.
N_BLOCKS, CHANNELS = 2, 8
MEL_SHAPE = (12, 16)      # bins x frames
FOURIER_BINS, AC_BINS = 7, 9
N_CLASSES, BATCH = 3, 2


@dataclass
class SuiteResult:
    name: str
    seed: int
    report: GradCheckReport


def _leaf(rng, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True, name="x")


def _weighted(y: Tensor, rng) -> Tensor:
    # A fixed random projection makes every output coordinate matter.
    return Tensor(rng.standard_normal(y.shape))


def _layer_case(name: str, rng) -> tuple[Callable[[], Tensor], list[Tensor], list[str]]:
    f64 = np.float64
    if name == "conv2d_c1":
        layer, x = Conv2d(1, 3, 3, rng, padding=1, dtype=f64), _leaf(rng, (2, 1, 5, 6))
    elif name == "conv2d":
        layer, x = Conv2d(3, 4, 3, rng, padding=1, dtype=f64), _leaf(rng, (2, 3, 5, 6))
    elif name == "conv2d_strided":
        layer, x = Conv2d(2, 3, 3, rng, stride=2, padding=1, dtype=f64), _leaf(rng, (2, 2, 7, 6))
    elif name == "conv1d":
        layer, x = Conv1d(5, 3, 5, rng, stride=3, dtype=f64), _leaf(rng, (2, 5, 17))
    elif name == "batchnorm":
        layer, x = BatchNorm(3, dtype=f64), _leaf(rng, (3, 3, 4, 5))
        layer.gamma.data[...] = rng.uniform(0.5, 1.5, 3)
        layer.beta.data[...] = rng.standard_normal(3)
    elif name == "batchnorm_eval":
        layer, x = BatchNorm(3, dtype=f64), _leaf(rng, (2, 3, 6))
        layer.running_mean[...] = rng.standard_normal(3)
        layer.running_var[...] = rng.uniform(0.5, 2.0, 3)
        layer.eval()
    elif name == "dense":
        layer, x = Dense(6, 4, rng, dtype=f64), _leaf(rng, (3, 6))
        layer.bias.data[...] = rng.standard_normal(4)
    else:
        x = _leaf(rng, (2, 3, 6, 8))
        seed = int(rng.integers(2 ** 31))
        fn = {
            "relu": T.relu,
            "maxpool2d": lambda t: T.maxpool2d(t, 2),
            "global_maxpool": T.global_maxpool,
            "mean_pool": lambda t: T.mean_pool(t, 3),
            "softmax": lambda t: T.softmax(T.reshape(t, (2, -1))),
            "dropout": lambda t: T.dropout(t, 0.5, np.random.default_rng(seed), True),
            "concat": lambda t: T.concat([t, t * t], axis=1),
        }[name]
        proj = _weighted(fn(x), rng)
        return lambda: T.tsum(fn(x) * proj), [x], ["input"]
    proj = _weighted(layer(x), rng)
    named = list(layer.named_parameters())
    return (lambda: T.tsum(layer(x) * proj), [p for _, p in named] + [x],
            [n for n, _ in named] + ["input"])


LAYER_CASES = ("conv2d_c1", "conv2d", "conv2d_strided", "conv1d", "batchnorm", "batchnorm_eval",
               "dense", "relu", "maxpool2d", "global_maxpool", "mean_pool", "softmax", "dropout",
               "concat", "cross_entropy")


def reduced_model_config(kind: str, seed: int = 0, dtype: str = "float64") -> ModelConfig:
    return ModelConfig(
        kind,
        backbone=BackboneConfig(n_blocks=N_BLOCKS, channels=CHANNELS, hidden=8, n_classes=N_CLASSES,
                                n_mels=MEL_SHAPE[0], chunk_len=MEL_SHAPE[1]),
        tempo=TempoBranchConfig(branch_channels=4, embed_channels=4, pooled_len=3,
                                fourier_bins=FOURIER_BINS, ac_bins=AC_BINS),
        seed=seed, dtype=dtype)


def check_layer(name: str, seed: int, h: float = 1e-5, tolerance: float = 1e-4) -> GradCheckReport:
    rng = np.random.default_rng(seed)
    if name == "cross_entropy":
        logits = _leaf(rng, (4, 5))
        labels = rng.integers(0, 5, 4)
        return finite_difference_check(lambda: T.cross_entropy(logits, labels), [logits], ["logits"],
                                       h=h, tolerance=tolerance)
    loss_fn, tensors, names = _layer_case(name, rng)
    return finite_difference_check(loss_fn, tensors, names, h=h, tolerance=tolerance)


def check_model(kind: str, seed: int, h: float = 1e-4, tolerance: float = 1e-4,
                max_coords: int | None = 6) -> GradCheckReport:
    rng = np.random.default_rng([seed, 7])
    model = build_model(reduced_model_config(kind, seed))
    # Non-trivial batchnorm affine parameters.
    for m in model.modules():
        if isinstance(m, BatchNorm):
            m.gamma.data[...] = rng.uniform(0.5, 1.5, m.gamma.shape)
            m.beta.data[...] = 0.1 * rng.standard_normal(m.beta.shape)
    frames = MEL_SHAPE[1]
    inputs = {
        "mel": Tensor(rng.standard_normal((BATCH,) + MEL_SHAPE), requires_grad=True),
        "fourier": Tensor(rng.standard_normal((BATCH, FOURIER_BINS, frames)), requires_grad=True),
        "autocorrelation": Tensor(rng.standard_normal((BATCH, AC_BINS, frames)), requires_grad=True),
    }
    cfg = model.cfg
    used = [k for k, flag in (("mel", cfg.uses_mel), ("fourier", cfg.uses_fourier),
                              ("autocorrelation", cfg.uses_autocorrelation)) if flag]
    labels = rng.integers(0, N_CLASSES, BATCH)
    named = list(model.named_parameters())
    tensors = [p for _, p in named] + [inputs[k] for k in used]
    names = [n for n, _ in named] + [f"input.{k}" for k in used]
    model.train()
    return finite_difference_check(
        lambda: T.cross_entropy(model(**{k: inputs[k] for k in used}), labels),
        tensors, names, h=h, tolerance=tolerance, max_coords=max_coords,
        rng=np.random.default_rng([seed, 11]), model=model)


def run_suite(seeds: Iterable[int], tolerance: float = 1e-4, layers: Iterable[str] = LAYER_CASES,
              kinds: Iterable[str] = MODEL_KINDS, max_coords: int | None = 6,
              progress: Callable[[SuiteResult], None] | None = None) -> list[SuiteResult]:
    results = []
    layers, kinds = list(layers), list(kinds)
    for seed in seeds:
        for name in layers:
            results.append(SuiteResult(f"layer:{name}", seed, check_layer(name, seed, tolerance=tolerance)))
            if progress:
                progress(results[-1])
        for kind in kinds:
            results.append(SuiteResult(f"model:{kind}", seed,
                                       check_model(kind, seed, tolerance=tolerance, max_coords=max_coords)))
            if progress:
                progress(results[-1])
    return results


def summarize(results: list[SuiteResult]) -> dict[str, float]:
    """Worst relative error per case across seeds."""
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.report.max_rel_error)
    return worst
