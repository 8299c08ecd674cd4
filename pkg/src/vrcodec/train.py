"""Multi-lambda, mixed-bin rate-distortion training.

Every image in a batch draws its own lambda index (uniform over the grid)
and its own bin size; the batch loss is the mean of the per-image
Lagrangians ``D + lambda * R``.  Training runs in two phases: a pretrain
phase at bin size 1 with MSE, then a finetune phase with mixed bin sizes
and the configured loss.

Randomness is derived from ``(seed, step, image)`` so that a run can be
resumed from a checkpoint and continue bit-for-bit.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .cond import LambdaGrid, ConditioningContext
from .data import load_directory, random_crops, synthetic_dataset
from .metrics import max_scales, ms_ssim
from .model import ArchitectureConfig, ForwardResult, VariableRateModel
from .optim import OptimizerConfig, adam_step
from .quantize import BinMixingPolicy, additive_noise, sample_bin_size, universal_quantize
from .tensor import NonFiniteError, Tensor, add, mean, mul, sub, tsum

LOSS_KINDS = ("mse", "ms-ssim", "mse+ms-ssim")
CI_LAMBDAS = (1e-2, 1e-3)
# step decay sized for the 4000-step desk-scale run
DEFAULT_SCHEDULE = ((1500, 5e-4), (3000, 2e-4))
# weight on (1 - MS-SSIM) per pixel value, in [0, 1] pixel units
MS_SSIM_WEIGHT = 0.1
_DITHER_STREAM = 1 << 20


@dataclass
class TrainConfig:
    lambda_grid: LambdaGrid = field(default_factory=lambda: LambdaGrid(CI_LAMBDAS))
    bin_policy: BinMixingPolicy = field(default_factory=BinMixingPolicy)
    loss_kind: str = "mse"
    batch_size: int = 8
    steps: int = 4000
    pretrain_steps: int = 2000
    optimizer: OptimizerConfig = field(default_factory=lambda: OptimizerConfig(1e-3, schedule=DEFAULT_SCHEDULE))
    patch_size: int = 32
    pretrain_fixed_bin: bool = True
    seed: int = 0
    quantization: str = "universal"
    arch: ArchitectureConfig = field(default_factory=lambda: ArchitectureConfig(n_lambdas=2))
    dataset: str = "synthetic"
    synthetic_images: int = 256
    synthetic_size: int = 64
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.steps <= 0:
            raise ValueError("steps must be positive")
        if not 0 <= self.pretrain_steps <= self.steps:
            raise ValueError("pretrain_steps must lie in [0, steps]")
        if self.batch_size <= 0:
            raise ValueError("batch_size must be positive")
        if self.patch_size % self.arch.downsampling:
            raise ValueError(f"patch_size {self.patch_size} must be a multiple of {self.arch.downsampling}")
        if self.quantization not in ("universal", "noise"):
            raise ValueError("quantization must be 'universal' or 'noise'")
        if self.arch.n_lambdas != len(self.lambda_grid):
            raise ValueError(
                f"architecture has {self.arch.n_lambdas} lambda slots but the grid has {len(self.lambda_grid)}"
            )
        if self.loss_kind != "mse" and max_scales(self.patch_size, self.patch_size) < 1:
            raise ValueError("patch too small for MS-SSIM")

    def phase_at(self, step: int) -> str:
        return "pretrain" if step < self.pretrain_steps else "finetune"

    # -- key=value files --------------------------------------------------------
    def to_dict(self) -> dict[str, str]:
        out = {
            "lambdas": ",".join(repr(v) for v in self.lambda_grid.values),
            "bin_exponent_low": repr(self.bin_policy.exponent_low),
            "bin_exponent_high": repr(self.bin_policy.exponent_high),
            "bin_base": repr(self.bin_policy.base),
            "learning_rate": repr(self.optimizer.learning_rate),
            "lr_schedule": ",".join(f"{s}:{lr!r}" for s, lr in self.optimizer.schedule),
        }
        for f in fields(self):
            if f.name in ("lambda_grid", "bin_policy", "optimizer", "arch"):
                continue
            out[f.name] = str(getattr(self, f.name))
        out.update({"arch." + k: v for k, v in self.arch.to_dict().items()})
        return out

    @classmethod
    def from_dict(cls, data: dict[str, str]) -> "TrainConfig":
        data = dict(data)
        kwargs: dict = {}
        if "lambdas" in data:
            kwargs["lambda_grid"] = LambdaGrid(tuple(float(v) for v in data.pop("lambdas").split(",")))
        policy = BinMixingPolicy()
        kwargs["bin_policy"] = BinMixingPolicy(
            float(data.pop("bin_exponent_low", policy.exponent_low)),
            float(data.pop("bin_exponent_high", policy.exponent_high)),
            float(data.pop("bin_base", policy.base)),
        )
        # a missing key keeps the default decay; an empty value turns it off
        raw = data.pop("lr_schedule", None)
        schedule = DEFAULT_SCHEDULE if raw is None else [tuple(item.split(":")) for item in raw.split(",") if item]
        kwargs["optimizer"] = OptimizerConfig(float(data.pop("learning_rate", 1e-3)), schedule=schedule)
        arch = {k[5:]: v for k, v in data.items() if k.startswith("arch.")}
        n = len(kwargs.get("lambda_grid", LambdaGrid(CI_LAMBDAS)))
        arch.setdefault("n_lambdas", str(n))
        kwargs["arch"] = ArchitectureConfig.from_dict(arch)
        types = {f.name: f.type for f in fields(cls)}
        for key, value in data.items():
            if key.startswith("arch."):
                continue
            if key not in types:
                raise ValueError(f"unknown training option {key!r}")
            default = getattr(cls(), key) if key not in kwargs else None
            if isinstance(default, bool):
                kwargs[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(default, int):
                kwargs[key] = int(value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(ckpt_io.parse_config(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(ckpt_io.format_config(self.to_dict()))


# -- sampling ------------------------------------------------------------------


def sample_conditioning(grid: LambdaGrid, policy: BinMixingPolicy, rng: np.random.Generator) -> ConditioningContext:
    """One image's (lambda index, bin size): index uniform over the grid."""
    index = int(rng.integers(len(grid)))
    return ConditioningContext(index, sample_bin_size(policy, rng))


def step_rng(seed: int, step: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


# -- loss ----------------------------------------------------------------------


class FrozenQuantizer:
    """Replays recorded quantization residuals ``z - y``.

    The first forward pass quantizes normally and stores each residual; after
    :meth:`rewind`, later passes return ``y + residual``.  That is exactly the
    straight-through linearization, which makes the loss a smooth function of
    the parameters for finite-difference checks.
    """

    def __init__(self, mode: str = "universal"):
        self.mode = mode
        self.residuals: list[np.ndarray] = []
        self._next = 0

    def rewind(self) -> None:
        self._next = 0

    def __call__(self, y: Tensor, delta: np.ndarray, rng: np.random.Generator) -> Tensor:
        if self._next == len(self.residuals):
            if self.mode == "universal":
                z = universal_quantize(y, delta, rng)[0]
            else:
                z = additive_noise(y, delta, rng)
            self.residuals.append(z.data - y.data)
        residual = self.residuals[self._next]
        self._next += 1
        return add(y, residual.astype(y.dtype))


@dataclass
class LossDiagnostics:
    loss: np.ndarray  # per image
    bits: np.ndarray
    mse: np.ndarray
    distortion: np.ndarray
    lambda_index: np.ndarray
    delta: np.ndarray

    def check(self) -> None:
        bad = ~np.isfinite(self.loss)
        if np.any(bad):
            i = int(np.flatnonzero(bad)[0])
            raise NonFiniteError(
                f"non-finite loss for image {i}: bits={self.bits[i]} mse={self.mse[i]} "
                f"lambda_index={self.lambda_index[i]} delta={self.delta[i]}"
            )


def distortion(x: Tensor, x_hat: Tensor, loss_kind: str) -> tuple[Tensor, Tensor]:
    """Per-image distortion (summed over pixel values) and per-image MSE."""
    b = x.shape[0]
    values = int(np.prod(x.shape[1:]))
    err = sub(x_hat, x)
    sse = tsum(mul(err, err).reshape(b, -1), axis=1)
    mse = mul(sse, 1.0 / values)
    if loss_kind == "mse":
        return sse, mse
    ssim_term = mul(sub(1.0, ms_ssim(x, x_hat, reduce=False)), MS_SSIM_WEIGHT * values)
    if loss_kind == "ms-ssim":
        return ssim_term, mse
    return add(sse, ssim_term), mse


def rd_loss(
    model: VariableRateModel,
    images,
    lambda_index,
    delta,
    grid: LambdaGrid,
    loss_kind: str = "mse",
    rng: np.random.Generator | None = None,
    mode: str = "universal",
    quantizer: Callable | None = None,
) -> tuple[Tensor, LossDiagnostics, ForwardResult]:
    """Mean over the batch of ``D_i + lambda_i * R_i`` with each image's own knobs.

    ``R_i`` is the estimated rate of image i in bits and ``D_i`` its summed
    squared error (or the MS-SSIM variants), both in [0, 1] pixel units.
    """
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    x = images if isinstance(images, Tensor) else Tensor(np.asarray(images, dtype=model.dtype))
    b = x.shape[0]
    lambda_index = np.broadcast_to(np.asarray(lambda_index, dtype=np.intp), (b,))
    delta = np.broadcast_to(np.asarray(delta, dtype=np.float64), (b,))
    lam = np.asarray(grid.values, dtype=np.float64)[lambda_index].astype(x.dtype)
    out = model(x, lambda_index, delta, rng=rng, mode=mode, quantizer=quantizer)
    dist, mse = distortion(x, out.x_hat, loss_kind)
    per_image = add(dist, mul(out.bits, lam))
    loss = mean(per_image)
    diag = LossDiagnostics(per_image.data.astype(np.float64), out.bits.data.astype(np.float64),
                           mse.data.astype(np.float64), dist.data.astype(np.float64),
                           np.array(lambda_index), np.array(delta))
    diag.check()
    if not np.isfinite(loss.data):
        raise NonFiniteError(f"non-finite batch loss {loss.data}")
    return loss, diag, out


# -- training loop -------------------------------------------------------------


@dataclass
class Batch:
    images: np.ndarray
    lambda_index: np.ndarray
    delta: np.ndarray


@dataclass
class TrainState:
    model: VariableRateModel
    config: TrainConfig
    step: int = 0
    averages: dict[str, float] = field(default_factory=dict)

    def update_averages(self, diag: LossDiagnostics, decay: float = 0.99) -> None:
        for key, value in (("loss", diag.loss.mean()), ("bits", diag.bits.mean()), ("mse", diag.mse.mean())):
            old = self.averages.get(key)
            self.averages[key] = float(value) if old is None else decay * old + (1 - decay) * float(value)


def new_state(config: TrainConfig) -> TrainState:
    return TrainState(VariableRateModel(config.arch), config)


def make_dataset(config: TrainConfig) -> list[np.ndarray]:
    if config.dataset == "synthetic":
        return list(synthetic_dataset(config.synthetic_images, config.synthetic_size, seed=config.seed))
    return load_directory(config.dataset)


def make_batch(config: TrainConfig, dataset: Sequence[np.ndarray], step: int) -> Batch:
    """The batch for ``step``: every image draws crop and knobs from its own stream."""
    fixed = config.pretrain_fixed_bin and config.phase_at(step) == "pretrain"
    policy = BinMixingPolicy.fixed() if fixed else config.bin_policy
    images, lams, deltas = [], [], []
    for i in range(config.batch_size):
        rng = step_rng(config.seed, step, i)
        ctx = sample_conditioning(config.lambda_grid, policy, rng)
        images.append(random_crops(dataset, config.patch_size, 1, rng)[0])
        lams.append(ctx.lambda_index)
        deltas.append(ctx.delta)
    return Batch(np.stack(images), np.array(lams, dtype=np.intp), np.array(deltas))


def train_step(state: TrainState, batch: Batch) -> LossDiagnostics:
    """One Adam step on the batch-mean Lagrangian; advances ``state.step``."""
    cfg = state.config
    loss_kind = "mse" if cfg.phase_at(state.step) == "pretrain" and cfg.pretrain_fixed_bin else cfg.loss_kind
    model = state.model
    model.zero_grad()
    loss, diag, _ = rd_loss(model, batch.images, batch.lambda_index, batch.delta, cfg.lambda_grid, loss_kind,
                            rng=step_rng(cfg.seed, state.step, _DITHER_STREAM), mode=cfg.quantization)
    loss.backward()
    adam_step(model.parameters(), cfg.optimizer, state.step)
    state.step += 1
    state.update_averages(diag)
    return diag


def save_state(path: str | Path, state: TrainState) -> None:
    extra = {"train." + k: v for k, v in state.config.to_dict().items() if not k.startswith("arch.")}
    extra["state.step"] = str(state.step)
    extra["state.averages"] = json.dumps(state.averages)
    params = state.model.named_parameters()
    extra["state.adam_steps"] = json.dumps({name: p.adam.step for name, p in params})
    ck = ckpt_io.model_checkpoint(state.model, extra, state.config.lambda_grid.values)
    for name, p in state.model.named_parameters():
        ck.blocks["adam.m/" + name] = p.adam.m
        ck.blocks["adam.v/" + name] = p.adam.v
    ckpt_io.write(path, ck)


def load_state(path: str | Path, config: TrainConfig | None = None) -> TrainState:
    ck = ckpt_io.read(path)
    model = ckpt_io.model_from_checkpoint(ck)
    if config is None:
        raw = {k[6:]: v for k, v in ck.config.items() if k.startswith("train.")}
        raw.update({k: v for k, v in ck.config.items() if k.startswith("arch.")})
        config = TrainConfig.from_dict(raw)
    steps = json.loads(ck.config.get("state.adam_steps", "{}"))
    for name, p in model.named_parameters():
        if "adam.m/" + name in ck.blocks:
            p.adam.m = ck.blocks["adam.m/" + name].astype(p.dtype)
            p.adam.v = ck.blocks["adam.v/" + name].astype(p.dtype)
            p.adam.step = int(steps.get(name, 0))
    return TrainState(model, config, int(ck.config.get("state.step", 0)),
                      json.loads(ck.config.get("state.averages", "{}")))


@dataclass
class TrainResult:
    state: TrainState
    log: list[dict]
    phase_boundary: int
    pretrain_model: VariableRateModel | None = None


def _log_record(state: TrainState, window: list[LossDiagnostics], lr: float) -> dict:
    cfg = state.config
    loss = np.concatenate([d.loss for d in window])
    bits = np.concatenate([d.bits for d in window])
    mse = np.concatenate([d.mse for d in window])
    lams = np.concatenate([d.lambda_index for d in window])
    per_lambda = {}
    for k in range(len(cfg.lambda_grid)):
        sel = lams == k
        if np.any(sel):
            per_lambda[str(k)] = {"loss": float(loss[sel].mean()), "bits": float(bits[sel].mean()),
                                  "mse": float(mse[sel].mean())}
    return {
        "step": state.step,
        "phase": cfg.phase_at(state.step - 1),
        "loss": float(loss.mean()),
        "bits": float(bits.mean()),
        "mse": float(mse.mean()),
        "lr": lr,
        "lambda_index_histogram": np.bincount(lams, minlength=len(cfg.lambda_grid)).tolist(),
        "per_lambda": per_lambda,
    }


def train_run(
    config: TrainConfig,
    dataset: Sequence[np.ndarray] | None = None,
    out_dir: str | Path | None = None,
    state: TrainState | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run (or resume) both phases.

    With ``out_dir`` set, writes ``train_log.jsonl``, ``pretrain.vrckpt`` at
    the phase boundary, periodic ``state.vrckpt`` files and ``final.vrckpt``.
    """
    dataset = make_dataset(config) if dataset is None else dataset
    state = new_state(config) if state is None else state
    out = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "a" if state.step else "w")
    log: list[dict] = []
    boundary = config.pretrain_steps
    pretrain_model = None
    window: list[LossDiagnostics] = []
    t0 = time.time()
    try:
        while state.step < config.steps:
            if state.step == boundary and boundary > 0:
                pretrain_model = VariableRateModel(config.arch)
                pretrain_model.load_state_dict(state.model.state_dict())
                record = {"step": state.step, "event": "phase_boundary", "phase": "finetune"}
                log.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                    save_state(out / "pretrain.vrckpt", state)
            batch = make_batch(config, dataset, state.step)
            window.append(train_step(state, batch))
            if state.step % config.log_every == 0 or state.step == config.steps:
                record = _log_record(state, window, config.optimizer.lr_at(state.step - 1))
                record["elapsed_s"] = round(time.time() - t0, 3)
                window = []
                log.append(record)
                if log_file:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if progress:
                    progress(record)
            if out is not None and config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_state(out / "state.vrckpt", state)
    finally:
        if log_file:
            log_file.close()
    if out is not None:
        save_state(out / "final.vrckpt", state)
    return TrainResult(state, log, boundary, pretrain_model)
