"""The speaker embedding network and its training loop.

Architecture: five dilated 1-d convolution layers over frames (kernel
sizes 5,3,3,1,1 with dilations 1,2,3,1,1), each followed by relu then
batch normalization; statistics pooling to [mean, stddev]; two dense
segment layers; a softmax classification head over training speakers;
and, when mtl_order > 0, a linear head that reconstructs the first
mtl_order per-dimension statistics of the input crop. The embedding is
the affine output of the first segment layer, taken before its relu and
batch norm, so it is untouched by anything downstream of that layer.

The joint objective is task_weight * reconstruction_mse +
(1 - task_weight) * cross_entropy. task_weight 0 with mtl_order 0 is
the plain classification baseline.

Checkpoints are little-endian binary: magic "XVCK", u32 format version,
a length-prefixed utf-8 key=value blob (config, step counter, corpus
seed, optimizer hyperparameters), then u32 tensor count and each tensor
as u32 rank, u32 dims, float32 data. Tensors appear in declaration
order: trainable parameters, batch-norm running stats, then optimizer
moments. Models train in float32; save -> load is bitwise exact and
resuming reproduces the uninterrupted loss trajectory.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import binio
from .autodiff import (
    BatchNormState,
    GradCheckReport,
    OptimizerState,
    Tape,
    Tensor,
    add,
    backward,
    batchnorm1d,
    conv1d_dilated,
    dense,
    grad_check,
    mse_loss,
    optimizer_step,
    relu,
    reshape,
    scale,
    softmax_cross_entropy,
)
from .data import FeatureMatrix, Manifest, make_batches
from .errors import (
    BadMagicError,
    ConfigurationError,
    DataError,
    DimMismatchError,
    InputTooShortError,
    ParseError,
    TrainingDivergedError,
)
from .stats import stats_pool

__all__ = [
    "ModelConfig",
    "Model",
    "Embedding",
    "ForwardResult",
    "LossParts",
    "EpochStats",
    "OverheadReport",
    "StepTimeReport",
    "receptive_field",
    "build_model",
    "forward",
    "multitask_loss",
    "train",
    "extract_embedding",
    "parameter_count",
    "parameter_overhead",
    "step_time_overhead",
    "save_checkpoint",
    "load_checkpoint",
    "gradient_suite",
    "MINIATURE_CONFIG",
]

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"XVCK"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Network and training hyperparameters. Defaults are the full-size net."""

    feature_dim: int
    num_speakers: int
    frame_widths: tuple[int, ...] = (512, 512, 512, 512, 1536)
    kernel_sizes: tuple[int, ...] = (5, 3, 3, 1, 1)
    dilations: tuple[int, ...] = (1, 2, 3, 1, 1)
    segment_width: int = 512
    mtl_order: int = 4
    task_weight: float = 0.3
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 20
    crop_length: int = 200
    seed: int = 0

    def __post_init__(self):
        self.frame_widths = tuple(int(w) for w in self.frame_widths)
        self.kernel_sizes = tuple(int(k) for k in self.kernel_sizes)
        self.dilations = tuple(int(d) for d in self.dilations)

    def validate(self) -> None:
        problems = []
        if self.feature_dim < 1:
            problems.append(f"feature_dim must be >= 1, got {self.feature_dim}")
        if self.num_speakers < 2:
            problems.append(f"num_speakers must be >= 2, got {self.num_speakers}")
        if not (len(self.frame_widths) == len(self.kernel_sizes) == len(self.dilations) == 5):
            problems.append("frame_widths, kernel_sizes, and dilations must each have 5 entries")
        if any(w < 1 for w in self.frame_widths):
            problems.append(f"frame widths must be positive, got {self.frame_widths}")
        if any(k < 1 for k in self.kernel_sizes):
            problems.append(f"kernel sizes must be positive, got {self.kernel_sizes}")
        if any(d < 1 for d in self.dilations):
            problems.append(f"dilations must be positive, got {self.dilations}")
        if self.segment_width < 1:
            problems.append(f"segment_width must be >= 1, got {self.segment_width}")
        if self.mtl_order not in (0, 1, 2, 3, 4):
            problems.append(f"mtl_order must be in 0..4, got {self.mtl_order}")
        if not 0.0 <= self.task_weight <= 1.0:
            problems.append(f"task_weight must lie in [0, 1], got {self.task_weight}")
        if self.task_weight > 0.0 and self.mtl_order == 0:
            problems.append("task_weight > 0 requires mtl_order >= 1")
        if self.learning_rate <= 0:
            problems.append(f"learning_rate must be positive, got {self.learning_rate}")
        if self.weight_decay < 0:
            problems.append(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            problems.append(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if self.adam_eps <= 0:
            problems.append(f"adam_eps must be positive, got {self.adam_eps}")
        if self.batch_size < 2:
            problems.append(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            problems.append(f"epochs must be >= 1, got {self.epochs}")
        if len(self.kernel_sizes) == len(self.dilations) == 5:
            rf = receptive_field(self)
            if self.crop_length < rf:
                problems.append(f"crop_length {self.crop_length} < receptive field {rf}")
        if self.seed < 0:
            problems.append(f"seed must be non-negative, got {self.seed}")
        if problems:
            raise ConfigurationError("; ".join(problems))


def receptive_field(config: ModelConfig) -> int:
    """Frames of context one output frame sees after the conv stack."""
    return 1 + sum((k - 1) * d for k, d in zip(config.kernel_sizes, config.dilations))


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    bn_states: dict[str, BatchNormState]
    dtype: np.dtype
    step: int = 0
    trained_epochs: int = 0
    corpus_seed: int = 0
    opt_state: OptimizerState | None = None


@dataclass
class Embedding:
    utt_id: str
    vector: np.ndarray


@dataclass
class ForwardResult:
    logits: Tensor
    reconstruction: Tensor | None


@dataclass
class LossParts:
    total: Tensor
    ce: Tensor
    mse: Tensor


@dataclass
class EpochStats:
    epoch: int
    loss: float
    ce: float
    mse: float


@dataclass
class OverheadReport:
    baseline_params: int
    mtl_params: int
    added_params: int
    ratio: float


@dataclass
class StepTimeReport:
    baseline_seconds: float
    mtl_seconds: float
    overhead: float


def _init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def build_model(config: ModelConfig, dtype=np.float32) -> Model:
    """Seeded construction; the auxiliary head is drawn last, so a model
    with and without it shares every other initial parameter."""
    config.validate()
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ConfigurationError(f"model dtype must be float32 or float64, got {dtype}")
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    bn_states: dict[str, BatchNormState] = {}

    def param(name: str, arr: np.ndarray) -> None:
        params[name] = Tensor(arr, requires_grad=True, name=name)

    def norm_layer(name: str, width: int) -> None:
        param(f"{name}.gamma", np.ones(width, dtype=dtype))
        param(f"{name}.beta", np.zeros(width, dtype=dtype))
        bn_states[name] = BatchNormState.create(width, dtype=dtype)

    in_ch = config.feature_dim
    for i, (width, k, _) in enumerate(zip(config.frame_widths, config.kernel_sizes,
                                          config.dilations), start=1):
        name = f"l{i}"
        param(f"{name}.weight", _init_uniform(rng, (width, in_ch, k), in_ch * k, dtype))
        param(f"{name}.bias", np.zeros(width, dtype=dtype))
        norm_layer(name, width)
        in_ch = width

    pooled_dim = 2 * config.frame_widths[-1]
    seg = config.segment_width
    param("l6.weight", _init_uniform(rng, (seg, pooled_dim), pooled_dim, dtype))
    param("l6.bias", np.zeros(seg, dtype=dtype))
    norm_layer("l6", seg)
    param("l7.weight", _init_uniform(rng, (seg, seg), seg, dtype))
    param("l7.bias", np.zeros(seg, dtype=dtype))
    norm_layer("l7", seg)
    param("softmax.weight", _init_uniform(rng, (config.num_speakers, seg), seg, dtype))
    param("softmax.bias", np.zeros(config.num_speakers, dtype=dtype))
    if config.mtl_order:
        out_dim = config.mtl_order * config.feature_dim
        param("mtl.weight", _init_uniform(rng, (out_dim, seg), seg, dtype))
        param("mtl.bias", np.zeros(out_dim, dtype=dtype))
    return Model(config=config, params=params, bn_states=bn_states, dtype=dtype)


def forward(model: Model, batch, mode: str = "train", tape: Tape | None = None) -> ForwardResult:
    """Run a [N, L, D] batch through the network.

    Returns speaker logits and, when the model has an auxiliary head,
    the reconstructed statistics vector. Frame-level batch norm is
    applied across all N * T frames of the batch.
    """
    cfg = model.config
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=model.dtype))
    if x.ndim != 3:
        raise ConfigurationError(f"batch must be [N, L, D], got shape {x.shape}")
    n, length, d = x.shape
    if d != cfg.feature_dim:
        raise ConfigurationError(f"batch feature dim {d} != model feature dim {cfg.feature_dim}")
    rf = receptive_field(cfg)
    if length < rf:
        raise InputTooShortError(f"input of {length} frames shorter than receptive field {rf}")

    h = x
    p = model.params
    for i, dilation in enumerate(cfg.dilations, start=1):
        name = f"l{i}"
        h = conv1d_dilated(h, p[f"{name}.weight"], p[f"{name}.bias"], dilation, tape)
        h = relu(h, tape)
        t_i, width = h.shape[1], h.shape[2]
        h = reshape(h, (n * t_i, width), tape)
        h = batchnorm1d(h, p[f"{name}.gamma"], p[f"{name}.beta"], mode, model.bn_states[name], tape)
        h = reshape(h, (n, t_i, width), tape)

    pooled = stats_pool(h, tape)
    h6 = dense(pooled, p["l6.weight"], p["l6.bias"], "relu", tape)
    h6 = batchnorm1d(h6, p["l6.gamma"], p["l6.beta"], mode, model.bn_states["l6"], tape)
    h7 = dense(h6, p["l7.weight"], p["l7.bias"], "relu", tape)
    h7 = batchnorm1d(h7, p["l7.gamma"], p["l7.beta"], mode, model.bn_states["l7"], tape)
    logits = dense(h7, p["softmax.weight"], p["softmax.bias"], "none", tape)
    recon = None
    if cfg.mtl_order:
        recon = dense(h7, p["mtl.weight"], p["mtl.bias"], "none", tape)
    return ForwardResult(logits=logits, reconstruction=recon)


def multitask_loss(logits: Tensor, labels, reconstruction: Tensor | None,
                   targets: Tensor | None, task_weight: float,
                   tape: Tape | None = None) -> LossParts:
    """task_weight * mse + (1 - task_weight) * ce, with both parts exposed."""
    if not 0.0 <= task_weight <= 1.0:
        raise ConfigurationError(f"task_weight must lie in [0, 1], got {task_weight}")
    ce = softmax_cross_entropy(logits, labels, tape)
    if reconstruction is None:
        if task_weight != 0.0:
            raise ConfigurationError("task_weight > 0 but the model has no reconstruction head")
        return LossParts(total=ce, ce=ce, mse=Tensor(np.zeros((), dtype=ce.dtype)))
    if targets is None:
        raise ConfigurationError("reconstruction present but targets missing")
    mse = mse_loss(reconstruction, targets, tape)
    total = add(scale(mse, task_weight, tape), scale(ce, 1.0 - task_weight, tape), tape)
    return LossParts(total=total, ce=ce, mse=mse)


def _snapshot(model: Model) -> dict:
    state = {
        "params": {k: p.data.copy() for k, p in model.params.items()},
        "bn": {k: (s.mean.copy(), s.var.copy()) for k, s in model.bn_states.items()},
        "step": model.step,
        "trained_epochs": model.trained_epochs,
        "opt": None,
    }
    if model.opt_state is not None:
        o = model.opt_state
        state["opt"] = (o.step_count,
                        {k: m.copy() for k, m in o.first_moment.items()},
                        {k: v.copy() for k, v in o.second_moment.items()})
    return state


def _restore(model: Model, state: dict) -> None:
    for k, arr in state["params"].items():
        model.params[k].data = arr.copy()
    for k, (mean, var) in state["bn"].items():
        model.bn_states[k].mean = mean.copy()
        model.bn_states[k].var = var.copy()
    model.step = state["step"]
    model.trained_epochs = state["trained_epochs"]
    if state["opt"] is not None and model.opt_state is not None:
        count, first, second = state["opt"]
        model.opt_state.step_count = count
        for k in first:
            model.opt_state.first_moment[k] = first[k].copy()
            model.opt_state.second_moment[k] = second[k].copy()


def _write_log(path: Path, rows: list[tuple]) -> None:
    with path.open("w") as fh:
        fh.write("epoch,step,loss,ce,mse\n")
        for epoch, step_i, lv, cv, mv in rows:
            fh.write(f"{epoch},{step_i},{lv!r},{cv!r},{mv!r}\n")


def train(model: Model, manifest: Manifest, epochs: int | None = None,
          out_dir: Path | str | None = None) -> list[EpochStats]:
    """Train for `epochs` further epochs (default config.epochs).

    Epoch numbering continues from model.trained_epochs, and batch
    shuffling is a pure function of (config.seed, epoch), so training
    resumed from a checkpoint follows the exact trajectory of an
    uninterrupted run. With out_dir set, writes train_log.csv (one row
    per step: epoch,step,loss,ce,mse) and model.ckpt. A non-finite loss
    or gradient aborts, restores the last epoch-end state, saves it as
    the checkpoint, and raises TrainingDivergedError.
    """
    cfg = model.config
    speakers = manifest.speakers
    if len(speakers) < 2:
        raise DataError(f"training needs >= 2 speakers, manifest has {len(speakers)}")
    if len(speakers) != cfg.num_speakers:
        raise ConfigurationError(
            f"model was built for {cfg.num_speakers} speakers, manifest has {len(speakers)}")
    if model.opt_state is None:
        model.opt_state = OptimizerState(model.params, cfg.learning_rate, cfg.beta1,
                                         cfg.beta2, cfg.adam_eps)
    num_epochs = cfg.epochs if epochs is None else epochs
    if num_epochs < 1:
        raise ConfigurationError(f"epochs must be >= 1, got {num_epochs}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows: list[tuple] = []
    epoch_stats: list[EpochStats] = []
    last_good = _snapshot(model)
    first = model.trained_epochs + 1
    try:
        for epoch in range(first, first + num_epochs):
            sums = np.zeros(3)
            count = 0
            for batch in make_batches(manifest, cfg.crop_length, cfg.batch_size,
                                      cfg.seed, epoch, cfg.mtl_order):
                tape = Tape()
                result = forward(model, batch.features, "train", tape)
                targets = Tensor(batch.targets) if batch.targets is not None else None
                parts = multitask_loss(result.logits, batch.labels, result.reconstruction,
                                       targets, cfg.task_weight, tape)
                lv = float(parts.total.data)
                cv = float(parts.ce.data)
                mv = float(parts.mse.data)
                if not math.isfinite(lv):
                    raise TrainingDivergedError(
                        f"non-finite loss at epoch {epoch}, step {model.step + 1}")
                for p in model.params.values():
                    p.grad = None
                backward(parts.total, tape)
                optimizer_step(model.params, {k: p.grad for k, p in model.params.items()},
                               model.opt_state, cfg.weight_decay)
                model.step += 1
                rows.append((epoch, model.step, lv, cv, mv))
                sums += (lv, cv, mv)
                count += 1
            if count == 0:
                raise DataError("no full batch available; shrink batch_size or add utterances")
            model.trained_epochs = epoch
            epoch_stats.append(EpochStats(epoch, *(sums / count)))
            last_good = _snapshot(model)
            log.info("epoch %d: loss=%.6f ce=%.6f mse=%.6f", epoch, *(sums / count))
    except TrainingDivergedError as err:
        _restore(model, last_good)
        rows = [r for r in rows if r[0] <= model.trained_epochs]
        if out is not None:
            ckpt = out / "model.ckpt"
            save_checkpoint(model, ckpt)
            _write_log(out / "train_log.csv", rows)
            raise TrainingDivergedError(f"{err}; last good state saved to {ckpt}") from None
        raise

    if out is not None:
        save_checkpoint(model, out / "model.ckpt")
        _write_log(out / "train_log.csv", rows)
    return epoch_stats


def extract_embedding(model: Model, utterance: FeatureMatrix | np.ndarray) -> Embedding:
    """Embed one full utterance: inference-mode frame layers, pooling,
    then the affine output of the first segment layer."""
    if isinstance(utterance, FeatureMatrix):
        utt_id, frames = utterance.utt_id, utterance.frames
    else:
        utt_id, frames = "", np.asarray(utterance)
    cfg = model.config
    frames = np.asarray(frames, dtype=model.dtype)
    if frames.ndim != 2 or frames.shape[1] != cfg.feature_dim:
        raise ConfigurationError(
            f"utterance must be [T, {cfg.feature_dim}], got shape {frames.shape}")
    rf = receptive_field(cfg)
    if frames.shape[0] < rf:
        raise InputTooShortError(
            f"utterance '{utt_id}' has {frames.shape[0]} frames, needs >= {rf}")

    h = Tensor(frames[None])
    p = model.params
    for i, dilation in enumerate(cfg.dilations, start=1):
        name = f"l{i}"
        h = conv1d_dilated(h, p[f"{name}.weight"], p[f"{name}.bias"], dilation)
        h = relu(h)
        t_i, width = h.shape[1], h.shape[2]
        h = reshape(h, (t_i, width))
        h = batchnorm1d(h, p[f"{name}.gamma"], p[f"{name}.beta"], "infer", model.bn_states[name])
        h = reshape(h, (1, t_i, width))
    pooled = stats_pool(h)
    vec = pooled.data @ p["l6.weight"].data.T + p["l6.bias"].data
    return Embedding(utt_id=utt_id, vector=vec[0].copy())


def parameter_count(config: ModelConfig) -> int:
    """Trainable parameters (weights, biases, batch-norm gamma/beta)."""
    total = 0
    in_ch = config.feature_dim
    for width, k in zip(config.frame_widths, config.kernel_sizes):
        total += width * in_ch * k + width      # conv weight + bias
        total += 2 * width                      # gamma + beta
        in_ch = width
    seg = config.segment_width
    total += seg * (2 * config.frame_widths[-1]) + seg + 2 * seg
    total += seg * seg + seg + 2 * seg
    total += config.num_speakers * seg + config.num_speakers
    if config.mtl_order:
        out_dim = config.mtl_order * config.feature_dim
        total += out_dim * seg + out_dim
    return total


def parameter_overhead(config: ModelConfig) -> OverheadReport:
    """Exact parameter cost of the auxiliary head relative to the baseline."""
    baseline = parameter_count(replace(config, mtl_order=0, task_weight=0.0))
    with_head = parameter_count(config)
    return OverheadReport(baseline_params=baseline, mtl_params=with_head,
                          added_params=with_head - baseline,
                          ratio=(with_head - baseline) / baseline)


def step_time_overhead(config: ModelConfig | None = None, num_steps: int = 200,
                       repeats: int = 3) -> StepTimeReport:
    """Wall-clock cost of a training step with the auxiliary head versus
    without, on one fixed random batch.

    Defaults to the miniature network sized up to batch 16 / crop 64 so
    the measurement reflects arithmetic, not per-op dispatch. Each
    system is timed `repeats` times after warmup and the fastest run
    wins, which filters scheduling noise.
    """
    from .stats import hos_vector

    if config is None:
        config = replace(MINIATURE_CONFIG, batch_size=16, crop_length=64)
    if config.mtl_order == 0:
        raise ConfigurationError("overhead timing needs a config with an auxiliary head")
    rng = np.random.default_rng(config.seed)
    batch = rng.normal(size=(config.batch_size, config.crop_length,
                             config.feature_dim)).astype(np.float32)
    labels = rng.integers(0, config.num_speakers, size=config.batch_size)
    targets = np.stack([hos_vector(batch[i], config.mtl_order)
                        for i in range(config.batch_size)]).astype(np.float32)

    def run_steps(cfg: ModelConfig, steps: int) -> None:
        mdl = build_model(cfg)
        mdl.opt_state = OptimizerState(mdl.params, cfg.learning_rate, cfg.beta1,
                                       cfg.beta2, cfg.adam_eps)
        tgt = Tensor(targets) if cfg.mtl_order else None
        for _ in range(steps):
            tape = Tape()
            result = forward(mdl, batch, "train", tape)
            parts = multitask_loss(result.logits, labels, result.reconstruction,
                                   tgt, cfg.task_weight, tape)
            for p in mdl.params.values():
                p.grad = None
            backward(parts.total, tape)
            optimizer_step(mdl.params, {k: p.grad for k, p in mdl.params.items()},
                           mdl.opt_state, cfg.weight_decay)

    base_cfg = replace(config, mtl_order=0, task_weight=0.0)
    best = {}
    for cfg, key in ((base_cfg, "base"), (config, "mtl")):
        run_steps(cfg, 5)  # warmup
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            run_steps(cfg, num_steps)
            times.append(time.perf_counter() - start)
        best[key] = min(times)
    return StepTimeReport(baseline_seconds=best["base"], mtl_seconds=best["mtl"],
                          overhead=(best["mtl"] - best["base"]) / best["base"])


# --- checkpoint serialization ---

_CONFIG_KEYS = ["feature_dim", "num_speakers", "frame_widths", "kernel_sizes", "dilations",
                "segment_width", "mtl_order", "task_weight", "learning_rate", "weight_decay",
                "beta1", "beta2", "adam_eps", "batch_size", "epochs", "crop_length", "seed"]
_INT_TUPLE_KEYS = {"frame_widths", "kernel_sizes", "dilations"}
_FLOAT_KEYS = {"task_weight", "learning_rate", "weight_decay", "beta1", "beta2", "adam_eps"}


def _state_arrays(model: Model) -> list[np.ndarray]:
    arrays = [p.data for p in model.params.values()]
    for state in model.bn_states.values():
        arrays.append(state.mean)
        arrays.append(state.var)
    if model.opt_state is not None:
        arrays.extend(model.opt_state.first_moment[k] for k in model.params)
        arrays.extend(model.opt_state.second_moment[k] for k in model.params)
    return arrays


def save_checkpoint(model: Model, path: Path | str) -> None:
    lines = []
    for key in _CONFIG_KEYS:
        value = getattr(model.config, key)
        if key in _INT_TUPLE_KEYS:
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    lines.append(f"step={model.step}")
    lines.append(f"trained_epochs={model.trained_epochs}")
    lines.append(f"corpus_seed={model.corpus_seed}")
    o = model.opt_state
    lines.append(f"has_opt={int(o is not None)}")
    if o is not None:
        lines.append(f"opt_step_count={o.step_count}")
        lines.append(f"opt_learning_rate={o.learning_rate!r}")
        lines.append(f"opt_beta1={o.beta1!r}")
        lines.append(f"opt_beta2={o.beta2!r}")
        lines.append(f"opt_eps={o.eps!r}")
    blob = "\n".join(lines).encode("utf-8")

    arrays = _state_arrays(model)
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        binio.write_u32(fh, CHECKPOINT_VERSION)
        binio.write_blob(fh, blob)
        binio.write_u32(fh, len(arrays))
        for arr in arrays:
            binio.write_array(fh, arr)


def _parse_blob(text: str, path: str) -> dict[str, str]:
    fields_map: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        if "=" not in line:
            raise ParseError(f"{path}: bad metadata line {line!r}")
        key, value = line.split("=", 1)
        fields_map[key.strip()] = value.strip()
    return fields_map


def load_checkpoint(path: Path | str) -> Model:
    path = Path(path)
    reader = binio.Reader(path.read_bytes(), str(path))
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise BadMagicError(f"{path}: not a model checkpoint (bad magic)")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    blob = _parse_blob(reader.take(reader.u32()).decode("utf-8"), str(path))

    kwargs = {}
    try:
        for key in _CONFIG_KEYS:
            raw = blob[key]
            if key in _INT_TUPLE_KEYS:
                kwargs[key] = tuple(int(v) for v in raw.split(","))
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(raw)
            else:
                kwargs[key] = int(raw)
        step = int(blob["step"])
        trained_epochs = int(blob["trained_epochs"])
        corpus_seed = int(blob["corpus_seed"])
        has_opt = bool(int(blob["has_opt"]))
    except KeyError as err:
        raise ParseError(f"{path}: missing metadata key {err}") from None
    except ValueError as err:
        raise ParseError(f"{path}: bad metadata value ({err})") from None

    model = build_model(ModelConfig(**kwargs), dtype=np.float32)
    model.step = step
    model.trained_epochs = trained_epochs
    model.corpus_seed = corpus_seed
    if has_opt:
        model.opt_state = OptimizerState(model.params,
                                         learning_rate=float(blob["opt_learning_rate"]),
                                         beta1=float(blob["opt_beta1"]),
                                         beta2=float(blob["opt_beta2"]),
                                         eps=float(blob["opt_eps"]))
        model.opt_state.step_count = int(blob["opt_step_count"])

    targets = _state_arrays(model)
    count = reader.u32()
    if count != len(targets):
        raise DimMismatchError(f"{path}: expected {len(targets)} tensors, file has {count}")
    for dest in targets:
        arr = binio.read_array(reader)
        if arr.shape != dest.shape:
            raise DimMismatchError(f"{path}: tensor shaped {arr.shape} where {dest.shape} expected")
        dest[...] = arr
    reader.expect_exhausted()
    return model


# --- gradient verification suite ---

# Batch 4 matters for verification: with only 2 segment-level rows,
# batch-norm curvature is violent enough that finite differences at
# step 1e-5 carry ~5e-4 truncation error and the check cannot pass.
MINIATURE_CONFIG = ModelConfig(
    feature_dim=6, num_speakers=5,
    frame_widths=(16, 16, 16, 16, 32), kernel_sizes=(5, 3, 3, 1, 1), dilations=(1, 2, 3, 1, 1),
    segment_width=12, mtl_order=4, task_weight=0.3,
    batch_size=4, epochs=1, crop_length=20, seed=7,
)


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    # Magnitudes in [0.2, 1.2]: keeps relu inputs clear of the kink so
    # the finite-difference step never crosses it.
    return rng.uniform(0.2, 1.2, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def gradient_suite(tolerance: float = 1e-4, step: float = 1e-5) -> list[tuple[str, GradCheckReport]]:
    """Finite-difference checks of every primitive and of the miniature
    network at task weights 0, 0.3, and 1. All in float64."""
    checks: list[tuple[str, GradCheckReport]] = []
    rng = np.random.default_rng(1234)

    def check(name: str, fn, wrt) -> None:
        checks.append((name, grad_check(fn, wrt, tolerance=tolerance, step=step)))

    # conv: T=9, k=3, dilation=2 -> 5 output frames
    x = Tensor(rng.normal(size=(9, 3)), requires_grad=True)
    w = Tensor(0.5 * rng.normal(size=(4, 3, 3)), requires_grad=True)
    b = Tensor(0.1 * rng.normal(size=4), requires_grad=True)
    tgt = Tensor(rng.normal(size=(1, 20)))

    def fn_conv():
        tape = Tape()
        y = conv1d_dilated(x, w, b, dilation=2, tape=tape)
        return mse_loss(reshape(y, (1, 20), tape), tgt, tape), tape

    check("conv1d_dilated", fn_conv, {"input": x, "weight": w, "bias": b})

    xb = Tensor(rng.normal(size=(2, 9, 3)), requires_grad=True)
    tgt_b = Tensor(rng.normal(size=(2, 20)))

    def fn_conv_batched():
        tape = Tape()
        y = conv1d_dilated(xb, w, b, dilation=2, tape=tape)
        return mse_loss(reshape(y, (2, 20), tape), tgt_b, tape), tape

    check("conv1d_dilated.batched", fn_conv_batched, {"input": xb, "weight": w, "bias": b})

    # dense, both activations
    xd = Tensor(_away_from_zero(rng, (4, 5)), requires_grad=True)
    wd = Tensor(_away_from_zero(rng, (3, 5)), requires_grad=True)
    bd = Tensor(0.1 * rng.normal(size=3), requires_grad=True)
    tgt_d = Tensor(rng.normal(size=(4, 3)))
    for activation in ("none", "relu"):
        def fn_dense(act=activation):
            tape = Tape()
            y = dense(xd, wd, bd, act, tape)
            return mse_loss(y, tgt_d, tape), tape
        check(f"dense.{activation}", fn_dense, {"input": xd, "weight": wd, "bias": bd})

    # relu
    xr = Tensor(_away_from_zero(rng, (3, 4)), requires_grad=True)
    tgt_r = Tensor(rng.normal(size=(3, 4)))

    def fn_relu():
        tape = Tape()
        return mse_loss(relu(xr, tape), tgt_r, tape), tape

    check("relu", fn_relu, {"input": xr})

    # batchnorm, train mode
    xn = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    gn = Tensor(1.0 + 0.1 * rng.normal(size=4), requires_grad=True)
    bn = Tensor(0.1 * rng.normal(size=4), requires_grad=True)
    bn_state = BatchNormState.create(4, dtype=np.float64)
    tgt_n = Tensor(rng.normal(size=(6, 4)))

    def fn_bn():
        tape = Tape()
        y = batchnorm1d(xn, gn, bn, "train", bn_state, tape)
        return mse_loss(y, tgt_n, tape), tape

    check("batchnorm1d.train", fn_bn, {"input": xn, "gamma": gn, "beta": bn})

    # stats pooling
    xp = Tensor(rng.normal(size=(7, 5)), requires_grad=True)
    tgt_p = Tensor(rng.normal(size=(1, 10)))

    def fn_pool():
        tape = Tape()
        y = stats_pool(xp, tape)
        return mse_loss(reshape(y, (1, 10), tape), tgt_p, tape), tape

    check("stats_pool", fn_pool, {"frames": xp})

    # cross entropy straight off a leaf
    xl = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
    labels = np.array([0, 3, 1, 2, 3])

    def fn_ce():
        tape = Tape()
        return softmax_cross_entropy(xl, labels, tape), tape

    check("softmax_cross_entropy", fn_ce, {"logits": xl})

    # mse on a leaf
    xm = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
    tgt_m = Tensor(rng.normal(size=(3, 6)))

    def fn_mse():
        tape = Tape()
        return mse_loss(xm, tgt_m, tape), tape

    check("mse_loss", fn_mse, {"pred": xm})

    # reshape + scale + add glue
    xg = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    tgt_g1 = Tensor(rng.normal(size=(3, 4)))
    tgt_g2 = Tensor(rng.normal(size=(2, 6)))

    def fn_glue():
        tape = Tape()
        a = mse_loss(reshape(xg, (3, 4), tape), tgt_g1, tape)
        c = mse_loss(xg, tgt_g2, tape)
        return add(scale(a, 0.3, tape), scale(c, 0.7, tape), tape), tape

    check("reshape+scale+add", fn_glue, {"input": xg})

    # full miniature network at three task weights
    from .stats import hos_vector  # local import avoids a cycle at module load

    net_rng = np.random.default_rng(99)
    mini_batch = np.asarray(net_rng.normal(size=(4, 20, 6)), dtype=np.float64)
    mini_labels = np.array([0, 2, 4, 1])
    mini_targets = np.concatenate([hos_vector(mini_batch[i], 4)[None] for i in range(4)])
    for alpha in (0.0, 0.3, 1.0):
        mini = build_model(replace(MINIATURE_CONFIG, task_weight=alpha), dtype=np.float64)
        batch_t = Tensor(mini_batch)
        targets_t = Tensor(mini_targets)

        def fn_net(m=mini, a=alpha):
            tape = Tape()
            result = forward(m, batch_t, "train", tape)
            parts = multitask_loss(result.logits, mini_labels, result.reconstruction,
                                   targets_t, a, tape)
            return parts.total, tape

        check(f"network.alpha={alpha:g}", fn_net, mini.params)
    return checks
