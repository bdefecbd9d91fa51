"""Adam optimization, training / evaluation loops and checkpoint persistence."""
from __future__ import annotations

import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as dataio
from .metrics import MetricReport, disparity_metrics, smooth_l1_loss
from .model import ModelConfig, ModelParams, forward
from .ops import RunningStats
from .tensor import no_grad

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- Adam

class NonFiniteGradient(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient in parameter {name!r}; step aborted")
        self.name = name


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params, **hyper):
        state = cls(**hyper)
        for name, p in _named(params):
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        return state


def _named(params):
    if isinstance(params, ModelParams):
        return params.named()
    if isinstance(params, dict):
        return list(params.items())
    return [(p.name, p) for p in params]


def adam_step(params, state: AdamState) -> int:
    """One bias-corrected Adam update; clears gradients. Returns the number of tensors updated."""
    named = _named(params)
    for name, p in named:
        if p.grad is None or not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradient(name)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in named:
        g = p.grad
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.zero_grad()
    return len(named)


# ---------------------------------------------------------------- checkpoints

MAGIC = b"MSDC"
VERSION = 1


class CheckpointError(ValueError):
    pass


class BadCheckpointMagic(CheckpointError):
    pass


class UnsupportedVersion(CheckpointError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict  # name -> array
    stats: dict  # layer -> (mean, var)
    adam: AdamState
    step: int = 0
    rng_state: dict | None = None
    version: int = VERSION

    @classmethod
    def capture(cls, net: ModelParams, adam: AdamState, step, rng=None):
        return cls(net.config,
                   {k: p.data.copy() for k, p in net.params.items()},
                   {k: (s.mean.copy(), s.var.copy()) for k, s in net.stats.items()},
                   AdamState({k: a.copy() for k, a in adam.m.items()},
                             {k: a.copy() for k, a in adam.v.items()},
                             adam.t, adam.lr, adam.beta1, adam.beta2, adam.eps),
                   step, rng.bit_generator.state if rng is not None else None)

    def restore_params(self) -> ModelParams:
        net = ModelParams.initialize(self.config, seed=0)
        dtype = np.dtype(self.config.dtype)
        missing = set(net.params) ^ set(self.params)
        if missing:
            raise CheckpointError(f"checkpoint/model parameter mismatch: {sorted(missing)[:5]}")
        for k, p in net.params.items():
            arr = self.params[k]
            if arr.shape != p.shape:
                raise CheckpointError(f"{k}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(dtype, copy=True)
            p.zero_grad()
        for k, (m, v) in self.stats.items():
            net.stats[k] = RunningStats(m.astype(dtype, copy=True), v.astype(dtype, copy=True))
        return net

    def restore_adam(self) -> AdamState:
        dtype = np.dtype(self.config.dtype)
        a = self.adam
        return AdamState({k: x.astype(dtype, copy=True) for k, x in a.m.items()},
                         {k: x.astype(dtype, copy=True) for k, x in a.v.items()},
                         a.t, a.lr, a.beta1, a.beta2, a.eps)

    def restore_rng(self, seed):
        rng = np.random.default_rng(seed)
        if self.rng_state is not None:
            rng.bit_generator.state = self.rng_state
        return rng


def _records(ckpt: Checkpoint):
    for k in sorted(ckpt.params):
        yield "param/" + k, ckpt.params[k]
    for k in sorted(ckpt.stats):
        yield "bn.mean/" + k, ckpt.stats[k][0]
        yield "bn.var/" + k, ckpt.stats[k][1]
    for k in sorted(ckpt.adam.m):
        yield "adam.m/" + k, ckpt.adam.m[k]
        yield "adam.v/" + k, ckpt.adam.v[k]


def save_checkpoint(ckpt: Checkpoint) -> bytes:
    """Little-endian container: magic, u32 version, u32-length JSON metadata,
    u32 record count, then (name, shape, float32 payload) records."""
    meta = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "adam": {"t": ckpt.adam.t, "lr": ckpt.adam.lr, "beta1": ckpt.adam.beta1,
                 "beta2": ckpt.adam.beta2, "eps": ckpt.adam.eps},
        "rng_state": ckpt.rng_state,
    }
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    records = list(_records(ckpt))
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", ckpt.version, len(meta_b)))
    out.write(meta_b)
    out.write(struct.pack("<I", len(records)))
    for name, arr in records:
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return out.getvalue()


class _Reader:
    def __init__(self, buf):
        self.buf, self.pos = buf, 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CorruptCheckpoint(f"corrupt length: need {n} bytes at offset {self.pos}, "
                                    f"only {len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or r.take(4) != MAGIC:
        raise BadCheckpointMagic(f"bad magic {bytes(buf[:4])!r}: not an MSDC checkpoint")
    version = r.u32()
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    try:
        meta = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpoint(f"corrupt metadata: {exc}") from exc
    tensors = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        ndim = r.u32()
        shape = tuple(r.u32(ndim)) if ndim > 1 else ((r.u32(),) if ndim == 1 else ())
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(buf):
        raise CorruptCheckpoint(f"corrupt length: {len(buf) - r.pos} trailing bytes")
    params, stats, m, v = {}, {}, {}, {}
    for name, arr in tensors.items():
        kind, _, key = name.partition("/")
        if kind == "param":
            params[key] = arr
        elif kind == "bn.mean":
            stats.setdefault(key, [None, None])[0] = arr
        elif kind == "bn.var":
            stats.setdefault(key, [None, None])[1] = arr
        elif kind == "adam.m":
            m[key] = arr
        elif kind == "adam.v":
            v[key] = arr
        else:
            raise CorruptCheckpoint(f"unknown record {name!r}")
    a = meta["adam"]
    adam = AdamState(m, v, a["t"], a["lr"], a["beta1"], a["beta2"], a["eps"])
    return Checkpoint(ModelConfig.from_dict(meta["config"]), params,
                      {k: tuple(s) for k, s in stats.items()}, adam, meta["step"],
                      meta["rng_state"], version)


# ---------------------------------------------------------------- training

@dataclass
class TrainRunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data_dir: str | None = None
    synth_count: int = 8  # used when data_dir is None
    height: int = 64
    width: int = 128
    batch_size: int = 2
    max_steps: int = 2000
    seed: int = 0
    crop: tuple | None = None  # (h, w); the published recipe uses (256, 512)
    checkpoint_every: int = 0
    log_every: int = 1
    lr: float = 1e-3

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")


@dataclass
class LogRecord:
    step: int
    loss: float
    epe: float
    seconds: float


LOG_HEADER = "step,loss,epe,seconds"


def format_log(records, with_time=True):
    lines = [LOG_HEADER if with_time else "step,loss,epe"]
    for r in records:
        row = f"{r.step},{r.loss!r},{r.epe!r}"
        lines.append(row + (f",{r.seconds:.6f}" if with_time else ""))
    return "\n".join(lines) + "\n"


def load_samples(cfg: TrainRunConfig):
    if cfg.data_dir:
        return dataio.load_dataset(cfg.data_dir)
    return dataio.synthetic_dataset(cfg.synth_count, cfg.height, cfg.width,
                                    cfg.model.max_disparity, seed=cfg.seed)


def stack_batch(samples, dtype):
    left = np.stack([s.left for s in samples]).astype(dtype)
    right = np.stack([s.right for s in samples]).astype(dtype)
    gt = np.stack([np.where(s.valid, s.gt, 0) for s in samples]).astype(dtype)
    return left, right, gt


def _check_shapes(samples, cfg: TrainRunConfig):
    div = cfg.model.spatial_divisor()
    crop = cfg.crop
    for i, s in enumerate(samples):
        h, w = crop if crop else (s.height, s.width)
        if h % div or w % div:
            raise ValueError(f"sample {i}: extents {h}x{w} not divisible by {div} required by the model")
        if crop and (crop[0] > s.height or crop[1] > s.width):
            raise ValueError(f"sample {i}: crop {crop} larger than image {s.height}x{s.width}")
    if not crop and len({(s.height, s.width) for s in samples}) > 1:
        raise ValueError("samples differ in size; set a crop to batch them")
    div_d = cfg.model.disparity_divisor()
    if cfg.model.max_disparity % div_d:
        raise ValueError(f"max_disparity {cfg.model.max_disparity} not divisible by {div_d}")


def run_training(cfg: TrainRunConfig, samples=None, resume: Checkpoint | None = None,
                 on_checkpoint=None, on_step=None):
    """Train with smooth-L1 loss and Adam; returns (log records, final Checkpoint).

    ``on_checkpoint(ckpt)`` fires every ``checkpoint_every`` steps and
    ``on_step(record)`` after every step.
    """
    samples = load_samples(cfg) if samples is None else list(samples)
    if not samples:
        raise ValueError("training dataset is empty")
    if len(samples) < cfg.batch_size:
        raise ValueError(f"dataset of {len(samples)} samples is smaller than batch {cfg.batch_size}")
    _check_shapes(samples, cfg)
    if resume is not None:
        if resume.config != cfg.model:
            raise ValueError("checkpoint model config differs from the run config")
        net, adam = resume.restore_params(), resume.restore_adam()
        rng, step = resume.restore_rng(cfg.seed), resume.step
    else:
        net = ModelParams.initialize(cfg.model, seed=cfg.seed)
        adam = AdamState.fresh(net, lr=cfg.lr)
        rng, step = np.random.default_rng([cfg.seed, 1]), 0

    dtype = np.dtype(cfg.model.dtype)
    per_epoch = len(samples) // cfg.batch_size
    records = []
    start = time.perf_counter()
    while step < cfg.max_steps:
        epoch, pos = divmod(step, per_epoch)
        order = dataio.epoch_order(len(samples), epoch, cfg.seed)
        chosen = [samples[i] for i in order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]]
        if cfg.crop:
            chosen = [dataio.random_crop(s, cfg.crop[0], cfg.crop[1], rng) for s in chosen]
        left, right, gt = stack_batch(chosen, dtype)
        pred = forward(left, right, net, training=True)
        loss = smooth_l1_loss(pred, gt)
        loss.backward()
        adam_step(net, adam)
        step += 1
        valid = gt != 0
        epe = float(np.abs(pred.data - gt)[valid].astype(np.float64).mean())
        rec = LogRecord(step, float(loss.data), epe, time.perf_counter() - start)
        records.append(rec)
        if on_step is not None:
            on_step(rec)
        if cfg.log_every and step % cfg.log_every == 0:
            log.info("step %d loss %.4f epe %.4f", step, rec.loss, rec.epe)
        if on_checkpoint is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0:
            on_checkpoint(Checkpoint.capture(net, adam, step, rng))
    return records, Checkpoint.capture(net, adam, step, rng)


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalResult:
    reports: list  # MetricReport or error string per sample
    aggregate: MetricReport | None
    status: int  # 0 ok, nonzero when any sample failed


def predict(net: ModelParams, left, right):
    """Inference-mode disparity for one (3, H, W) pair or a batch."""
    single = np.ndim(left) == 3
    dtype = np.dtype(net.config.dtype)
    left = np.asarray(left, dtype=dtype)[None] if single else np.asarray(left, dtype=dtype)
    right = np.asarray(right, dtype=dtype)[None] if single else np.asarray(right, dtype=dtype)
    with no_grad():
        out = forward(left, right, net, training=False).data
    return out[0] if single else out


def evaluate_model(model, samples, predictor=None) -> EvalResult:
    """Per-sample and mean MetricReport in inference mode.

    ``model`` is a Checkpoint or ModelParams; ``predictor(sample)`` may
    replace the network entirely (used for oracle stubs).
    """
    net = model.restore_params() if isinstance(model, Checkpoint) else model
    reports, status = [], 0
    for i, s in enumerate(samples):
        try:
            pred = predictor(s) if predictor is not None else predict(net, s.left, s.right)
            reports.append(disparity_metrics(pred, s.gt, s.valid))
        except ValueError as exc:
            reports.append(f"sample {i}: {exc}")
            status = 1
    good = [r for r in reports if isinstance(r, MetricReport)]
    aggregate = MetricReport.mean(good) if good else None
    return EvalResult(reports, aggregate, status if good else 1)
