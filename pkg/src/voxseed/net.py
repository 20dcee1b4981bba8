"""A minimal differentiable 3D U-Net with exact hand-written backward.

Architecture, fixed up to depth and width: per encoder level two
(conv3x3x3 -> ReLU -> dropout) blocks, 2x max-pool between levels; decoder
levels mirror with nearest-neighbour 2x upsampling and skip concatenation
(upsampled channels first); final 1x1x1 conv to two logits with no dropout.
The tensor feeding that output conv is exposed as the penultimate feature map.

Everything operates on batches (B, C, H, W, D); the single-volume API wraps
batch size 1.  Training runs float32; float64 parameters make finite
difference checks sharp.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import backend
from .errors import ShapeError, TrainingDivergenceError
from .volume import FeatureMap, Volume3D


@dataclass
class NetConfig:
    in_channels: int = 1
    out_classes: int = 2
    levels: int = 3
    base_filters: int = 8
    dropout_rate: float = 0.15

    def validate(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.base_filters < 2:
            raise ValueError(f"base_filters must be >= 2, got {self.base_filters}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.in_channels < 1 or self.out_classes != 2:
            raise ValueError("in_channels >= 1 and out_classes == 2 required")
        return self


@dataclass
class NetParams:
    """Named conv tensors plus the config that fixes their shapes."""

    config: NetConfig
    tensors: dict

    @property
    def dtype(self):
        return self.tensors["out_w"].dtype

    def copy(self):
        return NetParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def check_finite(self):
        for name, t in self.tensors.items():
            if not np.isfinite(t).all():
                raise TrainingDivergenceError(f"non-finite values in parameter {name}")
        return self


def param_shapes(config: NetConfig):
    """Parameter names and shapes in their canonical (creation) order."""
    shapes = {}
    cin = config.in_channels
    for lvl in range(config.levels):
        f = config.base_filters << lvl
        shapes[f"enc{lvl}a_w"] = (f, cin, 3, 3, 3)
        shapes[f"enc{lvl}a_b"] = (f,)
        shapes[f"enc{lvl}b_w"] = (f, f, 3, 3, 3)
        shapes[f"enc{lvl}b_b"] = (f,)
        cin = f
    for lvl in range(config.levels - 2, -1, -1):
        f = config.base_filters << lvl
        fin = (config.base_filters << (lvl + 1)) + f
        shapes[f"dec{lvl}a_w"] = (f, fin, 3, 3, 3)
        shapes[f"dec{lvl}a_b"] = (f,)
        shapes[f"dec{lvl}b_w"] = (f, f, 3, 3, 3)
        shapes[f"dec{lvl}b_b"] = (f,)
    shapes["out_w"] = (config.out_classes, config.base_filters)
    shapes["out_b"] = (config.out_classes,)
    return shapes


def he_init(config: NetConfig, rng, dtype=np.float32) -> NetParams:
    """Weights ~ N(0, 2/fan_in) with fan_in = Cin * kernel volume; zero biases."""
    config.validate()
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("_b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[1:]))
            std = np.sqrt(2.0 / fan_in)
            tensors[name] = (rng.standard_normal(shape) * std).astype(dtype)
    return NetParams(config, tensors)


@dataclass
class _BlockCache:
    stem: str
    x_in: np.ndarray = None
    sign: np.ndarray = None
    keep: np.ndarray = None


@dataclass
class BatchTrace:
    """Everything forward_batch produces; inputs cached only when requested."""

    params: NetParams
    logits: np.ndarray
    penultimate: np.ndarray
    blocks: list = field(default_factory=list)
    pool_idx: list = field(default_factory=list)
    skip_shapes: list = field(default_factory=list)
    cached: bool = False


@dataclass
class ForwardTrace:
    """Single-volume forward result (spec-level wrapper over BatchTrace)."""

    logits: FeatureMap
    penultimate: FeatureMap
    mode: str
    batch: BatchTrace


def _check_divisible(shape, levels):
    div = 1 << (levels - 1)
    if any(s % div for s in shape):
        raise ShapeError(f"spatial dims {shape} must be divisible by {div}")


def _block_forward(params, stem, h, on_idx, rng, need_cache, trace):
    cfg = params.config
    y = backend.conv3x3_forward(h, params.tensors[stem + "_w"], params.tensors[stem + "_b"])
    np.maximum(y, 0.0, out=y)
    cache = _BlockCache(stem)
    if need_cache:
        cache.x_in = h
        cache.sign = y > 0
    rate = cfg.dropout_rate
    if rate > 0.0 and on_idx.size:
        shape = (on_idx.size,) + y.shape[1:]
        if y.dtype == np.float32:
            rnd = rng.random(shape, dtype=np.float32)
        else:
            rnd = rng.random(shape)
        keep = rnd >= rate
        scale = y.dtype.type(1.0 / (1.0 - rate))
        if on_idx.size == y.shape[0]:
            y *= keep
            y *= scale
        else:
            y[on_idx] = y[on_idx] * keep * scale
        if need_cache:
            cache.keep = keep
    trace.blocks.append(cache)
    return y


def forward_batch(params: NetParams, x, dropout_on, rng=None, need_cache=False) -> BatchTrace:
    """Run the net on a (B, Cin, H, W, D) batch.

    dropout_on is a per-sample bool array (or a scalar for the whole batch).
    When need_cache is set every sample must have dropout active, since the
    cached masks cover the full batch.
    """
    cfg = params.config
    if x.ndim != 5 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"expected (B,{cfg.in_channels},H,W,D) input, got {x.shape}")
    _check_divisible(x.shape[2:], cfg.levels)
    x = np.ascontiguousarray(x, dtype=params.dtype)
    B = x.shape[0]
    flags = np.broadcast_to(np.asarray(dropout_on, dtype=bool), (B,))
    on_idx = np.flatnonzero(flags)
    if need_cache and on_idx.size not in (0, B):
        raise ValueError("need_cache requires uniform dropout flags across the batch")
    if cfg.dropout_rate > 0.0 and on_idx.size and rng is None:
        raise ValueError("rng required when dropout is active")

    trace = BatchTrace(params, None, None, cached=need_cache)
    skips = []
    h = x
    for lvl in range(cfg.levels):
        h = _block_forward(params, f"enc{lvl}a", h, on_idx, rng, need_cache, trace)
        h = _block_forward(params, f"enc{lvl}b", h, on_idx, rng, need_cache, trace)
        if lvl < cfg.levels - 1:
            skips.append(h)
            trace.skip_shapes.append(h.shape)
            h, idx = backend.maxpool2(h)
            trace.pool_idx.append(idx)
    for lvl in range(cfg.levels - 2, -1, -1):
        up = backend.upsample2(h)
        h = np.concatenate([up, skips[lvl]], axis=1)
        h = _block_forward(params, f"dec{lvl}a", h, on_idx, rng, need_cache, trace)
        h = _block_forward(params, f"dec{lvl}b", h, on_idx, rng, need_cache, trace)
    trace.penultimate = h
    trace.logits = backend.conv1x1_forward(h, params.tensors["out_w"], params.tensors["out_b"])
    return trace


def forward(params: NetParams, x: Volume3D, mode: str, rng=None) -> ForwardTrace:
    """Single-volume forward in one of the modes train, eval, mc_dropout."""
    if mode not in ("train", "eval", "mc_dropout"):
        raise ValueError(f"unknown mode {mode!r}")
    batch = forward_batch(params, x.data[None, None], mode != "eval", rng,
                          need_cache=(mode == "train"))
    return ForwardTrace(FeatureMap(batch.logits[0], x.spacing),
                        FeatureMap(batch.penultimate[0], x.spacing), mode, batch)


def _block_backward(trace, cache, grads, d_out):
    cfg = trace.params.config
    gate = cache.sign if cache.keep is None else (cache.sign & cache.keep)
    d = d_out * gate
    if cache.keep is not None:
        d *= d.dtype.type(1.0 / (1.0 - cfg.dropout_rate))
    dw, db = backend.conv3x3_weight_grad(cache.x_in, d)
    grads[cache.stem + "_w"] = dw
    grads[cache.stem + "_b"] = db
    return backend.conv3x3_input_grad(d, trace.params.tensors[cache.stem + "_w"])


def backward_batch(trace: BatchTrace, d_logits, d_penultimate=None):
    """Exact reverse-mode gradients for every parameter.

    Cotangents are (B, 2, H, W, D) for logits and optionally (B, F, H, W, D)
    for the penultimate features; the input gradient is discarded.
    """
    if not trace.cached:
        raise ValueError("backward requires a trace built with need_cache=True")
    params, cfg = trace.params, trace.params.config
    if d_logits.shape != trace.logits.shape:
        raise ShapeError(f"d_logits {d_logits.shape} vs logits {trace.logits.shape}")
    if d_penultimate is not None and d_penultimate.shape != trace.penultimate.shape:
        raise ShapeError(f"d_penultimate {d_penultimate.shape} vs {trace.penultimate.shape}")
    d_logits = np.ascontiguousarray(d_logits, dtype=params.dtype)
    grads = {}
    grads["out_w"], grads["out_b"] = backend.conv1x1_weight_grad(trace.penultimate, d_logits)
    d = backend.conv1x1_input_grad(d_logits, params.tensors["out_w"])
    if d_penultimate is not None:
        d = d + d_penultimate
    bi = len(trace.blocks) - 1
    d_skip = {}
    for lvl in range(cfg.levels - 1):
        d = _block_backward(trace, trace.blocks[bi], grads, d)
        bi -= 1
        d = _block_backward(trace, trace.blocks[bi], grads, d)
        bi -= 1
        up_ch = cfg.base_filters << (lvl + 1)
        d_skip[lvl] = d[:, up_ch:]
        d = backend.upsample2_backward(np.ascontiguousarray(d[:, :up_ch]))
    for lvl in range(cfg.levels - 1, -1, -1):
        if lvl < cfg.levels - 1:
            d = backend.maxpool2_backward(d, trace.pool_idx[lvl], trace.skip_shapes[lvl])
            d = d + d_skip[lvl]
        d = _block_backward(trace, trace.blocks[bi], grads, d)
        bi -= 1
        d = _block_backward(trace, trace.blocks[bi], grads, d)
        bi -= 1
    return {name: grads[name] for name in params.tensors}


def backward(trace: ForwardTrace, d_logits, d_penultimate=None):
    """Single-volume wrapper over backward_batch; accepts raw (C,H,W,D) arrays."""
    dp = None if d_penultimate is None else d_penultimate[None]
    return backward_batch(trace.batch, d_logits[None], dp)


@dataclass
class OptimizerState:
    m: dict
    v: dict
    t: int = 0
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8


def init_optimizer(params: NetParams, lr=1e-4, beta1=0.9, beta2=0.99, eps=1e-8) -> OptimizerState:
    zeros = lambda: {k: np.zeros_like(v) for k, v in params.tensors.items()}
    return OptimizerState(zeros(), zeros(), 0, lr, beta1, beta2, eps)


def adam_step(params: NetParams, grads, state: OptimizerState):
    """One Adam update with bias correction; returns fresh (params, state)."""
    t = state.t + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_t, new_m, new_v = {}, {}, {}
    for name, theta in params.tensors.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} vs parameter {theta.shape} for {name}")
        if not np.isfinite(g).all():
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        update = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        new_t[name] = theta - update
        new_m[name] = m
        new_v[name] = v
    return (NetParams(params.config, new_t),
            OptimizerState(new_m, new_v, t, state.lr, b1, b2, state.eps))


def ema_update(teacher: NetParams, student: NetParams, decay) -> NetParams:
    """Exponential moving average t' = decay*t + (1-decay)*s, elementwise."""
    if not 0.0 <= decay <= 1.0:
        raise ValueError(f"decay must be in [0, 1], got {decay}")
    out = {}
    for name, t in teacher.tensors.items():
        s = student.tensors[name]
        if s.shape != t.shape:
            raise ShapeError(f"teacher/student shape mismatch for {name}")
        out[name] = decay * t + (1.0 - decay) * s
    return NetParams(teacher.config, out)


# ---------------------------------------------------------------------------
# VCK1 checkpoint format
# ---------------------------------------------------------------------------
# magic `VCKP`, LE u32 version, u32 tensor count, then per tensor:
# u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 LE data.

_VCK_MAGIC = b"VCKP"


def write_vck1(path, tensors):
    with open(path, "wb") as fh:
        fh.write(_VCK_MAGIC)
        fh.write(struct.pack("<II", 1, len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            raw_name = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw_name)))
            fh.write(raw_name)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_vck1(path):
    tensors = {}
    with open(path, "rb") as fh:
        if fh.read(4) != _VCK_MAGIC:
            raise ValueError(f"{path}: not a VCK1 checkpoint")
        version, count = struct.unpack("<II", fh.read(8))
        if version != 1:
            raise ValueError(f"{path}: unsupported VCK1 version {version}")
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            n = int(np.prod(dims)) if rank else 1
            raw = fh.read(4 * n)
            if len(raw) != 4 * n:
                raise ValueError(f"{path}: truncated tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return tensors


def save_checkpoint(path, student: NetParams, teacher: NetParams, opt: OptimizerState,
                    iteration, total_iterations):
    cfg = student.config
    tensors = {
        "meta/config": np.array([cfg.in_channels, cfg.out_classes, cfg.levels,
                                 cfg.base_filters, cfg.dropout_rate], dtype=np.float32),
        "meta/iteration": np.array([iteration], dtype=np.float32),
        "meta/total_iterations": np.array([total_iterations], dtype=np.float32),
        "meta/adam": np.array([opt.t, opt.lr, opt.beta1, opt.beta2, opt.eps], dtype=np.float32),
    }
    for name, arr in student.tensors.items():
        tensors[f"student/{name}"] = arr
    for name, arr in teacher.tensors.items():
        tensors[f"teacher/{name}"] = arr
    for name, arr in opt.m.items():
        tensors[f"adam_m/{name}"] = arr
    for name, arr in opt.v.items():
        tensors[f"adam_v/{name}"] = arr
    write_vck1(path, tensors)


def load_checkpoint(path):
    """Returns (student, teacher, optimizer state, iteration, total_iterations)."""
    tensors = read_vck1(path)
    raw = tensors["meta/config"]
    cfg = NetConfig(int(round(raw[0])), int(round(raw[1])), int(round(raw[2])),
                    int(round(raw[3])), round(float(raw[4]), 6)).validate()
    shapes = param_shapes(cfg)
    def section(prefix):
        out = {}
        for name, shape in shapes.items():
            arr = tensors[f"{prefix}/{name}"]
            if arr.shape != shape:
                raise ShapeError(f"{path}: tensor {prefix}/{name} has shape {arr.shape}, expected {shape}")
            out[name] = arr
        return out
    student = NetParams(cfg, section("student"))
    teacher = NetParams(cfg, section("teacher"))
    adam = tensors["meta/adam"]
    opt = OptimizerState(section("adam_m"), section("adam_v"), int(round(adam[0])),
                         round(float(adam[1]), 10), round(float(adam[2]), 6),
                         round(float(adam[3]), 6), round(float(adam[4]), 12))
    iteration = int(round(tensors["meta/iteration"][0]))
    total_iterations = int(round(tensors["meta/total_iterations"][0]))
    return student, teacher, opt, iteration, total_iterations
