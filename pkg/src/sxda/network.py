"""Multi-scale encoder / bottleneck / decoder assembly and checkpoint I/O.

The model consumes a (past, current, future) frame triplet. Encoder and
bottleneck stages run all three streams through shared convolutions, compute
self / cross / dilated-cross attention maps between the streams, fuse them
adaptively, and apply a residual channel attention block. Only the current
frame survives past the bottleneck; decoder stages use plain blocked
self-attention plus skip connections from the current-frame encoder outputs.
"""

from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    AttentionParams,
    FusionParams,
    RcabParams,
    block,
    cross_attention,
    dilated_block,
    fuse,
    mhsa,
    rcab,
    unblock,
)
from .errors import ConfigurationError, DataError, DimensionError
from .tensor import Tensor

VARIANTS = ("base", "no_dilation", "full")
_VARIANT_CODE = {v: i for i, v in enumerate(VARIANTS)}

CHECKPOINT_MAGIC = b"SXDA"
CHECKPOINT_VERSION = 1
_MAX_RECORD_ELEMS = 1 << 28


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters.

    ``stages`` counts scales: stages-1 encoders, one bottleneck, stages-1
    decoders. Channels double at every downsample. ``heads`` holds the
    per-scale head count.
    """

    stages: int = 3
    channels: int = 16
    block: int = 8
    dilation: int = 2
    heads: tuple = (2, 2, 2)
    variant: str = "full"
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.stages < 2:
            raise ConfigurationError(f"stages must be >= 2, got {self.stages}")
        if self.channels < 1 or self.block < 1:
            raise ConfigurationError("channels and block size must be positive")
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}, expected one of {VARIANTS}")
        if len(self.heads) != self.stages:
            raise ConfigurationError(
                f"heads list has {len(self.heads)} entries for {self.stages} stages"
            )
        if self.dilation < 1:
            raise ConfigurationError(f"dilation must be >= 1, got {self.dilation}")
        if self.dilation % 2 == 0 and self.block % 2 != 0:
            raise ConfigurationError("even dilation requires an even block size")
        for s, l in enumerate(self.heads):
            if self.stage_channels(s) % l != 0:
                raise ConfigurationError(
                    f"heads {l} must divide stage channels {self.stage_channels(s)} at scale {s}"
                )

    def stage_channels(self, scale):
        return self.channels * (2 ** scale)

    @property
    def divisor(self):
        """Required divisor of input spatial extents."""
        return self.block * (2 ** (self.stages - 1))


@dataclass
class StageParams:
    """Encoder or bottleneck stage parameters (shared across the streams)."""

    conv1_w: Tensor
    conv1_b: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    attn: AttentionParams
    fuse_cur: FusionParams | None
    fuse_nb: FusionParams | None
    rcab: RcabParams
    down_w: Tensor | None = None
    down_b: Tensor | None = None


@dataclass
class DecoderParams:
    up_w: Tensor
    up_b: Tensor
    merge_w: Tensor
    merge_b: Tensor
    conv1_w: Tensor
    conv1_b: Tensor
    ln_gamma: Tensor
    ln_beta: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    attn: AttentionParams
    rcab: RcabParams


@dataclass
class ModelParams:
    cfg: ModelConfig
    encoders: list = field(default_factory=list)
    bottleneck: StageParams | None = None
    decoders: list = field(default_factory=list)  # index = scale
    final_w: Tensor | None = None
    final_b: Tensor | None = None
    store: dict = field(default_factory=dict)  # insertion-ordered name -> Tensor

    def count(self):
        return sum(t.size for t in self.store.values())

    def all_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self.store.values())

    def zero_grads(self):
        for t in self.store.values():
            t.grad = None


class _Builder:
    def __init__(self, rng, dtype):
        self.rng = rng
        self.dtype = dtype
        self.store = {}

    def _glorot(self, shape, fan_in, fan_out):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        return self.rng.uniform(-lim, lim, size=shape)

    def tensor(self, name, arr):
        t = Tensor(np.asarray(arr, dtype=self.dtype), requires_grad=True)
        self.store[name] = t
        return t

    def conv(self, name, k, cin, cout):
        w = self.tensor(f"{name}.w", self._glorot((k, k, cin, cout), k * k * cin, k * k * cout))
        b = self.tensor(f"{name}.b", np.zeros(cout))
        return w, b

    def dense(self, name, cin, cout):
        w = self.tensor(f"{name}.w", self._glorot((cin, cout), cin, cout))
        b = self.tensor(f"{name}.b", np.zeros(cout))
        return w, b

    def attention(self, name, c, heads):
        hd = c // heads
        qs = [self.tensor(f"{name}.q{h}", self._glorot((c, hd), c, hd)) for h in range(heads)]
        ks = [self.tensor(f"{name}.k{h}", self._glorot((c, hd), c, hd)) for h in range(heads)]
        vs = [self.tensor(f"{name}.v{h}", self._glorot((c, hd), c, hd)) for h in range(heads)]
        out = self.tensor(f"{name}.out", self._glorot((c, c), c, c))
        return AttentionParams(qs, ks, vs, out)

    def fusion(self, name, c, n):
        ws = [self.tensor(f"{name}.w{i}", self._glorot((3, 3, c, 1), 9 * c, 9)) for i in range(n)]
        bs = [self.tensor(f"{name}.b{i}", np.zeros(1)) for i in range(n)]
        return FusionParams(ws, bs)

    def rcab(self, name, c):
        cr = max(1, c // 4)
        c1w, c1b = self.conv(f"{name}.conv1", 3, c, c)
        c2w, c2b = self.conv(f"{name}.conv2", 3, c, c)
        rw, rb = self.dense(f"{name}.reduce", c, cr)
        ew, eb = self.dense(f"{name}.expand", cr, c)
        return RcabParams(c1w, c1b, c2w, c2b, rw, rb, ew, eb)


def build_params(cfg, seed=0, dtype=np.float32):
    """Allocate and initialize all learnable weights for ``cfg``."""
    rng = np.random.default_rng(seed)
    bld = _Builder(rng, dtype)
    mp = ModelParams(cfg)
    cross = cfg.variant != "base"
    n_cur = {"full": 5, "no_dilation": 3}.get(cfg.variant, 0)

    def make_stage(prefix, cin, c, heads, downsample):
        c1w, c1b = bld.conv(f"{prefix}.conv1", 3, cin, c)
        g = bld.tensor(f"{prefix}.ln.gamma", np.ones(c))
        be = bld.tensor(f"{prefix}.ln.beta", np.zeros(c))
        c2w, c2b = bld.conv(f"{prefix}.conv2", 3, c, c)
        attn = bld.attention(f"{prefix}.attn", c, heads)
        fc = bld.fusion(f"{prefix}.fusecur", c, n_cur) if cross else None
        fn = bld.fusion(f"{prefix}.fusenb", c, 2) if cross else None
        rc = bld.rcab(f"{prefix}.rcab", c)
        dw = db = None
        if downsample:
            dw, db = bld.conv(f"{prefix}.down", 3, c, 2 * c)
        return StageParams(c1w, c1b, g, be, c2w, c2b, attn, fc, fn, rc, dw, db)

    for s in range(cfg.stages - 1):
        cin = cfg.in_channels if s == 0 else cfg.stage_channels(s)
        mp.encoders.append(make_stage(f"enc{s}", cin, cfg.stage_channels(s), cfg.heads[s], True))
    sb = cfg.stages - 1
    mp.bottleneck = make_stage("bott", cfg.stage_channels(sb), cfg.stage_channels(sb), cfg.heads[sb], False)

    mp.decoders = [None] * (cfg.stages - 1)
    for s in reversed(range(cfg.stages - 1)):
        c = cfg.stage_channels(s)
        prefix = f"dec{s}"
        uw, ub = bld.conv(f"{prefix}.up", 3, 2 * c, c)
        mw, mb = bld.conv(f"{prefix}.merge", 3, 2 * c, c)
        c1w, c1b = bld.conv(f"{prefix}.conv1", 3, c, c)
        g = bld.tensor(f"{prefix}.ln.gamma", np.ones(c))
        be = bld.tensor(f"{prefix}.ln.beta", np.zeros(c))
        c2w, c2b = bld.conv(f"{prefix}.conv2", 3, c, c)
        attn = bld.attention(f"{prefix}.attn", c, cfg.heads[s])
        rc = bld.rcab(f"{prefix}.rcab", c)
        mp.decoders[s] = DecoderParams(uw, ub, mw, mb, c1w, c1b, g, be, c2w, c2b, attn, rc)

    mp.final_w, mp.final_b = bld.conv("final", 3, cfg.channels, cfg.out_channels)
    mp.store = bld.store
    return mp


def expected_param_count(cfg):
    """Closed-form parameter count; must match the allocation exactly."""

    def rcab_count(c):
        cr = max(1, c // 4)
        return 2 * (9 * c * c + c) + c * cr + cr + cr * c + c

    def stage_count(cin, c, downsample):
        n = 9 * cin * c + c  # conv1
        n += 2 * c  # layer norm affine
        n += 9 * c * c + c  # conv2
        n += 4 * c * c  # attention projections (q, k, v, out)
        if cfg.variant != "base":
            n_cur = 5 if cfg.variant == "full" else 3
            n += (n_cur + 2) * (9 * c + 1)
        n += rcab_count(c)
        if downsample:
            n += 9 * c * 2 * c + 2 * c
        return n

    total = 0
    for s in range(cfg.stages - 1):
        cin = cfg.in_channels if s == 0 else cfg.stage_channels(s)
        total += stage_count(cin, cfg.stage_channels(s), True)
    cb = cfg.stage_channels(cfg.stages - 1)
    total += stage_count(cb, cb, False)
    for s in range(cfg.stages - 1):
        c = cfg.stage_channels(s)
        total += 2 * (9 * 2 * c * c + c)  # up + merge
        total += 9 * c * c + c + 2 * c + 9 * c * c + c  # conv pair + layer norm
        total += 4 * c * c + rcab_count(c)
    total += 9 * cfg.channels * cfg.out_channels + cfg.out_channels
    return total


# ---------------------------------------------------------------------------
# forward passes


def _conv_block(x, sp):
    x = T.add_channel_bias(T.conv2d(x, sp.conv1_w, padding="reflect"), sp.conv1_b)
    x = T.layer_norm(x, sp.ln_gamma, sp.ln_beta)
    x = T.gelu(x)
    return T.add_channel_bias(T.conv2d(x, sp.conv2_w, padding="reflect"), sp.conv2_b)


def _stage_triplet(x3, sp, cfg, downsample):
    """One encoder/bottleneck stage on stacked streams (3, ..., H, W, C)."""
    from .attention import BlockedFeatures, fuse_stacked

    y = _conv_block(x3, sp)
    b = cfg.block
    hw = (y.shape[-3], y.shape[-2])
    streams = [T.take0(y, i) for i in range(3)]
    bq = [block(f, b) for f in streams]

    # current frame: one query tensor against a stack of key/value sources in
    # map order SA(t), CA(t,t-1), CA(t,t+1)[, DCA(t,t-1), DCA(t,t+1)]
    if cfg.variant == "full":
        bd = [dilated_block(streams[0], b, cfg.dilation), dilated_block(streams[2], b, cfg.dilation)]
        cur_sources = [bq[1], bq[0], bq[2], bd[0], bd[1]]
    else:
        cur_sources = [bq[1], bq[0], bq[2]]
    kv_cur = BlockedFeatures(T.stack0([s.data for s in cur_sources]), b, hw, "standard")
    maps_cur = unblock(cross_attention(bq[1], kv_cur, sp.attn))  # (N, ..., H, W, C)
    fused_cur = fuse_stacked(maps_cur, sp.fuse_cur)

    # past and future streams ride one batched call: queries stacked on one
    # axis, their (SA, CA-toward-t) sources on another
    q_nb = BlockedFeatures(T.stack0([bq[0].data, bq[2].data]), b, hw, "standard")
    kv_nb = BlockedFeatures(
        T.stack0(
            [
                T.stack0([bq[0].data, bq[2].data]),  # SA sources per stream
                T.stack0([bq[1].data, bq[1].data]),  # CA toward the current frame
            ]
        ),
        b,
        hw,
        "standard",
    )
    maps_nb = unblock(cross_attention(q_nb, kv_nb, sp.attn))  # (2, 2 streams, ..., H, W, C)
    fused_nb = fuse_stacked(maps_nb, sp.fuse_nb)  # (2 streams, ..., H, W, C)

    fused = T.stack0([T.take0(fused_nb, 0), fused_cur, T.take0(fused_nb, 1)])
    fused = rcab(fused, sp.rcab)
    skip = T.take0(fused, 1)
    if downsample:
        out = T.add_channel_bias(T.conv2d(fused, sp.down_w, stride=2, padding="reflect"), sp.down_b)
    else:
        out = fused
    return out, skip


def _stage_single(x, sp, cfg, downsample):
    """Base-variant stage: one stream, self-attention only."""
    y = _conv_block(x, sp)
    y = unblock(mhsa(block(y, cfg.block), sp.attn))
    y = rcab(y, sp.rcab)
    skip = y
    if downsample:
        y = T.add_channel_bias(T.conv2d(y, sp.down_w, stride=2, padding="reflect"), sp.down_b)
    return y, skip


def _decoder_stage(f, skip, dp, cfg):
    u = T.upsample_nearest(f, 2)
    u = T.add_channel_bias(T.conv2d(u, dp.up_w, padding="reflect"), dp.up_b)
    if skip.shape != u.shape:
        raise DimensionError(f"skip shape {skip.shape} does not match upsampled {u.shape}")
    z = T.concat_channels([u, skip])
    z = T.add_channel_bias(T.conv2d(z, dp.merge_w, padding="reflect"), dp.merge_b)
    z = _conv_block(z, dp)
    z = unblock(mhsa(block(z, cfg.block), dp.attn))
    return rcab(z, dp.rcab)


def encoder_stage(fs, sp, cfg):
    """Spec-level encoder stage: triplet of maps -> triplet at the next scale."""
    out, _ = _stage_triplet(T.stack0(list(fs)), sp, cfg, downsample=True)
    return [T.take0(out, i) for i in range(3)]


def bottleneck_stage(fs, sp, cfg):
    out, _ = _stage_triplet(T.stack0(list(fs)), sp, cfg, downsample=False)
    return [T.take0(out, i) for i in range(3)]


def decoder_stage(f, skip, dp, cfg):
    return _decoder_stage(f, skip, dp, cfg)


def _check_extents(cfg, shape):
    h, w = shape[-3], shape[-2]
    d = cfg.divisor
    if h % d or w % d:
        raise ConfigurationError(
            f"frame extents {h}x{w} must be divisible by block*2^(stages-1) = {d}"
        )


def forward(params, cfg, triplet, training=False):
    """Enhance the current frame of a (past, current, future) triplet.

    Inputs are channel-last tensors with values in [0, 1]; training mode
    returns unclamped values, otherwise the output is clamped to [0, 1].
    """
    triplet = list(triplet)
    if len(triplet) != 3:
        raise ConfigurationError(f"expected a frame triplet, got {len(triplet)} frames")
    if cfg.variant == "base":
        return forward_base(params, cfg, triplet[1], training=training)
    _check_extents(cfg, triplet[1].shape)

    x = T.stack0(triplet)
    skips = []
    for s in range(cfg.stages - 1):
        x, skip = _stage_triplet(x, params.encoders[s], cfg, downsample=True)
        skips.append(skip)
    x, _ = _stage_triplet(x, params.bottleneck, cfg, downsample=False)
    f = T.take0(x, 1)
    for s in reversed(range(cfg.stages - 1)):
        f = _decoder_stage(f, skips[s], params.decoders[s], cfg)
    out = T.add_channel_bias(T.conv2d(f, params.final_w, padding="reflect"), params.final_b)
    if not training:
        out = Tensor._wrap(np.clip(out.data, 0.0, 1.0))
    return out


def forward_base(params, cfg, frame, training=False):
    """Single-frame variant used by the ablation baseline."""
    _check_extents(cfg, frame.shape)
    x = frame
    skips = []
    for s in range(cfg.stages - 1):
        x, skip = _stage_single(x, params.encoders[s], cfg, downsample=True)
        skips.append(skip)
    x, _ = _stage_single(x, params.bottleneck, cfg, downsample=False)
    for s in reversed(range(cfg.stages - 1)):
        x = _decoder_stage(x, skips[s], params.decoders[s], cfg)
    out = T.add_channel_bias(T.conv2d(x, params.final_w, padding="reflect"), params.final_b)
    if not training:
        out = Tensor._wrap(np.clip(out.data, 0.0, 1.0))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def _config_to_bytes(cfg):
    buf = struct.pack(
        "<7I",
        cfg.stages,
        cfg.channels,
        cfg.block,
        cfg.dilation,
        _VARIANT_CODE[cfg.variant],
        cfg.in_channels,
        cfg.out_channels,
    )
    buf += struct.pack("<I", len(cfg.heads))
    buf += struct.pack(f"<{len(cfg.heads)}I", *cfg.heads)
    return buf


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def read(self, n):
        if self.pos + n > len(self.data):
            raise DataError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self):
        return struct.unpack("<I", self.read(4))[0]


def save_checkpoint(params, cfg, path):
    """Binary little-endian checkpoint: magic, version, config, named records."""
    out = io.BytesIO()
    out.write(CHECKPOINT_MAGIC)
    out.write(struct.pack("<I", CHECKPOINT_VERSION))
    out.write(_config_to_bytes(cfg))
    out.write(struct.pack("<I", len(params.store)))
    for name, t in params.store.items():
        nb = name.encode("utf-8")
        out.write(struct.pack("<I", len(nb)))
        out.write(nb)
        dims = t.data.shape
        out.write(struct.pack("<I", len(dims)))
        out.write(struct.pack(f"<{len(dims)}I", *dims))
        out.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_checkpoint(path):
    """Read a checkpoint back into (params, cfg); bit-exact roundtrip."""
    with open(path, "rb") as fh:
        raw = fh.read()
    r = _Reader(raw)
    if r.read(4) != CHECKPOINT_MAGIC:
        raise DataError("bad magic: not a checkpoint file")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    stages, channels, blk, dil, vcode, cin, cout = struct.unpack("<7I", r.read(28))
    if vcode >= len(VARIANTS):
        raise DataError(f"unknown variant code {vcode}")
    n_heads = r.u32()
    if n_heads > 64:
        raise DataError(f"implausible head-list length {n_heads}")
    heads = struct.unpack(f"<{n_heads}I", r.read(4 * n_heads))
    try:
        cfg = ModelConfig(
            stages=stages,
            channels=channels,
            block=blk,
            dilation=dil,
            heads=tuple(heads),
            variant=VARIANTS[vcode],
            in_channels=cin,
            out_channels=cout,
        )
    except ConfigurationError as e:
        raise DataError(f"checkpoint config invalid: {e}") from None

    n_records = r.u32()
    records = {}
    for _ in range(n_records):
        name_len = r.u32()
        if name_len > 4096:
            raise DataError(f"implausible record name length {name_len}")
        name = r.read(name_len).decode("utf-8")
        rank = r.u32()
        if rank > 8:
            raise DataError(f"implausible record rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.read(4 * rank))
        n_elems = 1
        for d in dims:
            n_elems *= d
            if n_elems > _MAX_RECORD_ELEMS:
                raise DataError(f"record {name}: dimension product overflows sane bounds")
        arr = np.frombuffer(r.read(4 * n_elems), dtype="<f4").reshape(dims)
        records[name] = arr
    if r.pos != len(raw):
        raise DataError(f"{len(raw) - r.pos} trailing bytes after last record")

    params = build_params(cfg, seed=0)
    if set(records) != set(params.store):
        missing = sorted(set(params.store) - set(records))[:3]
        extra = sorted(set(records) - set(params.store))[:3]
        raise DataError(f"record names do not match config (missing={missing}, extra={extra})")
    for name, t in params.store.items():
        arr = records[name]
        if arr.shape != t.data.shape:
            raise DataError(f"record {name}: shape {arr.shape} != expected {t.data.shape}")
        t.data = np.ascontiguousarray(arr, dtype=np.float32)
    return params, cfg
