"""Encoder-decoder segmentation network built on the tensor module.

The encoder is a bottleneck residual network (stem + four bottleneck
stages).  By default the last stage keeps the stride-16 resolution of the
previous stage (its entry stride is 1) and compensates with dilation-2
3x3 kernels, so the deepest features see a wide context without a further
resolution drop.  The decoder reduces each tapped stage with a 1x1
convolution, bilinearly upsamples everything to the input resolution,
concatenates, and maps through two 3x3 convolutions and a final 1x1 to
single-channel logits.  A stepwise "unet" decoder that merges consecutive
pyramid levels is available for ablations.

All widths can be divided by ``width_scale`` (minimum width 4) to get a
desk-scale model with the same topology.  Construction is deterministic
given a seed: two builds with the same seed have bitwise-equal parameters.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, ShapeError
from .tensor import (ConvSpec, Tensor, add, batch_norm2d, bilinear_upsample,
                     concat_channels, conv2d, max_pool2d, relu)

STAGE_NAMES = ("R1", "R2", "R3", "R4", "R5")
DECODER_STYLES = ("multiscale", "unet")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture description; defaults give the full-width network."""

    stem_channels: int = 64
    stage_blocks: tuple = (3, 4, 6, 3)
    stage_channels: tuple = (256, 512, 1024, 2048)
    width_scale: float = 1
    stage5_dilation: int = 2
    stage5_stride: int = 1
    decoder_dims: tuple = (48, 48, 48, 256)
    encoder_taps: tuple = ("R2", "R3", "R4", "R5")
    decoder_style: str = "multiscale"

    def __post_init__(self):
        object.__setattr__(self, "stage_blocks", tuple(int(b) for b in self.stage_blocks))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "decoder_dims", tuple(int(d) for d in self.decoder_dims))
        object.__setattr__(self, "encoder_taps", tuple(self.encoder_taps))
        if self.stem_channels < 1:
            raise DataError("stem_channels must be positive")
        if len(self.stage_blocks) != 4 or any(b < 1 for b in self.stage_blocks):
            raise DataError(f"stage_blocks needs 4 positive counts, got {self.stage_blocks}")
        if len(self.stage_channels) != 4 or any(c < 4 for c in self.stage_channels):
            raise DataError(f"stage_channels needs 4 widths >= 4, got {self.stage_channels}")
        if self.width_scale <= 0:
            raise DataError("width_scale must be positive")
        if self.stage5_stride not in (1, 2):
            raise DataError(f"stage5_stride must be 1 or 2, got {self.stage5_stride}")
        if self.stage5_dilation < 1:
            raise DataError("stage5_dilation must be >= 1")
        # a stride-2 stage 5 is the plain backbone: dilation is forced off
        if self.stage5_stride == 2:
            object.__setattr__(self, "stage5_dilation", 1)
        taps = self.encoder_taps
        if not taps or any(t not in STAGE_NAMES for t in taps) or len(set(taps)) != len(taps):
            raise DataError(f"encoder_taps must be a non-empty subset of {STAGE_NAMES}, got {taps}")
        object.__setattr__(self, "encoder_taps",
                           tuple(sorted(taps, key=STAGE_NAMES.index)))
        if self.decoder_style not in DECODER_STYLES:
            raise DataError(f"decoder_style must be one of {DECODER_STYLES}")
        if self.decoder_style == "multiscale" and len(self.decoder_dims) != len(self.encoder_taps):
            raise DataError(
                f"decoder_dims has {len(self.decoder_dims)} entries for "
                f"{len(self.encoder_taps)} encoder taps"
            )
        if any(d < 1 for d in self.decoder_dims):
            raise DataError("decoder_dims must be positive")

    def scaled(self, channels):
        """Channel width after dividing by width_scale (floor of 4)."""
        return max(4, int(round(channels / self.width_scale)))

    def stage_strides(self):
        """Input-relative stride of each stage output."""
        s5 = 16 * self.stage5_stride
        return {"R1": 2, "R2": 4, "R3": 8, "R4": 16, "R5": s5}


# --- config file (key=value) serialization -------------------------------

_TUPLE_FIELDS = {"stage_blocks", "stage_channels", "decoder_dims", "encoder_taps"}
_INT_FIELDS = {"stem_channels", "stage5_dilation", "stage5_stride"}


def config_to_text(config, extras=None):
    """Render a ModelConfig (plus optional extra keys) as key=value lines."""
    lines = []
    for name in ("stem_channels", "stage_blocks", "stage_channels", "width_scale",
                 "stage5_dilation", "stage5_stride", "decoder_dims", "encoder_taps",
                 "decoder_style"):
        value = getattr(config, name)
        if name in _TUPLE_FIELDS:
            value = ",".join(str(v) for v in value)
        elif name == "width_scale":
            value = repr(int(value)) if float(value).is_integer() else repr(float(value))
        lines.append(f"{name}={value}")
    for key, value in (extras or {}).items():
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text):
    """Parse key=value lines into (ModelConfig, dict of non-config extras)."""
    fields = {}
    extras = {}
    known = {"stem_channels", "stage_blocks", "stage_channels", "width_scale",
             "stage5_dilation", "stage5_stride", "decoder_dims", "encoder_taps",
             "decoder_style"}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise DataError(f"config line {ln} is not key=value: {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in known:
            extras[key] = value
            continue
        if key in _TUPLE_FIELDS:
            parts = tuple(p.strip() for p in value.split(",") if p.strip())
            fields[key] = parts if key == "encoder_taps" else tuple(int(p) for p in parts)
        elif key in _INT_FIELDS:
            fields[key] = int(value)
        elif key == "width_scale":
            fields[key] = float(value)
        else:
            fields[key] = value
    try:
        return ModelConfig(**fields), extras
    except TypeError as exc:
        raise DataError(f"bad config fields: {exc}") from exc


# --- layers ----------------------------------------------------------------


class _Conv:
    def __init__(self, rng, cin, cout, k, stride=1, dilation=1, bias=False):
        pad = dilation * (k - 1) // 2
        self.spec = ConvSpec((k, k), stride=stride, dilation=dilation, padding=pad)
        std = math.sqrt(2.0 / (cin * k * k))
        w = rng.standard_normal((cout, cin, k, k), dtype=np.float32) * np.float32(std)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = (Tensor.channel_vector(np.zeros(cout, np.float32), requires_grad=True)
                     if bias else None)

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.spec)

    def params(self, prefix):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


class _BatchNorm:
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        self.gamma = Tensor.channel_vector(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor.channel_vector(np.zeros(channels, np.float32), requires_grad=True)
        self.running_mean = np.zeros(channels, np.float32)
        self.running_var = np.ones(channels, np.float32)
        self.eps = eps
        self.momentum = momentum

    def __call__(self, x, training):
        return batch_norm2d(x, self.gamma, self.beta, self.running_mean,
                            self.running_var, training, self.eps, self.momentum)

    def params(self, prefix):
        yield f"{prefix}.gamma", self.gamma
        yield f"{prefix}.beta", self.beta

    def buffers(self, prefix):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


class _ConvBnRelu:
    def __init__(self, rng, cin, cout, k, stride=1, dilation=1):
        self.conv = _Conv(rng, cin, cout, k, stride=stride, dilation=dilation)
        self.bn = _BatchNorm(cout)

    def __call__(self, x, training):
        return relu(self.bn(self.conv(x), training))

    def params(self, prefix):
        yield from self.conv.params(f"{prefix}.conv")
        yield from self.bn.params(f"{prefix}.bn")

    def buffers(self, prefix):
        yield from self.bn.buffers(f"{prefix}.bn")


class _Bottleneck:
    """1x1 reduce -> 3x3 (stride/dilation live here) -> 1x1 expand + shortcut."""

    def __init__(self, rng, cin, mid, cout, stride=1, dilation=1):
        self.conv1 = _Conv(rng, cin, mid, 1)
        self.bn1 = _BatchNorm(mid)
        self.conv2 = _Conv(rng, mid, mid, 3, stride=stride, dilation=dilation)
        self.bn2 = _BatchNorm(mid)
        self.conv3 = _Conv(rng, mid, cout, 1)
        self.bn3 = _BatchNorm(cout)
        if stride != 1 or cin != cout:
            self.down = _Conv(rng, cin, cout, 1, stride=stride)
            self.down_bn = _BatchNorm(cout)
        else:
            self.down = None
            self.down_bn = None

    def __call__(self, x, training):
        out = relu(self.bn1(self.conv1(x), training))
        out = relu(self.bn2(self.conv2(out), training))
        out = self.bn3(self.conv3(out), training)
        short = x if self.down is None else self.down_bn(self.down(x), training)
        return relu(add(out, short))

    def params(self, prefix):
        yield from self.conv1.params(f"{prefix}.conv1")
        yield from self.bn1.params(f"{prefix}.bn1")
        yield from self.conv2.params(f"{prefix}.conv2")
        yield from self.bn2.params(f"{prefix}.bn2")
        yield from self.conv3.params(f"{prefix}.conv3")
        yield from self.bn3.params(f"{prefix}.bn3")
        if self.down is not None:
            yield from self.down.params(f"{prefix}.down")
            yield from self.down_bn.params(f"{prefix}.down_bn")

    def buffers(self, prefix):
        yield from self.bn1.buffers(f"{prefix}.bn1")
        yield from self.bn2.buffers(f"{prefix}.bn2")
        yield from self.bn3.buffers(f"{prefix}.bn3")
        if self.down_bn is not None:
            yield from self.down_bn.buffers(f"{prefix}.down_bn")


class _Encoder:
    def __init__(self, rng, cfg):
        self.cfg = cfg
        stem = cfg.scaled(cfg.stem_channels)
        self.stem = _ConvBnRelu(rng, 3, stem, 7, stride=2)
        self.stages = []
        cin = stem
        for i, (blocks, channels) in enumerate(zip(cfg.stage_blocks, cfg.stage_channels)):
            cout = cfg.scaled(channels)
            mid = max(4, cout // 4)
            if i == 0:
                entry_stride, dilation = 1, 1
            elif i == len(cfg.stage_blocks) - 1:
                entry_stride, dilation = cfg.stage5_stride, cfg.stage5_dilation
            else:
                entry_stride, dilation = 2, 1
            stage = [_Bottleneck(rng, cin, mid, cout, stride=entry_stride, dilation=dilation)]
            for _ in range(blocks - 1):
                stage.append(_Bottleneck(rng, cout, mid, cout, dilation=dilation))
            self.stages.append(stage)
            cin = cout

    def out_channels(self):
        widths = {"R1": self.cfg.scaled(self.cfg.stem_channels)}
        for name, channels in zip(STAGE_NAMES[1:], self.cfg.stage_channels):
            widths[name] = self.cfg.scaled(channels)
        return widths

    def forward(self, x, training):
        feats = {}
        out = self.stem(x, training)
        feats["R1"] = out
        out = max_pool2d(out, kernel=3, stride=2, padding=1)
        for name, stage in zip(STAGE_NAMES[1:], self.stages):
            for block in stage:
                out = block(out, training)
            feats[name] = out
        return feats

    def params(self):
        yield from self.stem.params("encoder.stem")
        for sname, stage in zip(STAGE_NAMES[1:], self.stages):
            for b, block in enumerate(stage):
                yield from block.params(f"encoder.stage_{sname}.block{b}")

    def buffers(self):
        yield from self.stem.buffers("encoder.stem")
        for sname, stage in zip(STAGE_NAMES[1:], self.stages):
            for b, block in enumerate(stage):
                yield from block.buffers(f"encoder.stage_{sname}.block{b}")


@dataclass
class FeaturePyramid:
    """Named stage outputs plus their input-relative strides."""

    features: dict
    strides: dict
    input_hw: tuple


class _MultiscaleDecoder:
    """Reduce each tap with 1x1, upsample all to input size, concat, fuse."""

    def __init__(self, rng, cfg, tap_channels):
        self.cfg = cfg
        self.reduces = {}
        for tap, dim in zip(cfg.encoder_taps, cfg.decoder_dims):
            self.reduces[tap] = _ConvBnRelu(rng, tap_channels[tap], cfg.scaled(dim), 1)
        concat_ch = sum(cfg.scaled(d) for d in cfg.decoder_dims)
        head_ch = cfg.scaled(cfg.decoder_dims[-1])
        self.head1 = _ConvBnRelu(rng, concat_ch, head_ch, 3)
        self.head2 = _ConvBnRelu(rng, head_ch, head_ch, 3)
        self.logits = _Conv(rng, head_ch, 1, 1, bias=True)
        self.concat_channels_total = concat_ch

    def forward(self, pyramid, training):
        parts = []
        for tap in self.cfg.encoder_taps:
            feat = self.reduces[tap](pyramid.features[tap], training)
            scale = pyramid.strides[tap]
            parts.append(bilinear_upsample(feat, scale) if scale > 1 else feat)
        merged = concat_channels(parts)
        out = self.head1(merged, training)
        out = self.head2(out, training)
        return self.logits(out)

    def params(self):
        for tap in self.cfg.encoder_taps:
            yield from self.reduces[tap].params(f"decoder.reduce_{tap}")
        yield from self.head1.params("decoder.head1")
        yield from self.head2.params("decoder.head2")
        yield from self.logits.params("decoder.logits")

    def buffers(self):
        for tap in self.cfg.encoder_taps:
            yield from self.reduces[tap].buffers(f"decoder.reduce_{tap}")
        yield from self.head1.buffers("decoder.head1")
        yield from self.head2.buffers("decoder.head2")


class _UnetDecoder:
    """Stepwise decoder: upsample, concat the next-shallower tap, convolve."""

    def __init__(self, rng, cfg, tap_channels):
        self.cfg = cfg
        strides = cfg.stage_strides()
        # deepest tap first
        self.order = sorted(cfg.encoder_taps, key=lambda t: -strides[t])
        width = cfg.scaled(256)
        self.entry = _ConvBnRelu(rng, tap_channels[self.order[0]], width, 3)
        self.steps = []
        for tap in self.order[1:]:
            self.steps.append(_ConvBnRelu(rng, width + tap_channels[tap], width, 3))
        self.logits = _Conv(rng, width, 1, 1, bias=True)

    def forward(self, pyramid, training):
        strides = pyramid.strides
        out = self.entry(pyramid.features[self.order[0]], training)
        current = strides[self.order[0]]
        for tap, step in zip(self.order[1:], self.steps):
            ratio = current // strides[tap]
            if ratio > 1:
                out = bilinear_upsample(out, ratio)
            out = concat_channels([out, pyramid.features[tap]])
            out = step(out, training)
            current = strides[tap]
        if current > 1:
            out = bilinear_upsample(out, current)
        return self.logits(out)

    def params(self):
        yield from self.entry.params("decoder.entry")
        for i, step in enumerate(self.steps):
            yield from step.params(f"decoder.step{i}")
        yield from self.logits.params("decoder.logits")

    def buffers(self):
        yield from self.entry.buffers("decoder.entry")
        for i, step in enumerate(self.steps):
            yield from step.buffers(f"decoder.step{i}")


class SegModel:
    """Encoder + decoder bundle with named parameters and buffers."""

    def __init__(self, config, encoder, decoder):
        self.config = config
        self.encoder = encoder
        self.decoder = decoder

    def named_params(self):
        out = {}
        for name, p in self.encoder.params():
            out[name] = p
        for name, p in self.decoder.params():
            out[name] = p
        return out

    def named_buffers(self):
        out = {}
        for name, b in self.encoder.buffers():
            out[name] = b
        for name, b in self.decoder.buffers():
            out[name] = b
        return out

    def param_count(self):
        return sum(p.data.size for p in self.named_params().values())

    def zero_grads(self):
        for p in self.named_params().values():
            p.zero_grad()

    def forward(self, x, training=False):
        pyramid = encoder_forward(self, x, training=training)
        return decoder_forward(self, pyramid, training=training)


def build_model(config, seed=0):
    """Construct a model with He-initialized weights drawn from ``seed``."""
    rng = np.random.default_rng(seed)
    encoder = _Encoder(rng, config)
    tap_channels = encoder.out_channels()
    if config.decoder_style == "multiscale":
        decoder = _MultiscaleDecoder(rng, config, tap_channels)
    else:
        decoder = _UnetDecoder(rng, config, tap_channels)
    return SegModel(config, encoder, decoder)


def encoder_forward(model, image, training=False):
    """Run the encoder; the input extent must be divisible by 32."""
    n, c, h, w = image.shape
    if c != 3:
        raise ShapeError(f"encoder expects 3 input channels, got {c}")
    if h % 32 or w % 32:
        raise ShapeError(f"input dims must be divisible by 32, got {h}x{w}")
    feats = model.encoder.forward(image, training)
    strides = model.config.stage_strides()
    for name, feat in feats.items():
        expect = (h // strides[name], w // strides[name])
        if feat.shape[2:] != expect:
            raise ShapeError(
                f"{name} has spatial {feat.shape[2:]}, expected {expect}"
            )
    return FeaturePyramid(features=feats, strides=strides, input_hw=(h, w))


def decoder_forward(model, pyramid, training=False):
    """Run the decoder on an encoder pyramid, producing (n,1,h,w) logits."""
    expected = model.config.stage_strides()
    for tap in model.config.encoder_taps:
        if tap not in pyramid.features:
            raise ShapeError(f"pyramid is missing tap {tap}")
        if pyramid.strides.get(tap) != expected[tap]:
            raise ShapeError(
                f"tap {tap} has stride {pyramid.strides.get(tap)}, expected {expected[tap]}"
            )
    logits = model.decoder.forward(pyramid, training)
    if logits.shape[2:] != pyramid.input_hw:
        raise ShapeError(
            f"logits spatial {logits.shape[2:]} != input {pyramid.input_hw}"
        )
    return logits


def model_forward(model, image, training=False):
    """Full forward pass: encoder pyramid then decoder logits."""
    return decoder_forward(model, encoder_forward(model, image, training), training)


def predict_prob(model, images):
    """Eval-mode probability maps for a float32 batch (n,3,h,w) array."""
    logits = model_forward(model, Tensor(images), training=False)
    z = logits.data.astype(np.float64)
    return (1.0 / (1.0 + np.exp(-z))).astype(np.float32)


def receptive_field(config, stage="R5"):
    """Analytic receptive-field extent (pixels) of one unit of a stage."""
    if stage not in STAGE_NAMES:
        raise ValueError(f"unknown stage {stage}")
    ops = [(7, 2, 1)]  # stem conv
    if stage != "R1":
        ops.append((3, 2, 1))  # stem max pool
        for i, blocks in enumerate(config.stage_blocks):
            name = STAGE_NAMES[i + 1]
            if i == 0:
                entry, dil = 1, 1
            elif i == len(config.stage_blocks) - 1:
                entry, dil = config.stage5_stride, config.stage5_dilation
            else:
                entry, dil = 2, 1
            for b in range(blocks):
                ops.append((3, entry if b == 0 else 1, dil))
            if name == stage:
                break
    rf, jump = 1, 1
    for k, s, r in ops:
        keff = k + (k - 1) * (r - 1)
        rf += (keff - 1) * jump
        jump *= s
    return rf
