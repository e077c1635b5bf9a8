"""Configuration-driven EASTER models.

An image of height 40 is read as a 1-D sequence along its width with one
input channel per pixel row. Every block repeats a sub-block of
Conv1D -> BatchNorm -> ReLU -> Dropout; the block's stride applies to its
first sub-block only, so the 3x3 model halves the width exactly once.
The last postprocess block is a plain projection onto the classes followed
by a log-softmax.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as tn
from .ctc import LogProbLattice, Vocabulary, greedy_decode
from .errors import (
    CheckpointError,
    CheckpointVersionError,
    ConfigurationError,
    CorruptCheckpointError,
    InvalidArgumentError,
)
from .images import INPUT_HEIGHT, normalize, pad_batch, resize_to_height, to_grayscale
from .tensor import Tensor, no_grad

MAGIC = b"ESTR"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BlockSpec:
    name: str
    sub_blocks: int
    kernel: int
    filters: int
    dropout: float
    dilation: int = 1
    stride: int = 1
    residual: bool = False

    def problems(self) -> list[str]:
        out = []
        if self.sub_blocks < 1:
            out.append(f"{self.name}: sub_blocks must be >= 1")
        if self.kernel < 1:
            out.append(f"{self.name}: kernel must be >= 1")
        if self.filters < 1:
            out.append(f"{self.name}: filters must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            out.append(f"{self.name}: dropout must be in [0, 1)")
        if self.dilation < 1:
            out.append(f"{self.name}: dilation must be >= 1")
        if self.stride < 1:
            out.append(f"{self.name}: stride must be >= 1")
        return out


@dataclass(frozen=True)
class ModelConfig:
    """Ordered blocks: one preprocess block, the body, then three postprocess blocks."""

    blocks: tuple
    vocab: Vocabulary
    input_height: int = INPUT_HEIGHT
    name: str = "custom"

    @property
    def preprocess(self) -> BlockSpec:
        return self.blocks[0]

    @property
    def body(self) -> tuple:
        return self.blocks[1:-3]

    @property
    def postprocess(self) -> tuple:
        return self.blocks[-3:]

    @property
    def total_stride(self) -> int:
        return math.prod(b.stride for b in self.blocks)

    @property
    def num_layers(self) -> int:
        return sum(b.sub_blocks for b in self.blocks)

    def validate(self) -> "ModelConfig":
        problems = []
        if len(self.blocks) < 4:
            problems.append("need one preprocess block and three postprocess blocks")
        for b in self.blocks:
            problems.extend(b.problems())
        if self.blocks and self.blocks[-1].filters != self.vocab.num_classes:
            problems.append(
                f"final block has {self.blocks[-1].filters} filters, expected |vocab|+1 = {self.vocab.num_classes}"
            )
        if self.input_height < 1:
            problems.append("input_height must be >= 1")
        if problems:
            raise ConfigurationError("invalid model config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_height": self.input_height,
            "vocab": self.vocab.chars,
            "blocks": [asdict(b) for b in self.blocks],
        }

    @classmethod
    def from_dict(cls, d: dict, vocab: Vocabulary | None = None) -> "ModelConfig":
        """Build from a dict holding either explicit ``blocks`` or a ``preset`` name."""
        if vocab is None:
            vocab = Vocabulary.named(d.get("vocab", "alnum"))
        if "preset" in d:
            cfg = PRESETS[d["preset"]](vocab)
            return replace(cfg, input_height=d.get("input_height", cfg.input_height)).validate()
        try:
            blocks = tuple(BlockSpec(**b) for b in d["blocks"])
        except (KeyError, TypeError) as exc:
            raise ConfigurationError(f"malformed model config: {exc}") from None
        return cls(blocks, vocab, d.get("input_height", INPUT_HEIGHT), d.get("name", "custom")).validate()


def default_config_3x3(vocab: Vocabulary) -> ModelConfig:
    """The 14-layer EASTER 3x3 model."""
    blocks = (
        BlockSpec("Preprocess-I", 2, 3, 64, 0.2, 1, 2),
        BlockSpec("B1", 3, 3, 128, 0.2, 1, 1),
        BlockSpec("B2", 3, 4, 128, 0.3, 1, 1),
        BlockSpec("B3", 3, 6, 128, 0.3, 1, 1),
        BlockSpec("Postprocess-I", 1, 7, 256, 0.4, 2, 1),
        BlockSpec("Postprocess-II", 1, 1, 512, 0.4, 1, 1),
        BlockSpec("Postprocess-III", 1, 1, vocab.num_classes, 0.0, 1, 1),
    )
    return ModelConfig(blocks, vocab, name="3x3").validate()


def config_5x3(vocab: Vocabulary) -> ModelConfig:
    """Deeper residual variant: 20 layers.

    Our reconstruction (only depth and rough size are known): five residual
    body blocks with filters 128/128/256/256/512 and kernels 3..7, pre and
    post blocks twice as wide as in 3x3.
    """
    body = [
        BlockSpec(f"B{i + 1}", 3, k, f, d, 1, 1, True)
        for i, (k, f, d) in enumerate(zip((3, 4, 5, 6, 7), (128, 128, 256, 256, 512), (0.2, 0.3, 0.3, 0.3, 0.3)))
    ]
    blocks = (
        BlockSpec("Preprocess-I", 2, 3, 128, 0.2, 1, 2),
        *body,
        BlockSpec("Postprocess-I", 1, 7, 512, 0.4, 2, 1),
        BlockSpec("Postprocess-II", 1, 1, 1024, 0.4, 1, 1),
        BlockSpec("Postprocess-III", 1, 1, vocab.num_classes, 0.0, 1, 1),
    )
    return ModelConfig(blocks, vocab, name="5x3").validate()


def config_small(vocab: Vocabulary) -> ModelConfig:
    """3x3 layout with halved filter counts (roughly half a million parameters)."""
    base = default_config_3x3(vocab)
    blocks = tuple(replace(b, filters=max(1, b.filters // 2)) for b in base.blocks[:-1]) + (base.blocks[-1],)
    return ModelConfig(blocks, vocab, name="small").validate()


def config_tiny(vocab: Vocabulary, width: int = 16) -> ModelConfig:
    """Smallest valid layout (one sub-block per block), for fast checks."""
    blocks = (
        BlockSpec("Preprocess-I", 1, 3, width, 0.0, 1, 2),
        BlockSpec("B1", 1, 3, width, 0.0, 1, 1),
        BlockSpec("Postprocess-I", 1, 3, width, 0.0, 2, 1),
        BlockSpec("Postprocess-II", 1, 1, width, 0.0, 1, 1),
        BlockSpec("Postprocess-III", 1, 1, vocab.num_classes, 0.0, 1, 1),
    )
    return ModelConfig(blocks, vocab, name="tiny").validate()


def config_reduced(vocab: Vocabulary, width: int = 8) -> ModelConfig:
    """Empty body: three normalised layers plus the classifier, for gradient checks."""
    blocks = (
        BlockSpec("Preprocess-I", 1, 3, width, 0.0, 1, 2),
        BlockSpec("Postprocess-I", 1, 3, width, 0.0, 2, 1),
        BlockSpec("Postprocess-II", 1, 1, width, 0.0, 1, 1),
        BlockSpec("Postprocess-III", 1, 1, vocab.num_classes, 0.0, 1, 1),
    )
    return ModelConfig(blocks, vocab, name="reduced").validate()


PRESETS = {
    "3x3": default_config_3x3,
    "5x3": config_5x3,
    "small": config_small,
    "tiny": config_tiny,
    "reduced": config_reduced,
}


@dataclass(frozen=True)
class _Layer:
    prefix: str
    c_in: int
    c_out: int
    kernel: int
    stride: int
    dilation: int
    dropout: float
    classifier: bool


def _layers(config: ModelConfig):
    """Yield ``(block, [layers])`` pairs describing every conv sub-block."""
    c = config.input_height
    last = len(config.blocks) - 1
    for bi, block in enumerate(config.blocks):
        layers = []
        for j in range(block.sub_blocks):
            layers.append(
                _Layer(
                    f"{block.name}.{j}",
                    c,
                    block.filters,
                    block.kernel,
                    block.stride if j == 0 else 1,
                    block.dilation,
                    block.dropout,
                    bi == last and j == block.sub_blocks - 1,
                )
            )
            c = block.filters
        yield block, layers


def _time_mask(lengths, width: int, dtype) -> np.ndarray:
    return (np.arange(width)[None, None, :] < np.asarray(lengths)[:, None, None]).astype(dtype)


@dataclass
class EasterModel:
    config: ModelConfig
    params: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)
    mode: str = "infer"

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def train(self) -> "EasterModel":
        self.mode = "train"
        return self

    def eval(self) -> "EasterModel":
        self.mode = "infer"
        return self

    @property
    def vocab(self) -> Vocabulary:
        return self.config.vocab

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def astype(self, dtype) -> "EasterModel":
        """Cast parameters, their gradients and the norm buffers in place (float64 for gradient checks)."""
        for p in self.params.values():
            p.data = p.data.astype(dtype)
            p.grad = None if p.grad is None else p.grad.astype(dtype)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    def output_length(self, width: int) -> int:
        return -(-width // self.config.total_stride)

    def forward_padded(self, x: np.ndarray, widths, rng: np.random.Generator | None = None) -> list[LogProbLattice]:
        """Run a padded, normalized ``[N, H, W]`` batch; ``widths`` are the unpadded widths."""
        x = np.asarray(x)
        if x.ndim != 3 or x.shape[1] != self.config.input_height:
            raise InvalidArgumentError(f"expected [N, {self.config.input_height}, W] input, got {x.shape}")
        training = self.training
        p = self.params
        lengths = np.asarray(widths)
        mask = _time_mask(lengths, x.shape[2], x.dtype)
        # zero the padding so every conv sees the same zero border as an unbatched sample
        h = Tensor(x * mask, dtype=x.dtype)
        for block, layers in _layers(self.config):
            block_in = h
            for i, layer in enumerate(layers):
                h = tn.conv1d(h, p[layer.prefix + ".conv.weight"], p[layer.prefix + ".conv.bias"],
                              layer.stride, layer.dilation)
                if layer.stride > 1:
                    lengths = -(-lengths // layer.stride)
                    mask = _time_mask(lengths, h.shape[2], x.dtype)
                if layer.classifier:
                    break
                h = tn.batch_norm(
                    h, p[layer.prefix + ".bn.gamma"], p[layer.prefix + ".bn.beta"],
                    self.buffers[layer.prefix + ".bn.running_mean"], self.buffers[layer.prefix + ".bn.running_var"],
                    training, mask=mask,
                )
                if block.residual and i == len(layers) - 1:
                    h = h + self._skip(block, block_in)
                h = tn.relu(h)
                h = tn.dropout(h, layer.dropout, training, rng)
                h = h * Tensor(mask, dtype=x.dtype)
        logp = tn.log_softmax(tn.transpose(h, (0, 2, 1)), axis=-1)
        return [LogProbLattice(logp[n], int(lengths[n])) for n in range(x.shape[0])]

    def _skip(self, block: BlockSpec, block_in: Tensor) -> Tensor:
        key = block.name + ".skip"
        if key + ".weight" in self.params:
            return tn.conv1d(block_in, self.params[key + ".weight"], self.params[key + ".bias"], block.stride)
        return block_in

    def __call__(self, images, rng=None) -> list[LogProbLattice]:
        return forward(self, images, rng)


def build(config: ModelConfig, rng: np.random.Generator | int = 0) -> EasterModel:
    """Materialise parameters for ``config`` (fan-in uniform conv weights, zero biases, unit gamma)."""
    config.validate()
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    params, buffers = {}, {}
    c_block_in = config.input_height
    for block, layers in _layers(config):
        for layer in layers:
            fan_in = layer.c_in * layer.kernel
            params[layer.prefix + ".conv.weight"] = Tensor(
                tn.fan_in_uniform(rng, (layer.c_out, layer.c_in, layer.kernel), fan_in), requires_grad=True
            )
            params[layer.prefix + ".conv.bias"] = Tensor(np.zeros(layer.c_out), requires_grad=True)
            if not layer.classifier:
                params[layer.prefix + ".bn.gamma"] = Tensor(np.ones(layer.c_out), requires_grad=True)
                params[layer.prefix + ".bn.beta"] = Tensor(np.zeros(layer.c_out), requires_grad=True)
                buffers[layer.prefix + ".bn.running_mean"] = np.zeros(layer.c_out, dtype=np.float32)
                buffers[layer.prefix + ".bn.running_var"] = np.ones(layer.c_out, dtype=np.float32)
        if block.residual and (c_block_in != block.filters or block.stride != 1):
            params[block.name + ".skip.weight"] = Tensor(
                tn.fan_in_uniform(rng, (block.filters, c_block_in, 1), c_block_in), requires_grad=True
            )
            params[block.name + ".skip.bias"] = Tensor(np.zeros(block.filters), requires_grad=True)
        c_block_in = block.filters
    return EasterModel(config, params, buffers)


def forward(model: EasterModel, images, rng: np.random.Generator | None = None) -> list[LogProbLattice]:
    """Recognise a list of 8-bit grayscale images of height ``input_height``."""
    if not images:
        return []
    height = model.config.input_height
    for im in images:
        if np.asarray(im).ndim != 2 or im.shape[0] != height:
            raise InvalidArgumentError(f"images must be 2-D with height {height}, got {np.asarray(im).shape}")
    x, widths = pad_batch([normalize(np.asarray(im)) for im in images])
    return model.forward_padded(x, widths, rng)


def param_count(model: EasterModel) -> int:
    return sum(t.size for t in model.params.values())


def block_param_counts(config: ModelConfig) -> dict:
    """Closed-form count per block: conv weights and biases, gamma/beta per normalised sub-block, skip projection."""
    out = {}
    c_block_in = config.input_height
    for block, layers in _layers(config):
        total = 0
        for layer in layers:
            total += layer.c_in * layer.kernel * layer.c_out + layer.c_out
            if not layer.classifier:
                total += 2 * layer.c_out
        if block.residual and (c_block_in != block.filters or block.stride != 1):
            total += c_block_in * block.filters + block.filters
        out[block.name] = total
        c_block_in = block.filters
    return out


def analytic_param_count(config: ModelConfig) -> int:
    return sum(block_param_counts(config).values())


def architecture_rows(config: ModelConfig) -> list[dict]:
    return [
        {
            "block": b.name,
            "sub_blocks": b.sub_blocks,
            "kernel": b.kernel,
            "filters": b.filters,
            "dropout": b.dropout,
            "dilation": b.dilation,
            "stride": b.stride,
        }
        for b in config.blocks
    ]


# ---------------------------------------------------------------------------
# checkpoints
#
# layout (little-endian):
#   b"ESTR" | u16 version | u32 len + config JSON | u32 count
#   count x (u16 len + name | u8 kind | u8 ndim | ndim x u32 dims | float32 data)
#   u32 crc32 of everything before it


def _encode(model: EasterModel) -> bytes:
    cfg = json.dumps(model.config.to_dict(), sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(cfg)), cfg]
    blobs = [(n, 0, t.data) for n, t in model.params.items()] + [(n, 1, a) for n, a in model.buffers.items()]
    parts.append(struct.pack("<I", len(blobs)))
    for name, kind, arr in blobs:
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", kind, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: EasterModel, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_encode(model))
    tmp.replace(path)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, vocab: Vocabulary | None = None) -> EasterModel:
    """Read a checkpoint written by :func:`save_checkpoint`; the model comes back in infer mode."""
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return load_checkpoint_bytes(buf, str(path), vocab)


def load_checkpoint_bytes(buf: bytes, source: str = "<bytes>", vocab: Vocabulary | None = None) -> EasterModel:
    path = source
    if buf[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path}: not an EASTER checkpoint")
    r = _Reader(buf)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    if len(buf) < 8 or zlib.crc32(buf[:-4]) != struct.unpack("<I", buf[-4:])[0]:
        raise CorruptCheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    (cfg_len,) = r.unpack("<I")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, ConfigurationError) as exc:
        raise CorruptCheckpointError(f"{path}: bad embedded config ({exc})") from None
    if vocab is not None and vocab != config.vocab:
        raise CheckpointError(f"{path}: checkpoint vocabulary {config.vocab.chars!r} conflicts with {vocab.chars!r}")
    model = build(config, 0)
    (count,) = r.unpack("<I")
    seen = set()
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        kind, ndim = r.unpack("<BB")
        shape = r.unpack(f"<{ndim}I")
        arr = np.frombuffer(r.take(4 * math.prod(shape)), dtype="<f4").reshape(shape).astype(np.float32)
        target = model.params.get(name) if kind == 0 else model.buffers.get(name)
        expected = None if target is None else (target.shape if kind == 0 else target.shape)
        if expected != shape:
            raise CorruptCheckpointError(f"{path}: unexpected blob {name!r} with shape {shape}")
        if kind == 0:
            target.data[...] = arr
        else:
            target[...] = arr
        seen.add(name)
    missing = (set(model.params) | set(model.buffers)) - seen
    if missing:
        raise CorruptCheckpointError(f"{path}: missing blobs {sorted(missing)[:3]}")
    return model.eval()


def transcribe(model: EasterModel, images, batch_size: int = 32) -> list[str]:
    """Greedy transcriptions for arbitrary grayscale or RGB line images."""
    prepared = [normalize(resize_to_height(to_grayscale(im), model.config.input_height)) for im in images]
    order = sorted(range(len(prepared)), key=lambda i: prepared[i].shape[1])
    out = [""] * len(prepared)
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for start in range(0, len(order), batch_size):
                chunk = order[start:start + batch_size]
                x, widths = pad_batch([prepared[i] for i in chunk])
                for i, lat in zip(chunk, model.forward_padded(x, widths)):
                    out[i] = greedy_decode(lat, model.vocab)
    finally:
        if was_training:
            model.train()
    return out
