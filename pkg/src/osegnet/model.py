"""Model assembly: strided-conv encoder, operational decoder, checkpoints.

The network is an autoencoder-shaped segmenter. The encoder halves the
spatial extent at every stage and ends in tanh, so the decoder always sees
features in [-1, 1] — the domain where polynomial nodal operators are well
behaved. The decoder mirrors the encoder with x2 operational transpose
blocks and finishes with a single-channel operational layer under sigmoid.
No skip connections: the decoder consumes only the bottleneck features.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .layers import BatchNormLayer, Conv2DLayer, Oper2DLayer, Oper2DTransposeLayer
from .tensor import ShapeError, Tensor

CANONICAL_ENCODER = (16, 32, 64, 128, 256)
CANONICAL_DECODER = (128, 64, 32, 16, 8)

CHECKPOINT_MAGIC = b"OSGN"
CHECKPOINT_VERSION = 1


class CheckpointError(RuntimeError):
    """Raised when a checkpoint file is malformed or incompatible."""


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    The canonical network has five encoder stages and decoder filters
    (128, 64, 32, 16, 8) ending in one final filter. Shallower variants
    (used by the tiny gradient-check model) must supply decoder_filters
    explicitly; depth always equals len(encoder_channels) and input_size
    must be divisible by 2**depth.
    """

    q_order: int = 3
    input_size: int = 224
    encoder_channels: tuple = CANONICAL_ENCODER
    decoder_filters: tuple | None = None
    final_filters: int = 1
    kernel_size: int = 3

    def __post_init__(self):
        self.encoder_channels = tuple(int(c) for c in self.encoder_channels)
        if self.decoder_filters is None:
            if len(self.encoder_channels) == len(CANONICAL_DECODER):
                self.decoder_filters = CANONICAL_DECODER
            else:
                raise ValueError(
                    f"decoder_filters must be given explicitly for a "
                    f"{len(self.encoder_channels)}-stage encoder (default covers 5 stages)")
        self.decoder_filters = tuple(int(f) for f in self.decoder_filters)
        self.validate()

    @property
    def depth(self) -> int:
        return len(self.encoder_channels)

    def validate(self) -> None:
        if not isinstance(self.q_order, (int, np.integer)) or not 1 <= self.q_order <= 5:
            raise ValueError(f"q_order must be an integer in [1, 5], got {self.q_order!r}")
        self.q_order = int(self.q_order)
        if not self.encoder_channels or any(c < 1 for c in self.encoder_channels):
            raise ValueError(f"encoder_channels must be positive ints, got {self.encoder_channels!r}")
        if len(self.decoder_filters) != self.depth:
            raise ValueError(
                f"decoder_filters length {len(self.decoder_filters)} must match "
                f"encoder depth {self.depth}")
        if any(f < 1 for f in self.decoder_filters):
            raise ValueError(f"decoder_filters must be positive ints, got {self.decoder_filters!r}")
        if self.final_filters != 1:
            raise ValueError(f"final_filters is fixed at 1, got {self.final_filters!r}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError(f"kernel_size must be a positive odd int, got {self.kernel_size!r}")
        divisor = 2 ** self.depth
        if self.input_size < divisor or self.input_size % divisor != 0:
            raise ValueError(
                f"input_size {self.input_size} must be divisible by {divisor} "
                f"({self.depth} stride-2 stages)")


class OSegNetModel:
    """Encoder-decoder segmenter with an operational decoder."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        k = config.kernel_size
        q = config.q_order

        self.encoder = []
        prev = 1
        for ch in config.encoder_channels:
            conv = Conv2DLayer(rng, prev, ch, k, stride=2, padding="same")
            self.encoder.append((conv, BatchNormLayer(ch)))
            prev = ch

        self.decoder = []
        for f in config.decoder_filters:
            up = Oper2DTransposeLayer(rng, prev, f, k, q, stride=2)
            self.decoder.append((up, BatchNormLayer(f)))
            prev = f

        self.final = Oper2DLayer(rng, prev, config.final_filters, k, q, stride=1, padding="same")

    def forward(self, x: Tensor, training: bool = False) -> Tensor:
        size = self.config.input_size
        if x.data.ndim != 4 or x.shape[1] != 1:
            raise ShapeError(f"expected a N x 1 x H x W batch, got shape {x.shape}")
        if x.shape[2] != size or x.shape[3] != size:
            raise ShapeError(
                f"expected {size}x{size} input (configured input_size), got "
                f"{x.shape[2]}x{x.shape[3]}")
        h = x
        for conv, bn in self.encoder:
            h = bn(conv(h), training).tanh()
        for up, bn in self.decoder:
            h = bn(up(h), training).tanh()
        return self.final(h).sigmoid()

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward(x, training)

    # -- parameter accounting -------------------------------------------------

    def _layer_table(self):
        rows = []
        for i, (conv, bn) in enumerate(self.encoder, start=1):
            rows.append((f"encoder.stage{i}", conv, bn))
        for j, (up, bn) in enumerate(self.decoder, start=1):
            rows.append((f"decoder.block{j}", up, bn))
        rows.append(("decoder.final", self.final, None))
        return rows

    def named_parameters(self) -> list:
        """Trainable tensors as (dot-path name, Tensor), in checkpoint order."""
        out = []
        for prefix, layer, bn in self._layer_table():
            for name, t in layer.params():
                out.append((f"{prefix}.{name}", t))
            if bn is not None:
                for name, t in bn.params():
                    out.append((f"{prefix}.{name}", t))
        return out

    def named_buffers(self) -> list:
        """Non-trainable state (running statistics) as (name, ndarray)."""
        out = []
        for prefix, layer, bn in self._layer_table():
            if bn is not None:
                for name, arr in bn.buffers():
                    out.append((f"{prefix}.{name}", arr))
        return out

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()


def build_model(config: ModelConfig, rng: np.random.Generator) -> OSegNetModel:
    return OSegNetModel(config, rng)


def count_params(model: OSegNetModel) -> tuple[int, int]:
    trainable = sum(t.size for _, t in model.named_parameters())
    non_trainable = sum(arr.size for _, arr in model.named_buffers())
    return trainable, non_trainable


# -- checkpoint format ----------------------------------------------------------
#
# magic "OSGN" | u32 version | u32 q_order | u32 tensor count
# per tensor: u16 name length | ASCII name | u8 ndim | u32 dims... | <f4 data
# Little-endian throughout, no padding, no compression.


def _checkpoint_entries(model: OSegNetModel) -> list:
    entries = [(name, t.data) for name, t in model.named_parameters()]
    entries += [(name, arr) for name, arr in model.named_buffers()]
    return entries


def save_checkpoint(model: OSegNetModel, path) -> None:
    entries = _checkpoint_entries(model)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, model.config.q_order, len(entries)))
        for name, arr in entries:
            encoded = name.encode("ascii")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_exact(fh, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError(f"truncated checkpoint: expected {n} more bytes for {what}")
    return buf


def load_checkpoint(path, config: ModelConfig) -> OSegNetModel:
    """Rebuild a model from a checkpoint, validating against the given config.

    The header is checked before the model is built, so a corrupt file is
    rejected without allocating parameters. Shape conflicts (including a
    q_order disagreement, which changes operational kernel widths) are
    reported against the first offending tensor in model order.
    """
    stored = {}
    order = []
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic bytes")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic bytes {magic!r}, not a checkpoint file")
        version, q_order, count = struct.unpack("<III", _read_exact(fh, 12, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "tensor name length"))
            try:
                name = _read_exact(fh, name_len, "tensor name").decode("ascii")
            except UnicodeDecodeError as exc:
                raise CheckpointError(f"non-ASCII tensor name in checkpoint: {exc}") from None
            (ndim,) = struct.unpack("<B", _read_exact(fh, 1, f"rank of {name}"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, f"dims of {name}"))
            n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if ndim else 4
            data = np.frombuffer(_read_exact(fh, n_bytes, f"data of {name}"), dtype="<f4")
            if name in stored:
                raise CheckpointError(f"duplicate tensor {name} in checkpoint")
            stored[name] = data.reshape(dims)
            order.append(name)
        if fh.read(1):
            raise CheckpointError("trailing bytes after the last declared tensor")

    model = build_model(config, np.random.default_rng(0))
    expected = _checkpoint_entries(model)
    for name, arr in expected:
        if name not in stored:
            raise CheckpointError(f"checkpoint is missing tensor {name}")
        if stored[name].shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {name}: checkpoint has {stored[name].shape}, "
                f"config expects {arr.shape}")
    extra = [n for n in order if n not in dict(expected)]
    if extra:
        raise CheckpointError(f"checkpoint contains unexpected tensor {extra[0]}")

    for name, t in model.named_parameters():
        t.data[...] = stored[name]
    for name, arr in model.named_buffers():
        arr[...] = stored[name]
    return model
