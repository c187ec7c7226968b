# plainmask - Plain Mask Transformer
# Copyright © 2026 PlainMask Developers
#
# This file is part of the PlainMask project and distributed under the
# terms of a 3-clause BSD license. See the LICENSE file in that project
# for the detailed conditions.

"""Binary tensor container and checkpoints.

A container file is laid out as follows (all integers little-endian):

* the magic bytes ``PMTC``;
* the format version (u32);
* the number of entries (u32);
* for each entry: the name length (u16) and the UTF-8 name, the dtype
  code (u8: 0 = f32, 1 = f64, 2 = u32), the number of dimensions (u8),
  every dimension (u64), and the row-major payload.
"""

import logging
import struct
from collections import OrderedDict
from typing import BinaryIO, Dict, Iterator, Optional, Tuple

import numpy as np

from .layers import Module
from .optim import AdamW

MAGIC = b"PMTC"
VERSION = 1

DTYPE_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4")}
_CODE_OF = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.uint32): 2}


class ContainerError(Exception):
    """Error thrown on a malformed or inconsistent tensor container."""

    pass


class BadMagicError(ContainerError):
    pass


class UnsupportedVersionError(ContainerError):
    pass


class TruncatedContainerError(ContainerError):
    pass


class ShapeMismatchError(ContainerError):
    pass


class DuplicateEntryError(ContainerError):
    pass


class CheckpointError(Exception):
    """Error thrown when a checkpoint lacks an expected entry."""

    pass


class TensorContainer(object):
    """An ordered collection of named arrays."""

    entries: "OrderedDict[str, np.ndarray]"

    def __init__(self) -> None:
        self.entries = OrderedDict()

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __getitem__(self, name: str) -> np.ndarray:
        return self.entries[name]

    def __iter__(self) -> Iterator[Tuple[str, np.ndarray]]:
        return iter(self.entries.items())

    def add(self, name: str, value: np.ndarray) -> None:
        """Adds an entry.

        :raises DuplicateEntryError: If the name is already used.
        :raises ContainerError: If the dtype cannot be stored.
        """
        if name in self.entries:
            raise DuplicateEntryError(f"Duplicate container entry {name!r}")
        arr = np.asarray(value)
        if arr.dtype not in _CODE_OF:
            raise ContainerError(f"Entry {name!r}: unsupported dtype {arr.dtype}")
        if arr.ndim > 255:
            raise ContainerError(f"Entry {name!r}: too many dimensions")
        self.entries[name] = np.require(arr, requirements="C")

    def write(self, output: BinaryIO) -> None:
        output.write(MAGIC)
        output.write(struct.pack("<II", VERSION, len(self.entries)))
        for name, arr in self.entries.items():
            raw = name.encode("utf-8")
            code = _CODE_OF[arr.dtype]
            output.write(struct.pack("<H", len(raw)))
            output.write(raw)
            output.write(struct.pack("<BB", code, arr.ndim))
            output.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            output.write(arr.astype(DTYPE_CODES[code], copy=False).tobytes(order="C"))

    def save(self, path: str) -> None:
        with open(path, "wb") as f:
            self.write(f)

    @classmethod
    def read(cls, data: bytes) -> "TensorContainer":
        """Parses a container.

        :raises BadMagicError: If the magic bytes are wrong.
        :raises UnsupportedVersionError: If the version is unknown.
        :raises TruncatedContainerError: If the data ends prematurely.
        :raises DuplicateEntryError: If a name appears twice.
        """
        reader = _Reader(data)
        if reader.take(4, "magic") != MAGIC:
            raise BadMagicError("Not a tensor container (bad magic)")
        version, count = reader.unpack("<II", "header")
        if version != VERSION:
            raise UnsupportedVersionError(f"Unsupported container version {version}")
        out = cls()
        for i in range(count):
            (name_len,) = reader.unpack("<H", f"entry {i}")
            name = reader.take(name_len, f"entry {i} name").decode("utf-8")
            code, ndim = reader.unpack("<BB", name)
            if code not in DTYPE_CODES:
                raise ContainerError(f"Entry {name!r}: unknown dtype code {code}")
            dims = reader.unpack(f"<{ndim}Q", name) if ndim > 0 else ()
            dtype = DTYPE_CODES[code]
            nbytes = dtype.itemsize * int(np.prod(dims, dtype=np.int64))
            payload = reader.take(nbytes, name)
            arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
            out.add(name, arr.astype(dtype.newbyteorder("="), copy=True))
        return out

    @classmethod
    def load(cls, path: str) -> "TensorContainer":
        with open(path, "rb") as f:
            return cls.read(f.read())


class _Reader(object):
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedContainerError(f"Container truncated while reading {what}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


# Checkpoints


def encode_rng_state(rng: np.random.Generator) -> np.ndarray:
    """Packs the state of a PCG64 generator into ten u32 words."""
    st = rng.bit_generator.state
    if st["bit_generator"] != "PCG64":
        raise CheckpointError(f"Cannot save a {st['bit_generator']} generator")
    words = []
    for value in (st["state"]["state"], st["state"]["inc"]):
        words += [(value >> (32 * i)) & 0xFFFFFFFF for i in range(4)]
    words += [st["has_uint32"], st["uinteger"]]
    return np.array(words, dtype=np.uint32)


def decode_rng_state(words: np.ndarray) -> np.random.Generator:
    w = [int(x) for x in words]
    if len(w) != 10:
        raise ShapeMismatchError(f"RNG state needs 10 words, got {len(w)}")
    state = sum(w[i] << (32 * i) for i in range(4))
    inc = sum(w[4 + i] << (32 * i) for i in range(4))
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {"state": state, "inc": inc},
        "has_uint32": w[8],
        "uinteger": w[9],
    }
    return np.random.Generator(bitgen)


def _check_shape(name: str, expected: Tuple[int, ...], value: np.ndarray) -> None:
    if tuple(value.shape) != tuple(expected):
        raise ShapeMismatchError(
            f"Checkpoint entry {name}: expected shape {tuple(expected)}, got {tuple(value.shape)}"
        )


def _fetch(container: TensorContainer, name: str) -> np.ndarray:
    if name not in container:
        raise CheckpointError(f"Checkpoint lacks entry {name}")
    return container[name]


def checkpoint_container(
    model: Module,
    optimizer: Optional[AdamW] = None,
    step: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> TensorContainer:
    """Packs a training state into a container, in a deterministic order."""
    c = TensorContainer()
    for name, p in model.named_parameters():
        c.add(f"param/{name}", p.data)
    for name, b in model.named_buffers():
        c.add(f"buffer/{name}", b.data)
    if optimizer is not None:
        for name in optimizer.params:
            c.add(f"adam.m/{name}", optimizer.m[name])
        for name in optimizer.params:
            c.add(f"adam.v/{name}", optimizer.v[name])
        for name in optimizer.params:
            c.add(f"adam.t/{name}", np.array([optimizer.t[name]], dtype=np.uint32))
        c.add("meta/adam_step", np.array([optimizer.step_count], dtype=np.uint32))
    c.add("meta/step", np.array([step], dtype=np.uint32))
    if rng is not None:
        c.add("meta/rng", encode_rng_state(rng))
    return c


def save_checkpoint(
    path: str,
    model: Module,
    optimizer: Optional[AdamW] = None,
    step: int = 0,
    rng: Optional[np.random.Generator] = None,
) -> None:
    checkpoint_container(model, optimizer, step, rng).save(path)
    logging.info(f"Saved checkpoint at step {step} to {path}")


def restore_checkpoint(
    container: TensorContainer,
    model: Module,
    optimizer: Optional[AdamW] = None,
) -> Tuple[int, Optional[np.random.Generator]]:
    """Loads a training state into a model and optimiser.

    Every shape is checked against the model before any value is
    written.

    :returns: The step and the restored generator (None if the
        checkpoint holds no generator).

    :raises CheckpointError: If an entry is missing.
    :raises ShapeMismatchError: If a shape differs from the model.
    """
    state: Dict[str, np.ndarray] = {}
    targets = [("param", n, t) for n, t in model.named_parameters()]
    targets += [("buffer", n, t) for n, t in model.named_buffers()]
    for kind, name, t in targets:
        key = f"{kind}/{name}"
        value = _fetch(container, key)
        _check_shape(key, t.shape, value)
        state[name] = value
    # all entries are checked before the model is touched
    if optimizer is not None:
        for name, p in optimizer.params.items():
            for kind in ("adam.m", "adam.v"):
                key = f"{kind}/{name}"
                _check_shape(key, p.shape, _fetch(container, key))
            _fetch(container, f"adam.t/{name}")
        _fetch(container, "meta/adam_step")
    _fetch(container, "meta/step")
    model.load_state_dict(state)
    if optimizer is not None:
        for name, p in optimizer.params.items():
            optimizer.m[name] = container[f"adam.m/{name}"].astype(p.dtype)
            optimizer.v[name] = container[f"adam.v/{name}"].astype(p.dtype)
            optimizer.t[name] = int(_fetch(container, f"adam.t/{name}")[0])
        optimizer.step_count = int(_fetch(container, "meta/adam_step")[0])
    step = int(_fetch(container, "meta/step")[0])
    rng = decode_rng_state(container["meta/rng"]) if "meta/rng" in container else None
    return step, rng


def load_checkpoint(
    path: str, model: Module, optimizer: Optional[AdamW] = None
) -> Tuple[int, Optional[np.random.Generator]]:
    return restore_checkpoint(TensorContainer.load(path), model, optimizer)


def save_encoder(path: str, encoder: Module) -> None:
    """Saves the parameters and buffers of an encoder alone."""
    c = TensorContainer()
    for name, value in encoder.state_dict().items():
        c.add(f"encoder/{name}", value)
    c.save(path)
    logging.info(f"Saved encoder to {path}")


def load_encoder(path: str, encoder: Module) -> None:
    """Loads an encoder state saved by ``save_encoder``."""
    c = TensorContainer.load(path)
    state = {}
    for name, current in encoder.state_dict().items():
        key = f"encoder/{name}"
        value = _fetch(c, key)
        _check_shape(key, current.shape, value)
        state[name] = value
    encoder.load_state_dict(state)
