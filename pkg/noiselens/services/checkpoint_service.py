"""Single-file model checkpoints.

Layout: 8-byte magic, little-endian uint32 header length, UTF-8 JSON header
(format version, model kind, config echo, parameter table), then every parameter as
raw little-endian float32 in header order.
"""
import json
import logging
import os
import struct

import numpy as np

from noiselens.core.exceptions import (
    CheckpointShapeError,
    CheckpointVersionError,
    CorruptCheckpointError,
)
from noiselens.core.networks import Discriminator, Generator, TaskNetwork
from noiselens.models.schemas import DiscriminatorSchema, GeneratorSchema, TaskSchema
from noiselens.utils.helpers import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"NLSCKPT\x00"
FORMAT_VERSION = 1
_LENGTH = struct.Struct("<I")

MODEL_KINDS = {
    "generator": (Generator, GeneratorSchema),
    "discriminator": (Discriminator, DiscriminatorSchema),
    "task": (TaskNetwork, TaskSchema),
}


class CheckpointService:
    """Save and restore generator, discriminator and task-network parameters."""

    @staticmethod
    def encode(module, extra=None):
        """Serialize a model to checkpoint bytes."""
        _, schema = MODEL_KINDS[module.kind]
        params, offset, chunks = [], 0, []
        for name, tensor in module.named_parameters():
            array = np.ascontiguousarray(tensor.data, dtype="<f4")
            params.append({"name": name, "shape": list(array.shape), "offset": offset})
            chunks.append(array.tobytes())
            offset += array.nbytes
        header = {
            "version": FORMAT_VERSION,
            "kind": module.kind,
            "config": schema().dump(module.config),
            "params": params,
            "extra": extra or {},
        }
        header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
        return MAGIC + _LENGTH.pack(len(header_bytes)) + header_bytes + b"".join(chunks)

    @staticmethod
    def save(module, path, extra=None):
        """Atomically write ``module`` to ``path``."""
        atomic_write_bytes(path, CheckpointService.encode(module, extra))
        logger.info(f"Saved {module.kind} checkpoint to {path}")
        return path

    @staticmethod
    def decode(blob, source="<bytes>"):
        """Parse checkpoint bytes into ``(header, arrays)``."""
        prefix = len(MAGIC) + _LENGTH.size
        if len(blob) < prefix:
            raise CorruptCheckpointError(f"{source}: file too short to be a checkpoint")
        if blob[: len(MAGIC)] != MAGIC:
            raise CheckpointVersionError(f"{source}: unrecognised magic string")
        (header_length,) = _LENGTH.unpack(blob[len(MAGIC):prefix])
        if len(blob) < prefix + header_length:
            raise CorruptCheckpointError(f"{source}: truncated header")
        try:
            header = json.loads(blob[prefix:prefix + header_length].decode("utf-8"))
            version = header["version"]
            kind = header["kind"]
            table = header["params"]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise CorruptCheckpointError(f"{source}: unreadable header ({e})") from e
        if version != FORMAT_VERSION:
            raise CheckpointVersionError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
        if kind not in MODEL_KINDS:
            raise CorruptCheckpointError(f"{source}: unknown model kind '{kind}'")

        data = blob[prefix + header_length:]
        arrays = {}
        for entry in table:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            start, end = entry["offset"], entry["offset"] + 4 * count
            if end > len(data):
                raise CorruptCheckpointError(f"{source}: data for '{entry['name']}' is truncated")
            arrays[entry["name"]] = np.frombuffer(data[start:end], dtype="<f4").reshape(shape).astype(np.float32)
        return header, arrays

    @staticmethod
    def restore(module, arrays):
        """Copy ``arrays`` into ``module``; every parameter must be present with its shape."""
        for name, tensor in module.named_parameters():
            if name not in arrays:
                raise CheckpointShapeError(name, tensor.shape, ())
            if arrays[name].shape != tensor.shape:
                raise CheckpointShapeError(name, tensor.shape, arrays[name].shape)
        expected = {name for name, _ in module.named_parameters()}
        for name, array in arrays.items():
            if name not in expected:
                raise CheckpointShapeError(name, (), array.shape)
        for name, tensor in module.named_parameters():
            tensor.data[...] = arrays[name]
            tensor.grad = None
        return module

    @staticmethod
    def load(path, config=None, kind=None):
        """Load a model from ``path``.

        Args:
            path (str): Checkpoint file.
            config: Optional model config to build into; defaults to the stored config.
            kind (str): Optional expected model kind.

        Returns:
            Module: The restored generator, discriminator or task network.

        Raises:
            FileNotFoundError: If the file does not exist.
            CorruptCheckpointError, CheckpointVersionError, CheckpointShapeError
        """
        if not os.path.exists(path):
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        with open(path, "rb") as f:
            header, arrays = CheckpointService.decode(f.read(), source=path)
        if kind is not None and header["kind"] != kind:
            raise CorruptCheckpointError(f"{path}: holds a {header['kind']}, expected a {kind}")
        cls, schema = MODEL_KINDS[header["kind"]]
        if config is None:
            config = schema().load(header["config"])
        module = cls(config)
        CheckpointService.restore(module, arrays)
        logger.info(f"Loaded {header['kind']} checkpoint from {path}")
        return module

    @staticmethod
    def read_header(path):
        with open(path, "rb") as f:
            header, _ = CheckpointService.decode(f.read(), source=path)
        return header


save_checkpoint = CheckpointService.save
load_checkpoint = CheckpointService.load
