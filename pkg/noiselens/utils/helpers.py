import hashlib
import json
import os
import tempfile

import numpy as np


def derive_seed(base_seed, *keys):
    """Derive an independent 32-bit seed from a base seed and integer keys.

    Args:
        base_seed (int): Run-level seed.
        *keys (int): Stream identifiers, e.g. (split index, item index).

    Returns:
        int: Seed for ``numpy.random.default_rng``.
    """
    sequence = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1)[0])


def make_rng(base_seed, *keys):
    return np.random.default_rng(derive_seed(base_seed, *keys))


def atomic_write_bytes(path, data):
    """Write ``data`` to ``path`` through a temporary file and ``os.replace``."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path, payload):
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=False) + "\n")


def calculate_params_hash(named_arrays):
    """sha256 over parameter names, shapes and float32 bytes, in iteration order."""
    digest = hashlib.sha256()
    for name, array in named_arrays:
        array = np.ascontiguousarray(array, dtype="<f4")
        digest.update(name.encode())
        digest.update(json.dumps(list(array.shape)).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def generate_operation_param_hash(operation_params):
    """Stable hash of a JSON-serialisable parameter dict."""
    params_str = json.dumps(operation_params, sort_keys=True)
    return hashlib.sha256(params_str.encode()).hexdigest()
