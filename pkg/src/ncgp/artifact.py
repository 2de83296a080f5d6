"""Versioned binary persistence of posterior beliefs.

Layout (all little-endian): magic b"NCGP", format version u32, then
u64 dimensions (N, D, C, rank, newton step, solver iterations), the
float64 payloads X, weights and root columns in row-major order, and a
length-prefixed JSON configuration echo.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from .exceptions import ArtifactError
from .linalg import LowRankRoot
from .posterior import PosteriorBelief

MAGIC = b"NCGP"
VERSION = 1


def _pack_array(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_belief(path, belief: PosteriorBelief, config_echo: dict) -> None:
    """Write a belief artifact atomically (temp file + rename)."""
    X = np.asarray(belief.train_inputs, dtype=np.float64)
    n, d = X.shape
    c = belief.prior.num_outputs
    rank = belief.root.rank
    blob = json.dumps(config_echo, sort_keys=True).encode("utf-8")
    payload = b"".join([
        MAGIC,
        struct.pack("<I", VERSION),
        struct.pack("<6Q", n, d, c, rank,
                    belief.newton_step, belief.solver_iterations),
        _pack_array(X),
        _pack_array(belief.weights),
        _pack_array(belief.root.columns),
        struct.pack("<Q", len(blob)),
        blob,
    ])
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_belief(path):
    """Read a belief artifact; returns (belief, config echo)."""
    from .config import build_prior  # deferred: config imports gp types

    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ArtifactError(f"{path}: not a belief artifact (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ArtifactError(
            f"{path}: artifact format version {version} is not supported by "
            f"this build (expected {VERSION}); re-fit or upgrade the package")
    n, d, c, rank, step, iters = struct.unpack_from("<6Q", data, 8)
    offset = 8 + 48

    def take(count):
        nonlocal offset
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
        offset += 8 * count
        return np.array(arr, dtype=np.float64)

    X = take(n * d).reshape(n, d)
    weights = take(n * c)
    root = take(n * c * rank).reshape(n * c, rank)
    (blob_len,) = struct.unpack_from("<Q", data, offset)
    offset += 8
    echo = json.loads(data[offset:offset + blob_len].decode("utf-8"))
    prior = build_prior(echo.get("prior", {}), int(c))
    belief = PosteriorBelief(prior=prior, train_inputs=X, weights=weights,
                             root=LowRankRoot(root), newton_step=int(step),
                             solver_iterations=int(iters))
    return belief, echo
