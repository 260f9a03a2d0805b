"""Per-client dynamic style memory: one prototype row per identity.

Prototypes are initialized from encoder features of the raw training data and
afterwards only move through gated momentum updates fed with style features.
They are never trained by gradient descent.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from .data import DomainDataset
from .errors import ConfigError, InitError, StateError
from .nn import Encoder, forward_encoder, l2_normalize

log = logging.getLogger(__name__)

POLICIES = ("renormalize", "paper_literal")


@dataclass
class StyleMemory:
    prototypes: np.ndarray
    momentum: float
    renorm_policy: str = "renormalize"
    update_count: np.ndarray = None

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        if self.prototypes.ndim != 2 or self.prototypes.shape[0] < 1:
            raise ConfigError("prototypes must form a non-empty matrix")
        if not (0.0 <= self.momentum <= 1.0):
            raise ConfigError("momentum must lie in [0, 1]")
        if self.renorm_policy not in POLICIES:
            raise ConfigError(f"unknown renorm policy {self.renorm_policy!r}")
        if self.update_count is None:
            self.update_count = np.zeros(self.prototypes.shape[0], dtype=np.int64)
        else:
            self.update_count = np.asarray(self.update_count, dtype=np.int64)

    @property
    def num_identities(self) -> int:
        return self.prototypes.shape[0]

    @property
    def dim(self) -> int:
        return self.prototypes.shape[1]


def initialize_memory(dataset: DomainDataset, encoder: Encoder,
                      momentum: float = 0.2, renorm_policy: str = "renormalize",
                      normalize_before_mean: bool = True) -> StyleMemory:
    """Build prototypes as per-identity means of encoder features.

    Features are L2-normalized before averaging by default
    (``normalize_before_mean=False`` averages raw features instead), and the
    mean is renormalized under the renormalize policy.
    """
    rows = []
    for i in range(dataset.num_identities):
        idx = dataset.identity_indices(i)
        if idx.size == 0:
            raise InitError(f"identity {i} has no samples")
        feats = forward_encoder(encoder, dataset.features[idx])
        if normalize_before_mean:
            feats = l2_normalize(feats)
        rows.append(feats.mean(axis=0))
    protos = np.vstack(rows)
    if renorm_policy == "renormalize":
        protos = l2_normalize(protos)
    return StyleMemory(protos, momentum, renorm_policy)


def momentum_update(memory: StyleMemory, identity: int,
                    style_features: np.ndarray) -> StyleMemory:
    """Blend one identity's prototype toward this round's style features.

    Renormalize policy blends with the mean feature and renormalizes; the
    paper_literal policy keeps the verbatim sum-form update with no renorm.
    Rows of ``style_features`` are expected unit-norm.
    """
    if not (0 <= identity < memory.num_identities):
        raise IndexError(f"identity {identity} outside [0, {memory.num_identities})")
    feats = np.asarray(style_features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[None, :]
    if feats.shape[0] == 0:
        log.warning("momentum_update: no features for identity %d, skipping", identity)
        return memory
    if feats.shape[1] != memory.dim:
        raise ConfigError("style feature dim does not match memory")
    m = memory.momentum
    old = memory.prototypes[identity]
    if memory.renorm_policy == "renormalize":
        blended = (1.0 - m) * old + m * feats.mean(axis=0)
        memory.prototypes[identity] = l2_normalize(blended)
    else:
        memory.prototypes[identity] = (1.0 - m) * old + m * feats.sum(axis=0)
    memory.update_count[identity] += 1
    return memory


def prototype_matrix(memory: StyleMemory | None) -> np.ndarray:
    """Read-only snapshot of the prototype bank."""
    if memory is None:
        raise StateError("memory has not been initialized")
    snap = memory.prototypes.copy()
    snap.flags.writeable = False
    return snap


def render_memory(memory: StyleMemory) -> str:
    """Canonical text dump, bit-exact round-trip at 17 significant digits."""
    lines = [
        "fedstyle-memory 1",
        f"{memory.num_identities} {memory.dim} {memory.momentum!r} {memory.renorm_policy}",
        " ".join(str(int(c)) for c in memory.update_count),
    ]
    for row in memory.prototypes:
        lines.append(" ".join(f"{v:.17g}" for v in row))
    return "\n".join(lines) + "\n"


def save_memory(memory: StyleMemory, path) -> None:
    with open(path, "w") as fh:
        fh.write(render_memory(memory))


def load_memory(path) -> StyleMemory:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "fedstyle-memory 1":
        raise ConfigError(f"{path}: not a memory checkpoint")
    p, d, m, policy = lines[1].split()
    counts = np.asarray([int(c) for c in lines[2].split()], dtype=np.int64)
    rows = [[float(v) for v in line.split()] for line in lines[3:3 + int(p)]]
    protos = np.asarray(rows, dtype=np.float64)
    if protos.shape != (int(p), int(d)):
        raise ConfigError(f"{path}: truncated prototype block")
    return StyleMemory(protos, float(m), policy, counts)


def memory_digest(memories) -> str:
    """SHA-256 over canonical dumps of one memory or an iterable of them."""
    if isinstance(memories, StyleMemory):
        memories = [memories]
    h = hashlib.sha256()
    for mem in memories:
        if mem is None:
            h.update(b"none\n")
        else:
            h.update(render_memory(mem).encode())
    return h.hexdigest()
