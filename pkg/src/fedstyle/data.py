"""Synthetic multi-domain identity data and the feature-statistics style transform.

Each domain styles a shared generative recipe with its own per-feature scale
and shift, so domains are linearly distinguishable while identities stay
consistent within a domain. The style transform perturbs batch feature
statistics (a stand-in for a learned style-transfer network) and can inject
an identity-destroying degradation event, which is what the screening gate
exists to catch.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, SamplingError, ShapeError, SplitError

from typing import NamedTuple


@dataclass(frozen=True)
class DomainSpec:
    """Recipe for one synthetic domain."""

    domain_id: int
    num_identities: int
    samples_per_identity: int
    style_scale: np.ndarray
    style_shift: np.ndarray
    noise_sigma: float
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "style_scale",
                           np.asarray(self.style_scale, dtype=np.float64))
        object.__setattr__(self, "style_shift",
                           np.asarray(self.style_shift, dtype=np.float64))
        if self.num_identities < 2:
            raise ConfigError("num_identities must be >= 2")
        if self.samples_per_identity < 2:
            raise ConfigError("samples_per_identity must be >= 2")
        if self.style_scale.shape != self.style_shift.shape or self.style_scale.ndim != 1:
            raise ShapeError("style_scale and style_shift must be equal-length vectors")
        if np.any(self.style_scale <= 0):
            raise ConfigError("style_scale entries must be positive")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")

    @property
    def input_dim(self) -> int:
        return self.style_scale.shape[0]


@dataclass
class DomainDataset:
    """Identity-labelled feature vectors from a single domain."""

    domain_id: int
    features: np.ndarray
    identities: np.ndarray
    num_identities: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.identities = np.asarray(self.identities, dtype=np.int64)
        if self.features.ndim != 2 or self.identities.ndim != 1:
            raise ShapeError("features must be 2-d and identities 1-d")
        if self.features.shape[0] != self.identities.shape[0]:
            raise ShapeError("features and identities row counts differ")
        if self.identities.size and self.identities.max() >= self.num_identities:
            raise ShapeError("identity label exceeds num_identities")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def identity_indices(self, identity: int) -> np.ndarray:
        return np.flatnonzero(self.identities == identity)

    def subset(self, indices) -> "DomainDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return DomainDataset(self.domain_id, self.features[idx].copy(),
                             self.identities[idx].copy(), self.num_identities)


@dataclass
class StyleTransformConfig:
    """Controls the statistics re-mixing strength and the degradation event."""

    mix_alpha: float = 0.5
    degrade_prob: float = 0.0
    degrade_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.mix_alpha <= 1.0):
            raise ConfigError("mix_alpha must lie in [0, 1]")
        if not (0.0 <= self.degrade_prob <= 1.0):
            raise ConfigError("degrade_prob must lie in [0, 1]")
        if self.degrade_sigma < 0:
            raise ConfigError("degrade_sigma must be non-negative")


class Batch(NamedTuple):
    features: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


@dataclass
class QueryGallerySplit:
    """Disjoint query/gallery halves of one domain, by sample index."""

    domain_id: int
    query_indices: np.ndarray
    gallery_indices: np.ndarray
    query_features: np.ndarray
    query_ids: np.ndarray
    gallery_features: np.ndarray
    gallery_ids: np.ndarray

    @property
    def num_queries(self) -> int:
        return self.query_ids.shape[0]

    @property
    def gallery_size(self) -> int:
        return self.gallery_ids.shape[0]


def make_identity_latents(rng: np.random.Generator, num_identities: int,
                          dim: int, informative_dims: int | None = None) -> np.ndarray:
    """Latent vector per identity; trailing dims beyond ``informative_dims`` stay zero."""
    k = dim if informative_dims is None else int(informative_dims)
    if not (1 <= k <= dim):
        raise ConfigError("informative_dims must lie in [1, dim]")
    latents = np.zeros((num_identities, dim))
    latents[:, :k] = rng.standard_normal((num_identities, k))
    return latents


def generate_domain(spec: DomainSpec, identity_latents: np.ndarray) -> DomainDataset:
    """Materialize a domain: scale * (latent + noise) + shift, seeded by the spec."""
    latents = np.asarray(identity_latents, dtype=np.float64)
    if latents.shape != (spec.num_identities, spec.input_dim):
        raise ShapeError(
            f"latents shape {latents.shape} does not match spec "
            f"({spec.num_identities}, {spec.input_dim})"
        )
    rng = np.random.default_rng(spec.seed)
    n = spec.samples_per_identity
    rows = []
    ids = []
    for i in range(spec.num_identities):
        eps = rng.normal(0.0, spec.noise_sigma, size=(n, spec.input_dim)) \
            if spec.noise_sigma > 0 else np.zeros((n, spec.input_dim))
        rows.append(spec.style_scale * (latents[i] + eps) + spec.style_shift)
        ids.extend([i] * n)
    return DomainDataset(spec.domain_id, np.vstack(rows), np.asarray(ids),
                         spec.num_identities)


def style_transform(batch, cfg: StyleTransformConfig,
                    rng: np.random.Generator) -> np.ndarray:
    """Re-mix per-feature batch statistics toward a randomly drawn style.

    Rows keep their identity labels. With probability ``degrade_prob`` the
    whole batch additionally receives Gaussian noise of scale
    ``degrade_sigma``, the degradation event that produces a negative style.
    mix_alpha = 0 and degrade_sigma = 0 give the exact identity map, and the
    generator stream is only consumed by the branches that are switched on.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"batch must be 2-d, got shape {x.shape}")
    out = x
    if cfg.mix_alpha > 0:
        if x.shape[0] < 2:
            raise DegenerateInputError(
                "batch statistics need at least 2 rows when mix_alpha > 0"
            )
        mu = x.mean(axis=0)
        sd = x.std(axis=0)
        sd_safe = np.where(sd > 1e-12, sd, 1.0)
        # New style stats are drawn relative to the batch's own statistics.
        mu_new = mu + sd_safe * rng.standard_normal(x.shape[1])
        sd_new = sd * np.exp(0.5 * rng.standard_normal(x.shape[1]))
        a = cfg.mix_alpha
        mu_mix = (1.0 - a) * mu + a * mu_new
        sd_mix = (1.0 - a) * sd + a * sd_new
        out = (x - mu) / sd_safe * sd_mix + mu_mix
    if cfg.degrade_prob > 0 and rng.random() < cfg.degrade_prob:
        if cfg.degrade_sigma > 0:
            out = out + rng.normal(0.0, cfg.degrade_sigma, size=x.shape)
    if not np.all(np.isfinite(out)):
        raise DegenerateInputError("style transform produced non-finite values")
    return out


def sample_pk_batch(dataset: DomainDataset, num_ids: int, instances: int,
                    rng: np.random.Generator) -> Batch:
    """Uniform PK batch: ``num_ids`` distinct identities, ``instances`` each."""
    if num_ids < 1 or instances < 1:
        raise SamplingError("num_ids and instances must be positive")
    eligible = [i for i in range(dataset.num_identities)
                if dataset.identity_indices(i).size >= instances]
    if len(eligible) < num_ids:
        raise SamplingError(
            f"need {num_ids} identities with >= {instances} samples, "
            f"found {len(eligible)}"
        )
    chosen = rng.choice(np.asarray(eligible), size=num_ids, replace=False)
    picks = []
    for ident in chosen:
        idx = dataset.identity_indices(int(ident))
        picks.append(rng.choice(idx, size=instances, replace=False))
    indices = np.concatenate(picks)
    return Batch(dataset.features[indices].copy(),
                 dataset.identities[indices].copy(), indices)


def make_query_gallery_split(dataset: DomainDataset, query_fraction: float,
                             rng: np.random.Generator) -> QueryGallerySplit:
    """Per-identity split keeping at least one gallery sample per identity."""
    if not (0.0 <= query_fraction < 1.0):
        raise ConfigError("query_fraction must lie in [0, 1)")
    q_idx, g_idx = [], []
    for i in range(dataset.num_identities):
        idx = dataset.identity_indices(i)
        if idx.size < 2:
            raise SplitError(f"identity {i} has {idx.size} sample(s), needs >= 2")
        perm = rng.permutation(idx)
        n_q = int(round(query_fraction * idx.size))
        if query_fraction > 0:
            n_q = min(max(n_q, 1), idx.size - 1)
        else:
            n_q = 0
        q_idx.extend(perm[:n_q])
        g_idx.extend(perm[n_q:])
    q = np.asarray(sorted(q_idx), dtype=np.int64)
    g = np.asarray(sorted(g_idx), dtype=np.int64)
    return QueryGallerySplit(
        domain_id=dataset.domain_id,
        query_indices=q,
        gallery_indices=g,
        query_features=dataset.features[q].copy(),
        query_ids=dataset.identities[q].copy(),
        gallery_features=dataset.features[g].copy(),
        gallery_ids=dataset.identities[g].copy(),
    )


def export_dataset_csv(dataset: DomainDataset, path) -> None:
    """Write ``domain,identity,f0..f{d-1}`` rows; floats round-trip exactly."""
    d = dataset.input_dim
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["domain", "identity"] + [f"f{j}" for j in range(d)])
        for ident, row in zip(dataset.identities, dataset.features):
            writer.writerow([dataset.domain_id, int(ident)] + [repr(v) for v in row])


def import_dataset_csv(path) -> DomainDataset:
    """Inverse of :func:`export_dataset_csv`; the file must hold one domain."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["domain", "identity"]:
            raise ConfigError(f"{path}: not a dataset CSV (bad header)")
        dim = len(header) - 2
        if [f"f{j}" for j in range(dim)] != header[2:]:
            raise ConfigError(f"{path}: malformed feature columns")
        domains, ids, rows = [], [], []
        for line in reader:
            if not line:
                continue
            domains.append(int(line[0]))
            ids.append(int(line[1]))
            rows.append([float(v) for v in line[2:]])
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    if len(set(domains)) != 1:
        raise ConfigError(f"{path}: expected exactly one domain, got {sorted(set(domains))}")
    ids_arr = np.asarray(ids, dtype=np.int64)
    return DomainDataset(domains[0], np.asarray(rows), ids_arr, int(ids_arr.max()) + 1)
