"""Federated round loop: distribute, local two-branch training, weighted
aggregation, post-aggregation evaluation and the gain-gated memory update.

Clients never share raw data or memories; only client-global encoder
parameters travel to the server. Classifiers stay on their clients.
"""

from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import nn
from .config import ExperimentConfig, val_samples_per_identity
from .data import (Batch, DomainDataset, DomainSpec, QueryGallerySplit,
                   StyleTransformConfig, generate_domain, make_identity_latents,
                   make_query_gallery_split, sample_pk_batch, style_transform)
from .errors import ConfigError, StateError
from .evaluation import MetricsReport, evaluate_plan, evaluate_split
from .memory import StyleMemory, initialize_memory, memory_digest, momentum_update, prototype_matrix

log = logging.getLogger(__name__)

# Tags for deriving independent generator streams from the experiment seed.
_TAG_STYLE = 1
_TAG_SERVER = 2
_TAG_CLIENT = 3
_TAG_SPLIT = 4


@dataclass
class ClientState:
    """Everything one client owns: data, models, memory, optimizers, streams."""

    client_id: int
    train: DomainDataset
    val_split: QueryGallerySplit
    client_global: nn.Encoder
    client_local: nn.Encoder
    classifier: nn.Classifier
    transform: StyleTransformConfig
    opt_global: nn.SgdState
    opt_local: nn.SgdState
    opt_classifier: nn.SgdState
    batch_rng: np.random.Generator
    transform_rng: np.random.Generator
    memory: StyleMemory | None = None

    @property
    def num_samples(self) -> int:
        return len(self.train)

    @property
    def num_identities(self) -> int:
        return self.train.num_identities


@dataclass
class ServerState:
    """Server-side view: the aggregated encoder and the screening baseline.

    Deliberately holds no classifier parameters; those never leave clients.
    """

    encoder: nn.Encoder
    round: int = 0
    last_rank1: float | None = None
    client_sizes: list = field(default_factory=list)


@dataclass
class RoundRecord:
    round: int
    rank1_before: float | None
    rank1_after: float
    decision: str
    new_style_loss: list
    memory_loss: list
    lr: float
    wall_time: float
    memory_digest: str

    def ledger_entry(self) -> dict:
        """Serializable view; wall time is excluded so reruns are byte-equal."""
        return {
            "round": self.round,
            "rank1_before": self.rank1_before,
            "rank1_after": self.rank1_after,
            "decision": self.decision,
            "new_style_loss": self.new_style_loss,
            "memory_loss": self.memory_loss,
            "lr": self.lr,
            "memory_digest": self.memory_digest,
        }


@dataclass
class ClientRoundReport:
    new_style_loss: float | None
    memory_loss: float | None


@dataclass
class ExperimentState:
    config: ExperimentConfig
    server: ServerState
    clients: list
    target_split: QueryGallerySplit
    target_dataset: DomainDataset


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    server: ServerState
    clients: list
    ledger: list
    metrics_rows: list
    final_reports: dict


def iterations_per_epoch(num_samples: int, batch_size: int) -> int:
    return max(1, num_samples // batch_size)


def build_domain_specs(cfg: ExperimentConfig):
    """Source specs plus one held-out target spec, all styled independently.

    Per-domain style: informative dims get mild scale jitter, nuisance dims a
    larger domain-specific amplification, and every dim a shift. The per
    domain data seed is experiment seed XOR domain id.
    """
    d = cfg.encoder.input_dim
    k_inf = cfg.data.informative_dims
    style_rng = np.random.default_rng([cfg.seed, _TAG_STYLE])
    num_domains = cfg.data.num_sources + 1
    specs = []
    for dom in range(num_domains):
        scale = np.empty(d)
        scale[:k_inf] = np.exp(style_rng.normal(0.0, cfg.data.scale_spread, k_inf))
        scale[k_inf:] = cfg.data.nuisance_scale * np.exp(
            style_rng.normal(0.0, cfg.data.scale_spread, d - k_inf))
        shift = style_rng.normal(0.0, cfg.data.shift_spread, d)
        specs.append(DomainSpec(
            domain_id=dom,
            num_identities=cfg.data.identities_per_domain,
            samples_per_identity=cfg.data.samples_per_identity,
            style_scale=scale,
            style_shift=shift,
            noise_sigma=cfg.data.noise_sigma,
            seed=cfg.seed ^ dom,
        ))
    return specs[:-1], specs[-1]


def build_domain(spec: DomainSpec, informative_dims: int) -> DomainDataset:
    """Draw this domain's identity latents and materialize the dataset."""
    latent_rng = np.random.default_rng([spec.seed, 101])
    latents = make_identity_latents(latent_rng, spec.num_identities,
                                    spec.input_dim, informative_dims)
    return generate_domain(spec, latents)


def _train_val_split(dataset: DomainDataset, val_per_identity: int,
                     rng: np.random.Generator):
    if val_per_identity == 0:
        return dataset, None
    train_idx, val_idx = [], []
    for i in range(dataset.num_identities):
        idx = rng.permutation(dataset.identity_indices(i))
        val_idx.extend(idx[:val_per_identity])
        train_idx.extend(idx[val_per_identity:])
    return dataset.subset(sorted(train_idx)), dataset.subset(sorted(val_idx))


def setup_experiment(cfg: ExperimentConfig) -> ExperimentState:
    """Deterministically build datasets, the server model and all clients."""
    cfg.validate()
    source_specs, target_spec = build_domain_specs(cfg)
    if cfg.eval.plan == "reduced_sources":
        source_specs = source_specs[:-1]

    encoder_dims = (cfg.encoder.input_dim, cfg.encoder.hidden_dim,
                    cfg.encoder.feature_dim)
    server = ServerState(encoder=nn.init_encoder(
        np.random.default_rng([cfg.seed, _TAG_SERVER]), encoder_dims,
        cfg.encoder.activation))

    val_n = val_samples_per_identity(cfg)
    opt_kwargs = dict(base_lr=cfg.optimizer.base_lr,
                      weight_decay=cfg.optimizer.weight_decay,
                      momentum=cfg.optimizer.momentum,
                      milestones=cfg.optimizer.milestones,
                      gamma=cfg.optimizer.gamma)

    clients = []
    for spec in source_specs:
        dom = spec.domain_id
        full = build_domain(spec, cfg.data.informative_dims)
        split_rng = np.random.default_rng([cfg.seed, _TAG_SPLIT, dom, 0])
        train, val = _train_val_split(full, val_n, split_rng)
        if val is None:
            raise ConfigError("screening needs a non-empty validation holdout")
        val_split = make_query_gallery_split(
            val, cfg.eval.query_fraction,
            np.random.default_rng([cfg.seed, _TAG_SPLIT, dom, 1]))
        client_global = server.encoder.copy()
        client_local = server.encoder.copy()
        classifier = nn.init_classifier(
            np.random.default_rng([cfg.seed, _TAG_CLIENT, dom, 2]),
            train.num_identities, cfg.encoder.feature_dim)
        transform_seed = int(np.random.default_rng(
            [cfg.seed, _TAG_CLIENT, dom, 1]).integers(0, 2**63))
        transform = StyleTransformConfig(
            mix_alpha=cfg.transform.mix_alpha,
            degrade_prob=cfg.transform.degrade_prob,
            degrade_sigma=cfg.transform.degrade_sigma,
            seed=transform_seed)
        clients.append(ClientState(
            client_id=dom,
            train=train,
            val_split=val_split,
            client_global=client_global,
            client_local=client_local,
            classifier=classifier,
            transform=transform,
            opt_global=nn.sgd_for(client_global.parameters(), **opt_kwargs),
            opt_local=nn.sgd_for(client_local.parameters(), **opt_kwargs),
            opt_classifier=nn.sgd_for(classifier.parameters(), **opt_kwargs),
            batch_rng=np.random.default_rng([cfg.seed, _TAG_CLIENT, dom, 0]),
            transform_rng=np.random.default_rng(transform_seed),
        ))
    server.client_sizes = [c.num_samples for c in clients]

    target = build_domain(target_spec, cfg.data.informative_dims)
    target_split = make_query_gallery_split(
        target, cfg.eval.query_fraction,
        np.random.default_rng([cfg.seed, _TAG_SPLIT, target_spec.domain_id, 1]))
    return ExperimentState(cfg, server, clients, target_split, target)


def distribute(server: ServerState, clients) -> None:
    """Copy the server encoder into every client's client-global slot."""
    for client in clients:
        client.client_global = server.encoder.copy()


def _clamped_batch(cfg: ExperimentConfig, client: ClientState):
    p = cfg.batch.num_identities
    if p > client.num_identities:
        log.warning("client %d: clamping PK identities %d -> %d",
                    client.client_id, p, client.num_identities)
        p = client.num_identities
    return p, cfg.batch.instances


def _new_style_step(client: ClientState, features, labels, loss_cfg,
                    use_triplet: bool = True) -> float:
    """One optimization step of the new-style branch (classification plus
    batch-hard triplet) on the client-global model and its classifier."""
    feats, cache = nn.forward_encoder_cached(client.client_global, features)
    logits = client.classifier.logits(feats)
    ce, dlogits = nn.cross_entropy_loss(logits, labels, loss_cfg.label_smoothing)
    d_weight = dlogits.T @ feats
    d_bias = dlogits.sum(axis=0)
    dfeats = dlogits @ client.classifier.weight
    total = ce
    if use_triplet:
        tri, dtri = nn.triplet_loss(feats, labels, loss_cfg.triplet_margin)
        dfeats = dfeats + dtri
        total += tri
    grads, _ = nn.backward_encoder(client.client_global, cache, dfeats)
    client.client_global = client.client_global.with_parameters(
        nn.sgd_step(client.client_global.parameters(), grads, client.opt_global))
    client.classifier = client.classifier.with_parameters(
        nn.sgd_step(client.classifier.parameters(), [d_weight, d_bias],
                    client.opt_classifier))
    return total


def _memory_branch_step(client: ClientState, features, labels, loss_cfg) -> float:
    """Recognition-loss steps on original images for both client models."""
    protos = prototype_matrix(client.memory)
    total = 0.0
    for model_attr, opt in (("client_local", client.opt_local),
                            ("client_global", client.opt_global)):
        model = getattr(client, model_attr)
        feats, cache = nn.forward_encoder_cached(model, features)
        normed = nn.l2_normalize(feats)
        loss, dnormed = nn.recognition_loss(normed, labels, protos,
                                            loss_cfg.temperature)
        dfeats = nn.l2_normalize_backward(feats, dnormed)
        grads, _ = nn.backward_encoder(model, cache, dfeats)
        setattr(client, model_attr,
                model.with_parameters(nn.sgd_step(model.parameters(), grads, opt)))
        total += loss
    return total


def client_round(client: ClientState, cfg: ExperimentConfig, epoch: int,
                 forced_degrade: bool = False):
    """One local epoch of two-branch training.

    Per iteration: sample a PK batch, generate a styled variant, take the
    new-style step (styled images) before the memory branch steps (original
    images), then cache unit-norm style features from the stepped
    client-global model, grouped by identity. Returns the cache and the mean
    branch losses.
    """
    flags = cfg.ablation
    if flags.memory and client.memory is None:
        raise StateError("memory branch enabled but memory not initialized")
    for opt in (client.opt_global, client.opt_local, client.opt_classifier):
        nn.update_lr(opt, epoch)
    p, k = _clamped_batch(cfg, client)
    tcfg = client.transform
    if forced_degrade:
        tcfg = replace(tcfg, degrade_prob=1.0)
    ns_losses: list = []
    mem_losses: list = []
    cache: dict = {}
    for _ in range(iterations_per_epoch(client.num_samples, p * k)):
        batch = sample_pk_batch(client.train, p, k, client.batch_rng)
        styled = None
        if flags.new_style or flags.memory:
            styled = style_transform(batch.features, tcfg, client.transform_rng)
        if flags.new_style:
            ns_losses.append(_new_style_step(client, styled, batch.labels, cfg.loss))
        elif not flags.memory:
            # Reference baseline: classification on original images only.
            ns_losses.append(_new_style_step(client, batch.features, batch.labels,
                                             cfg.loss, use_triplet=False))
        if flags.memory:
            mem_losses.append(_memory_branch_step(client, batch.features,
                                                  batch.labels, cfg.loss))
            style_feats = nn.l2_normalize(
                nn.forward_encoder(client.client_global, styled))
            for ident in np.unique(batch.labels):
                rows = style_feats[batch.labels == ident]
                cache.setdefault(int(ident), []).append(rows)
    cache = {ident: np.vstack(rows) for ident, rows in cache.items()}
    report = ClientRoundReport(
        new_style_loss=float(np.mean(ns_losses)) if ns_losses else None,
        memory_loss=float(np.mean(mem_losses)) if mem_losses else None,
    )
    return cache, report


def aggregate(server: ServerState, clients) -> None:
    """Data-volume-weighted average of client-global encoders only."""
    sizes = [c.num_samples for c in clients]
    total = float(sum(sizes))
    if total <= 0:
        raise ConfigError("cannot aggregate with zero total samples")
    acc = None
    for client, size in zip(clients, sizes):
        weight = size / total
        params = client.client_global.parameters()
        if acc is None:
            acc = [weight * p for p in params]
        else:
            for i, p in enumerate(params):
                acc[i] = acc[i] + weight * p
    server.encoder = server.encoder.with_parameters(acc)
    server.client_sizes = sizes


def screening_decision(round_index: int, rank1_before: float | None,
                       rank1_after: float) -> bool:
    """Positive iff this is the first comparison point or Rank-1 strictly rose."""
    return round_index <= 1 or rank1_before is None or rank1_after > rank1_before


def screening_rank1(encoder: nn.Encoder, clients, max_rank: int):
    """Mean Rank-1 of the encoder over the clients' held-out source splits."""
    reports = {c.client_id: evaluate_split(encoder, c.val_split, max_rank)
               for c in clients}
    mean_rank1 = float(np.mean([r.rank1 for r in reports.values()]))
    return mean_rank1, reports


def screen_and_update(server: ServerState, clients, caches,
                      cfg: ExperimentConfig):
    """Evaluate the freshly aggregated server model and gate memory updates.

    A positive decision (first round, or strict Rank-1 gain over the previous
    round) feeds every cached style feature into its client's memory;
    a negative decision discards the round's cache untouched. With screening
    disabled the cache is always applied, but the decision is still recorded
    per the gain rule so ledgers stay comparable.
    """
    rank1_after, reports = screening_rank1(server.encoder, clients,
                                           cfg.eval.max_rank)
    before = server.last_rank1
    positive = screening_decision(server.round, before, rank1_after)
    if cfg.ablation.memory and (positive or not cfg.ablation.screening):
        for client, cache in zip(clients, caches):
            for ident in sorted(cache):
                momentum_update(client.memory, ident, cache[ident])
    server.last_rank1 = rank1_after
    return ("positive" if positive else "negative"), rank1_after, reports


def _resolve_workers(workers: int | None, num_clients: int) -> int:
    if workers is None:
        workers = int(os.environ.get("FEDSTYLE_THREADS", "1"))
    return max(1, min(workers, num_clients))


def _run_clients(clients, fn, workers: int):
    if workers <= 1:
        return [fn(c) for c in clients]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, clients))


def _warmup(state: ExperimentState, workers: int) -> None:
    """Plain classification warm-up rounds so memory initialization starts
    from a minimally trained encoder instead of random features."""
    cfg = state.config
    warm = replace(cfg, ablation=replace(cfg.ablation, new_style=False,
                                         memory=False, screening=False))
    for _ in range(cfg.memory.warmup_rounds):
        distribute(state.server, state.clients)
        _run_clients(state.clients,
                     lambda c: client_round(c, warm, epoch=0), workers)
        aggregate(state.server, state.clients)


def run_experiment(cfg: ExperimentConfig, workers: int | None = None,
                   on_round=None) -> ExperimentResult:
    """Full protocol: initialize, then E rounds of distribute, local

    two-branch training, weighted aggregation, evaluation and the gated
    memory update. Deterministic in (config, seed); ``on_round`` receives
    each RoundRecord as soon as the round closes so callers can stream
    partial ledgers.
    """
    state = setup_experiment(cfg)
    server, clients = state.server, state.clients
    workers = _resolve_workers(workers, len(clients))
    ledger: list = []
    metrics_rows: list = []
    if cfg.rounds == 0:
        return ExperimentResult(cfg, server, clients, ledger, metrics_rows, {})

    if cfg.memory.warmup_rounds > 0:
        _warmup(state, workers)
    if cfg.ablation.memory:
        for client in clients:
            client.client_local = server.encoder.copy()
            client.memory = initialize_memory(
                client.train, server.encoder, cfg.memory.momentum,
                cfg.memory.policy, cfg.memory.normalize_before_mean)

    source_splits = {c.client_id: c.val_split for c in clients}
    for rnd in range(1, cfg.rounds + 1):
        started = time.perf_counter()
        server.round = rnd
        rank1_before = server.last_rank1
        forced = rnd in cfg.transform.forced_degrade_rounds
        distribute(server, clients)
        results = _run_clients(
            clients, lambda c: client_round(c, cfg, epoch=rnd, forced_degrade=forced),
            workers)
        aggregate(server, clients)
        caches = [cache for cache, _ in results]
        decision, rank1_after, screen_reports = screen_and_update(
            server, clients, caches, cfg)

        for dom, report in sorted(screen_reports.items()):
            metrics_rows.append({"round": rnd, "plan": "screening", "domain": dom,
                                 "map": report.map, "rank1": report.rank1})
        plan_reports = evaluate_plan(server.encoder, cfg.eval.plan, source_splits,
                                     state.target_split, cfg.eval.max_rank)
        for dom, report in sorted(plan_reports.items()):
            metrics_rows.append({"round": rnd, "plan": cfg.eval.plan, "domain": dom,
                                 "map": report.map, "rank1": report.rank1})

        record = RoundRecord(
            round=rnd,
            rank1_before=rank1_before,
            rank1_after=rank1_after,
            decision=decision,
            new_style_loss=[r.new_style_loss for _, r in results],
            memory_loss=[r.memory_loss for _, r in results],
            lr=clients[0].opt_global.current_lr,
            wall_time=time.perf_counter() - started,
            memory_digest=memory_digest([c.memory for c in clients]),
        )
        ledger.append(record)
        if on_round is not None:
            on_round(record)

    final_reports = evaluate_plan(server.encoder, cfg.eval.plan, source_splits,
                                  state.target_split, cfg.eval.max_rank)
    return ExperimentResult(cfg, server, clients, ledger, metrics_rows,
                            final_reports)
