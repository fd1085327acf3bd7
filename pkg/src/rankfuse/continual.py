"""Sequential training over a domain stream.

Each step initializes the new model from the old snapshot, freezes the old
one, and trains on mixed batches of new-domain samples and replay-buffer
exemplars with the combined loss. The first step is plain metric learning:
no buffer, no distillation, and the relaxation schedule is never consulted.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import (
    DomainSpec,
    PairPolicy,
    PairRelation,
    generate_domain,
    pairwise_pose_distances,
    with_domain_id,
)
from .encoder import (
    AdamState,
    EncoderParams,
    ModelSnapshot,
    adam_step,
    backward,
    encode,
    encode_with_cache,
    init_params,
    make_snapshot,
    params_digest,
    save_snapshot,
)
from .errors import ConfigurationError, TrainingError, UsageError
from .losses import (
    EmbeddingBatch,
    LossToggles,
    RelaxationSchedule,
    combined_loss,
    relaxation_weight,
)

log = logging.getLogger(__name__)

_STEP_TAG = 0xC0
_BUFFER_TAG = 0xBF
_INIT_TAG = 0x1A

RUN_LOG_NAME = "run_log.jsonl"


@dataclass
class MemoryBuffer:
    """Fixed-capacity exemplar store, re-split equally per seen domain."""

    capacity: int = 256
    entries: list = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigurationError(f"buffer capacity must be >= 1, got {self.capacity}")
        if len(self.entries) > self.capacity:
            raise ConfigurationError(
                f"buffer holds {len(self.entries)} entries over capacity {self.capacity}"
            )

    def domain_ids(self) -> list:
        return sorted({s.domain_id for s in self.entries})


@dataclass(frozen=True)
class StepPlan:
    """Everything one training step needs besides the data itself."""

    step_index: int
    epochs: int = 60
    lr: float = 1e-4
    lr_drop_epoch: int = 30
    lr_drop_factor: float = 0.1
    weight_decay: float = 1e-3
    batch_start: int = 16
    batch_cap: int = 256
    expansion_rate: float = 1.4
    active_threshold: float = 0.7
    margin: float = 0.2
    rank_temp: float = 0.1
    dist_temp: float = 1.0
    divergence: str = "skl"
    rkd_norm: str = "cubic"
    lambda_variant: str = "literal"
    toggles: LossToggles = field(default_factory=LossToggles)
    buffer_fraction: float = 0.25

    def __post_init__(self):
        if self.step_index < 0:
            raise ConfigurationError(f"step_index must be >= 0, got {self.step_index}")
        if self.epochs < 1:
            raise ConfigurationError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_start > self.batch_cap:
            raise ConfigurationError(
                f"batch start {self.batch_start} exceeds cap {self.batch_cap}"
            )
        if self.expansion_rate <= 1:
            raise ConfigurationError(f"expansion rate must be > 1, got {self.expansion_rate}")
        if not 0.0 < self.buffer_fraction < 1.0:
            raise ConfigurationError(
                f"buffer_fraction must be in (0, 1), got {self.buffer_fraction}"
            )


def lr_at(plan: StepPlan, epoch: int) -> float:
    """Learning rate for a 0-based epoch; drops once at lr_drop_epoch."""
    if epoch < plan.lr_drop_epoch:
        return plan.lr
    return plan.lr * plan.lr_drop_factor


def maybe_expand_batch(size: int, active_fraction: float, plan: StepPlan) -> int:
    """Grow the batch when too few triplets are still active."""
    if active_fraction < plan.active_threshold:
        return min(math.ceil(size * plan.expansion_rate), plan.batch_cap)
    return size


def batch_relation(samples: list, policy: PairPolicy) -> PairRelation:
    """Train-mode pair labels for a possibly mixed-domain batch.

    Same-domain pairs follow the pose thresholds; cross-domain pairs are
    negatives (different environments are never the same place).
    """
    dist = pairwise_pose_distances(samples)
    dom = np.array([s.domain_id for s in samples])
    same = dom[:, None] == dom[None, :]
    positive = same & (dist < policy.pos_train)
    negative = (~same) | (same & (dist > policy.neg_train))
    np.fill_diagonal(positive, False)
    np.fill_diagonal(negative, False)
    return PairRelation(
        positive=positive,
        negative=negative,
        sample_ids=tuple(s.sample_id for s in samples),
        mode="train",
    )


@dataclass
class EpochRecord:
    step: int
    epoch: int
    lr: float
    lam: float
    batch_size: int
    loss_pr: float
    loss_rkd: float
    loss_dkd: float
    active_fraction: float

    def as_json(self) -> str:
        return json.dumps(
            {
                "step": self.step,
                "epoch": self.epoch,
                "lr": self.lr,
                "lambda": self.lam,
                "batch_size": self.batch_size,
                "loss_pr": self.loss_pr,
                "loss_rkd": self.loss_rkd,
                "loss_dkd": self.loss_dkd,
                "active_fraction": self.active_fraction,
            },
            sort_keys=True,
        )


@dataclass
class StepResult:
    snapshot: ModelSnapshot
    records: list
    lambda_calls: int  # instrumentation: schedule consultations during the step


def _epoch_batches(rng, n_new: int, buffer_entries: list, batch_size: int, fraction: float):
    """Yield lists of (is_buffer, index) covering the new data once per epoch."""
    order = rng.permutation(n_new)
    buf_quota = int(round(batch_size * fraction)) if buffer_entries else 0
    new_quota = max(batch_size - buf_quota, 2)
    for start in range(0, n_new, new_quota):
        chunk = order[start : start + new_quota]
        if len(chunk) < 4 and start > 0:
            break  # fold a tiny tail batch rather than train on it
        picks = []
        if buf_quota:
            replace_draw = len(buffer_entries) < buf_quota
            picks = rng.choice(len(buffer_entries), size=buf_quota, replace=replace_draw)
        yield [("new", int(i)) for i in chunk] + [("buffer", int(i)) for i in picks]


def _scan_stack(samples: list) -> np.ndarray:
    return np.stack([s.scan.points for s in samples])


def _train(
    start_params: EncoderParams,
    old: ModelSnapshot | None,
    new_samples: list,
    buffer_entries: list,
    plan: StepPlan,
    policy: PairPolicy,
    seed: int,
    config_digest: str,
    normalize: bool,
) -> StepResult:
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([seed, _STEP_TAG, plan.step_index]))
    )
    params = start_params.astype(np.float64)
    state = AdamState.zeros_like(params)
    distill = old is not None and (plan.toggles.rkd or plan.toggles.dkd)
    old_params = old.params if old is not None else None
    old_digest = params_digest(old_params) if old_params is not None else None
    schedule = (
        RelaxationSchedule(total_epochs=plan.epochs, variant=plan.lambda_variant)
        if distill
        else None
    )

    records = []
    lambda_calls = 0
    batch_size = plan.batch_start
    for epoch in range(plan.epochs):
        lr = lr_at(plan, epoch)
        if distill:
            lam = relaxation_weight(schedule, epoch)
            lambda_calls += 1
        else:
            lam = 0.0
        sums = {"pr": 0.0, "rkd": 0.0, "dkd": 0.0, "frac": 0.0}
        n_batches = 0
        for batch_spec in _epoch_batches(
            rng, len(new_samples), buffer_entries, batch_size, plan.buffer_fraction
        ):
            batch = [
                new_samples[i] if kind == "new" else buffer_entries[i]
                for kind, i in batch_spec
            ]
            scans = _scan_stack(batch)
            e_new_vec, cache = encode_with_cache(params, scans, normalize)
            e_new = EmbeddingBatch(vectors=e_new_vec, producer="new", normalized=False)
            e_old = (
                encode(old_params, scans, normalize=normalize, producer="old")
                if distill
                else None
            )
            relation = batch_relation(batch, policy)
            out = combined_loss(
                e_old,
                e_new,
                relation,
                margin=plan.margin,
                rank_temp=plan.rank_temp,
                dist_temp=plan.dist_temp,
                lam=lam,
                toggles=plan.toggles,
                divergence=plan.divergence,
                rkd_norm=plan.rkd_norm,
            )
            if not np.isfinite(out.loss.value):
                raise TrainingError(
                    f"non-finite loss at step {plan.step_index} epoch {epoch} "
                    f"batch {n_batches}"
                )
            grads = backward(params, scans, out.loss.grad_new, normalize, cache=cache)
            params, state = adam_step(params, grads, state, lr=lr, weight_decay=plan.weight_decay)
            sums["pr"] += out.pr_value
            sums["rkd"] += out.rkd_value
            sums["dkd"] += out.dkd_value
            sums["frac"] += out.active_fraction
            n_batches += 1
        if n_batches == 0:
            raise TrainingError(f"step {plan.step_index} epoch {epoch}: no batches formed")
        mean_fraction = sums["frac"] / n_batches
        records.append(
            EpochRecord(
                step=plan.step_index,
                epoch=epoch,
                lr=lr,
                lam=lam,
                batch_size=batch_size,
                loss_pr=sums["pr"] / n_batches,
                loss_rkd=sums["rkd"] / n_batches,
                loss_dkd=sums["dkd"] / n_batches,
                active_fraction=mean_fraction,
            )
        )
        if plan.toggles.pr:
            batch_size = maybe_expand_batch(batch_size, mean_fraction, plan)

    if old_params is not None and params_digest(old_params) != old_digest:
        raise TrainingError("frozen old-model parameters changed during training")
    snapshot = make_snapshot(params, plan.step_index, config_digest, normalize)
    return StepResult(snapshot=snapshot, records=records, lambda_calls=lambda_calls)


def train_first_step(
    samples: list,
    plan: StepPlan,
    seed: int,
    policy: PairPolicy,
    hidden: int,
    dim: int,
    normalize: bool = True,
    config_digest: str = "",
) -> StepResult:
    """Initial-environment training: metric learning only."""
    if plan.step_index != 0:
        raise UsageError(f"first step requires step_index 0, got {plan.step_index}")
    init_seed = int(
        np.random.SeedSequence([seed, _INIT_TAG]).generate_state(1, np.uint64)[0]
    )
    params = init_params(init_seed, hidden, dim)
    first_plan = replace(plan, toggles=replace(plan.toggles, rkd=False, dkd=False, pr=True))
    return _train(
        params,
        old=None,
        new_samples=samples,
        buffer_entries=[],
        plan=first_plan,
        policy=policy,
        seed=seed,
        config_digest=config_digest,
        normalize=normalize,
    )


def train_continual_step(
    old: ModelSnapshot,
    samples: list,
    buffer: MemoryBuffer | None,
    plan: StepPlan,
    seed: int,
    policy: PairPolicy,
    config_digest: str = "",
) -> StepResult:
    """One incremental step: new model warm-started from old, old frozen."""
    if plan.step_index < 1:
        raise UsageError(f"continual step requires step_index >= 1, got {plan.step_index}")
    if buffer is not None and not buffer.entries:
        raise ConfigurationError(f"empty replay buffer at step {plan.step_index}")
    if buffer is not None:
        current = {s.domain_id for s in buffer.entries if s.domain_id >= plan.step_index}
        if current:
            raise ConfigurationError(
                f"buffer holds samples from current/future domains {sorted(current)}"
            )
    return _train(
        old.params.astype(np.float64),
        old=old,
        new_samples=samples,
        buffer_entries=list(buffer.entries) if buffer is not None else [],
        plan=plan,
        policy=policy,
        seed=seed,
        config_digest=config_digest,
        normalize=old.normalize,
    )


def update_buffer(
    buffer: MemoryBuffer, completed_samples: list, step_index: int
) -> MemoryBuffer:
    """Re-split capacity equally over all seen domains and refill.

    Floor division with the remainder going to the earliest domains; kept
    entries are a uniform subsample, the completed domain contributes a
    uniform draw. Deterministic in (buffer.seed, step_index).
    """
    if not completed_samples:
        raise UsageError("update_buffer needs the completed domain's samples")
    rng = np.random.Generator(
        np.random.PCG64(np.random.SeedSequence([buffer.seed, _BUFFER_TAG, step_index]))
    )
    new_domain = completed_samples[0].domain_id
    by_domain = {}
    for s in buffer.entries:
        by_domain.setdefault(s.domain_id, []).append(s)
    if new_domain in by_domain:
        raise UsageError(f"domain {new_domain} already present in buffer")
    domains = sorted(by_domain) + [new_domain]

    n = len(domains)
    base, extra = divmod(buffer.capacity, n)
    quotas = {d: base + (1 if i < extra else 0) for i, d in enumerate(domains)}

    kept = []
    for d in domains:
        pool = by_domain.get(d) if d != new_domain else list(completed_samples)
        quota = quotas[d]
        if len(pool) <= quota:
            if len(pool) < quota:
                log.warning(
                    "buffer shortfall: domain %d has %d samples for quota %d",
                    d,
                    len(pool),
                    quota,
                )
            kept.extend(pool)
            continue
        picks = rng.choice(len(pool), size=quota, replace=False)
        kept.extend(pool[i] for i in sorted(picks))
    return MemoryBuffer(capacity=buffer.capacity, entries=kept, seed=buffer.seed)


def write_run_log(records: list, path) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.as_json() + "\n")


# ---------------------------------------------------------------------------
# Whole-protocol driver


@dataclass
class ProtocolRun:
    """A completed sequential run: snapshots plus the splits to evaluate them."""

    domain_names: tuple
    plans: list
    snapshots: list
    db_splits: list
    query_splits: list
    policy: PairPolicy
    normalize: bool
    records: list = field(default_factory=list)
    lambda_calls_per_step: list = field(default_factory=list)
    step_seconds: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.snapshots) > len(self.domain_names):
            raise UsageError("more snapshots than domains")


def _plan_from_config(cfg, step_index: int) -> StepPlan:
    return StepPlan(
        step_index=step_index,
        epochs=cfg.plan.epochs,
        lr=cfg.plan.lr,
        lr_drop_epoch=cfg.plan.lr_drop_epoch,
        lr_drop_factor=cfg.plan.lr_drop_factor,
        weight_decay=cfg.plan.weight_decay,
        batch_start=cfg.plan.batch_start,
        batch_cap=cfg.plan.batch_cap,
        expansion_rate=cfg.plan.expansion_rate,
        active_threshold=cfg.plan.active_threshold,
        margin=cfg.loss.margin,
        rank_temp=cfg.loss.rank_temp,
        dist_temp=cfg.loss.dist_temp,
        divergence=cfg.loss.divergence,
        rkd_norm=cfg.loss.rkd_norm,
        lambda_variant=cfg.loss.lambda_variant,
        toggles=LossToggles(pr=cfg.loss.pr, rkd=cfg.loss.rkd, dkd=cfg.loss.dkd),
        buffer_fraction=cfg.buffer.fraction,
    )


def build_protocol_data(cfg, seed: int):
    """Generate train/database/query splits for every configured domain.

    Train scans come from session 0; database and query splits revisit the
    same world on sessions 1 and 2 so retrieval never sees its own scans.
    """
    if not cfg.domains:
        raise ConfigurationError("domains: protocol needs at least one domain")
    train, db, query = [], [], []
    for i, dom in enumerate(cfg.domains):
        style = dom.style_params()
        common = dict(seed=dom.seed, trajectory_length=dom.trajectory_length, style=style)
        splits = []
        for session, n in ((0, dom.train_places), (1, dom.test_places), (2, dom.test_places)):
            spec = DomainSpec(n_places=n, session=session, **common)
            samples = generate_domain(spec, points_per_scan=cfg.encoder.points_per_scan)
            splits.append(with_domain_id(samples, i))
        train.append(splits[0])
        db.append(splits[1])
        query.append(splits[2])
    return train, db, query


def run_protocol(cfg, seed: int, out_dir=None, digest: str = "") -> ProtocolRun:
    """Train sequentially over the configured domains and save artifacts."""
    train, db, query = build_protocol_data(cfg, seed)
    names = tuple(d.name for d in cfg.domains)
    plans = [_plan_from_config(cfg, t) for t in range(len(cfg.domains))]
    policy = cfg.pairs

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / RUN_LOG_NAME
        log_path.unlink(missing_ok=True)

    buffer = MemoryBuffer(capacity=cfg.buffer.capacity, seed=seed) if cfg.buffer.enabled else None
    snapshots = []
    all_records = []
    lambda_calls = []
    step_seconds = []
    for t, samples in enumerate(train):
        t0 = time.perf_counter()
        if t == 0:
            result = train_first_step(
                samples,
                plans[0],
                seed,
                policy,
                hidden=cfg.encoder.hidden,
                dim=cfg.encoder.dim,
                normalize=cfg.encoder.normalize,
                config_digest=digest,
            )
        else:
            result = train_continual_step(
                snapshots[-1], samples, buffer, plans[t], seed, policy, config_digest=digest
            )
        snapshots.append(result.snapshot)
        all_records.extend(result.records)
        lambda_calls.append(result.lambda_calls)
        step_seconds.append(time.perf_counter() - t0)
        if buffer is not None:
            buffer = update_buffer(buffer, samples, step_index=t)
        if out is not None:
            save_snapshot(result.snapshot, out / f"step_{t}.snap")
            write_run_log(result.records, out / RUN_LOG_NAME)
    return ProtocolRun(
        domain_names=names,
        plans=plans,
        snapshots=snapshots,
        db_splits=db,
        query_splits=query,
        policy=policy,
        normalize=cfg.encoder.normalize,
        records=all_records,
        lambda_calls_per_step=lambda_calls,
        step_seconds=step_seconds,
    )
