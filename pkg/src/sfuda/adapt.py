"""Source training, pseudo-label initialisation and the target adaptation loop."""
from __future__ import annotations

import logging
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import losses
from .config import AdaptationConfig, RunConfig, SourceConfig
from .data import DataConfig, Domain, augment_strong, augment_weak, generate_domain_pair
from .memory import FeatureBank, LabelHistoryStore, TemporalQueue, exclusion_masks
from .model import ModelParams, backward, ema_update, forward_batch, init_model
from .numerics import l2_normalize, l2_normalize_backward, sgd_step
from .refine import refine_label, soft_vote, uncertainty_weight

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "target_acc", "pl_acc", "mean_weight", "kept_negative_fraction",
                  "loss_cls", "loss_ctr", "loss_div")


def stream(seed: int, name: str) -> np.random.Generator:
    """Independent generator per purpose, derived from the run seed and a name."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


@dataclass
class EpochMetrics:
    epoch: int
    target_acc: float
    pl_acc: float
    mean_weight: float
    kept_negative_fraction: float
    loss_cls: float
    loss_ctr: float
    loss_div: float

    def row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


def evaluate(params: ModelParams, dataset: Domain) -> float:
    """Top-1 accuracy against the dataset's true labels."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    _, logits, _ = forward_batch(params, dataset.x)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def accuracy(pred, labels) -> float:
    pred = np.asarray(pred)
    if len(pred) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return float(np.mean(pred == np.asarray(labels)))


def smoothed_cross_entropy(logits: np.ndarray, labels: np.ndarray, eps: float) -> losses.LossValue:
    """Mean cross-entropy against ``1-eps`` on the label and ``eps/(C-1)`` elsewhere."""
    b, c = logits.shape
    target = np.full((b, c), eps / (c - 1))
    target[np.arange(b), labels] = 1.0 - eps
    m = logits.max(axis=1, keepdims=True)
    logp = logits - m - np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    return losses.LossValue(float(-(target * logp).sum() / b), {"logits": (p - target) / b})


def _sgd_update(params: ModelParams, grads: ModelParams, buf: np.ndarray, lr: float, momentum: float):
    flat, buf = sgd_step(params.flatten(), grads.flatten(), lr, buf, momentum)
    return params.with_flat(flat), buf


def train_source(config: RunConfig, source: Domain, rng: np.random.Generator | None = None) -> ModelParams:
    """Label-smoothed cross-entropy training on the labelled source set."""
    sc: SourceConfig = config.source
    sc.validate()
    if source.labels is None or len(source.labels) != len(source):
        raise ValueError("source data must be labelled")
    init_rng = stream(config.seed, "init") if rng is None else rng
    shuffle_rng = stream(config.seed, "source_shuffle")
    params = init_model(config.model, init_rng, seed=config.seed)
    buf = np.zeros_like(params.flatten())
    n = len(source)
    for _ in range(sc.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, sc.batch_size):
            idx = order[start:start + sc.batch_size]
            _, logits, _, cache = forward_batch(params, source.x[idx], keep_cache=True)
            lv = smoothed_cross_entropy(logits, source.labels[idx], sc.label_smoothing)
            grads = backward(params, cache, grad_logits=lv.grads["logits"])
            params, buf = _sgd_update(params, grads, buf, sc.learning_rate, sc.momentum)
    return params


@dataclass
class AdaptationState:
    config: RunConfig
    target: Domain
    online: ModelParams
    momentum: ModelParams
    opt_buffer: np.ndarray
    bank: FeatureBank
    queue: TemporalQueue
    history: LabelHistoryStore
    pseudo_labels: np.ndarray  # latest refined label per target row
    initial_pl_acc: float
    rngs: dict[str, np.random.Generator]
    epoch: int = 0
    step: int = 0
    queue_log: list[tuple[int, int, float]] = field(default_factory=list)

    @property
    def n_target(self) -> int:
        return len(self.target)


def init_pseudo_labels(config: RunConfig, source_model: ModelParams, target: Domain) -> AdaptationState:
    """Pseudo-label the clean target set with the source model and seed the stores."""
    ac: AdaptationConfig = config.adapt
    ac.validate()
    c = config.model.n_classes
    p_dim = config.model.bottleneck
    _, logits, _ = forward_batch(source_model, target.x)
    labels = np.argmax(logits, axis=1)

    history = LabelHistoryStore(target.ids, ac.history_length, c)
    history.append_many(target.ids, labels)

    capacity = ac.bank_capacity or len(target)
    bank = FeatureBank(capacity, p_dim, c)
    momentum = source_model.copy()
    bank_rng = stream(config.seed, "bank_weak")
    xw = augment_weak(config.data, target.x, bank_rng)
    z, _, probs = forward_batch(momentum, xw)
    bank.update_many(target.ids, z, probs)

    rngs = {name: stream(config.seed, name)
            for name in ("shuffle", "weak", "strong_q", "strong_k", "complementary")}
    return AdaptationState(
        config=config,
        target=target,
        online=source_model.copy(),
        momentum=momentum,
        opt_buffer=np.zeros_like(source_model.flatten()),
        bank=bank,
        queue=TemporalQueue(ac.queue_capacity, ac.history_length, p_dim),
        history=history,
        pseudo_labels=labels.copy(),
        initial_pl_acc=accuracy(labels, target.labels),
        rngs=rngs,
    )


StepHook = Callable[[AdaptationState, dict], None]


def adapt_step(state: AdaptationState, rows: np.ndarray) -> dict:
    """One optimisation step on the target rows `rows`; returns step diagnostics."""
    cfg = state.config
    ac = cfg.adapt
    dc: DataConfig = cfg.data
    c = cfg.model.n_classes
    x = state.target.x[rows]
    ids = state.target.ids[rows]
    b = len(rows)

    # 1-2: refine pseudo-labels from the bank using weak-view online features
    xw = augment_weak(dc, x, state.rngs["weak"])
    zw, _, _ = forward_batch(state.online, xw)
    _, nb_probs = state.bank.knn_query_batch(zw, ac.k_neighbors, exclude_ids=ids)
    p_hat = soft_vote(nb_probs)
    if ac.refinement:
        y_hat = refine_label(p_hat)
    else:
        y_hat = state.history.latest(ids)
    if ac.uncertainty_reweighting:
        weights = uncertainty_weight(p_hat, ac.weighting, ac.hard_threshold)
    else:
        weights = np.ones(b)
    state.pseudo_labels[rows] = y_hat

    # 3: strong views -> query (online) and key (momentum)
    xq = augment_strong(dc, x, state.rngs["strong_q"])
    zq, logits_q, probs_q, cache = forward_batch(state.online, xq, keep_cache=True)

    mode = ac.classification_mode if ac.negative_learning else "positive"
    cls = losses.classification_loss(logits_q, y_hat, weights, mode, rng=state.rngs["complementary"])
    div = losses.diversity_loss(logits_q)

    kept_fraction = 1.0
    keys = None
    query_hist = None
    if ac.contrastive:
        xk = augment_strong(dc, x, state.rngs["strong_k"])
        zk, _, _ = forward_batch(state.momentum, xk)
        keys = l2_normalize(zk)
        q = l2_normalize(zq)
        # 4: temporal exclusion of likely same-class negatives
        query_hist = state.history.matrix(ids)
        if ac.temporal_exclusion and len(state.queue):
            masks = exclusion_masks(query_hist, state.queue.snapshots, ac.exclusion_rule)
        else:
            masks = np.ones((b, len(state.queue)), dtype=bool)
        if masks.size:
            kept_fraction = float(masks.mean())
        ctr = losses.contrastive_loss_batch(q, keys, state.queue.keys, masks, ac.temperature)
        ctr_grad_z = l2_normalize_backward(zq, ctr.grads["query"])
        ctr = losses.LossValue(ctr.value, {"z": ctr_grad_z})
    else:
        ctr = losses.LossValue(0.0, {})

    # 5: one SGD step on the online model
    total = losses.total_loss(cls, ctr, div, ac.gamma_cls, ac.gamma_ctr, ac.gamma_div)
    grads = backward(state.online, cache, grad_logits=total.grads.get("logits"), grad_z=total.grads.get("z"))
    state.online, state.opt_buffer = _sgd_update(state.online, grads, state.opt_buffer,
                                                 ac.learning_rate, ac.sgd_momentum)

    # 6-8: momentum model, bank refresh, queue push
    state.momentum = ema_update(state.momentum, state.online, ac.ema_momentum)
    zb, _, pb = forward_batch(state.momentum, xw)
    state.bank.update_many(ids, zb, pb)
    if keys is not None:
        state.queue.push(keys, query_hist)
    state.step += 1

    return {
        "rows": rows,
        "weights": weights,
        "p_hat": p_hat,
        "probs_q": probs_q,
        "bank_probs": pb,
        "kept_fraction": kept_fraction,
        "loss_cls": cls.value,
        "loss_ctr": ctr.value,
        "loss_div": div.value,
        "loss_total": total.value,
    }


def adapt_epoch(state: AdaptationState, on_step: StepHook | None = None) -> EpochMetrics:
    """Run one pass over the shuffled target set and update label histories."""
    ac = state.config.adapt
    n = state.n_target
    if len(state.bank) - 1 < ac.k_neighbors:
        raise ValueError("bank underfilled")
    state.bank.new_epoch()
    order = state.rngs["shuffle"].permutation(n)
    weights, kept, l_cls, l_ctr, l_div = [], [], [], [], []
    for start in range(0, n, ac.batch_size):
        rows = order[start:start + ac.batch_size]
        info = adapt_step(state, rows)
        weights.append(info["weights"])
        kept.append(info["kept_fraction"])
        l_cls.append(info["loss_cls"])
        l_ctr.append(info["loss_ctr"])
        l_div.append(info["loss_div"])
        if on_step is not None:
            on_step(state, info)

    state.history.append_many(state.target.ids, state.pseudo_labels)
    state.epoch += 1
    kept_fraction = float(np.mean(kept))
    state.queue_log.append((state.epoch, len(state.queue), kept_fraction))
    metrics = EpochMetrics(
        epoch=state.epoch,
        target_acc=evaluate(state.online, state.target),
        pl_acc=accuracy(state.pseudo_labels, state.target.labels),
        mean_weight=float(np.mean(np.concatenate(weights))),
        kept_negative_fraction=kept_fraction,
        loss_cls=float(np.mean(l_cls)),
        loss_ctr=float(np.mean(l_ctr)),
        loss_div=float(np.mean(l_div)),
    )
    log.debug("epoch %d: %s", state.epoch, asdict(metrics))
    return metrics


@dataclass
class RunResult:
    config: RunConfig
    metrics: list[EpochMetrics]
    source_model: ModelParams
    online: ModelParams
    momentum: ModelParams
    source_acc: float
    source_only_target_acc: float
    initial_pl_acc: float
    state: AdaptationState | None = None

    @property
    def final_target_acc(self) -> float:
        return self.metrics[-1].target_acc if self.metrics else self.source_only_target_acc

    @property
    def final_pl_acc(self) -> float:
        return self.metrics[-1].pl_acc if self.metrics else self.initial_pl_acc


def run_adaptation(
    config: RunConfig,
    on_step: StepHook | None = None,
    source_model: ModelParams | None = None,
    keep_state: bool = False,
) -> RunResult:
    """Generate data, train (or reuse) the source model, then adapt for all epochs."""
    config.validate()
    pair = generate_domain_pair(config.data, stream(config.seed, "data"))
    if source_model is None:
        source_model = train_source(config, pair.source)
    source_acc = evaluate(source_model, pair.source)
    source_only = evaluate(source_model, pair.target)
    state = init_pseudo_labels(config, source_model, pair.target)
    log.info("seed %d: source acc %.4f, source-only target acc %.4f, initial pseudo-label acc %.4f",
             config.seed, source_acc, source_only, state.initial_pl_acc)
    metrics = []
    for _ in range(config.adapt.epochs):
        metrics.append(adapt_epoch(state, on_step))
    if metrics:
        log.info("seed %d: final target acc %.4f, pseudo-label acc %.4f",
                 config.seed, metrics[-1].target_acc, metrics[-1].pl_acc)
    return RunResult(
        config=config,
        metrics=metrics,
        source_model=source_model,
        online=state.online,
        momentum=state.momentum,
        source_acc=source_acc,
        source_only_target_acc=source_only,
        initial_pl_acc=state.initial_pl_acc,
        state=state if keep_state else None,
    )


def ablation_cells(base: RunConfig) -> dict[str, RunConfig]:
    """Cumulative component rows, weighting/loss variants and a history-length sweep."""
    off = dict(contrastive=False, negative_learning=False, temporal_exclusion=False,
               uncertainty_reweighting=False)
    cells = {
        "refine_only": dict(off, refinement=True),
        "plus_contrastive": dict(off, refinement=True, contrastive=True),
        "plus_negative": dict(off, refinement=True, contrastive=True, negative_learning=True),
        "plus_temporal": dict(refinement=True, contrastive=True, negative_learning=True,
                              temporal_exclusion=True, uncertainty_reweighting=False),
        "full": dict(refinement=True, contrastive=True, negative_learning=True,
                     temporal_exclusion=True, uncertainty_reweighting=True),
    }
    full = cells["full"]
    cells.update({
        "hard_weighting": dict(full, weighting="hard"),
        "linear_weighting": dict(full, weighting="linear"),
        "positive_loss": dict(full, classification_mode="positive"),
        "positive_plus_negative_loss": dict(full, classification_mode="positive_plus_negative"),
    })
    for t in (1, 2, 5, 8):
        cells[f"history_T{t}"] = dict(full, history_length=t)
    return {name: base.replace(adapt=overrides) for name, overrides in cells.items()}


@dataclass
class AblationRow:
    cell: str
    seed: int
    source_only_target_acc: float
    initial_pl_acc: float
    final_target_acc: float
    final_pl_acc: float


def ablate(
    base: RunConfig,
    seeds: list[int],
    cells: list[str] | None = None,
    on_result: Callable[[str, RunResult], None] | None = None,
) -> tuple[list[AblationRow], dict[str, float]]:
    """Run every ablation cell for every seed.

    Returns per-(cell, seed) rows and the median final target accuracy per cell.
    Source models are trained once per seed and shared across cells.
    """
    grid = ablation_cells(base)
    if cells is not None:
        unknown = set(cells) - set(grid)
        if unknown:
            raise ValueError(f"unknown ablation cells: {sorted(unknown)}")
        grid = {k: v for k, v in grid.items() if k in cells}
    sources: dict[int, ModelParams] = {}
    rows: list[AblationRow] = []
    for name, cell_config in grid.items():
        for seed in seeds:
            cfg = cell_config.replace(seed=seed)
            if seed not in sources:
                pair = generate_domain_pair(cfg.data, stream(seed, "data"))
                sources[seed] = train_source(cfg, pair.source)
            result = run_adaptation(cfg, source_model=sources[seed])
            rows.append(AblationRow(name, seed, result.source_only_target_acc, result.initial_pl_acc,
                                    result.final_target_acc, result.final_pl_acc))
            if on_result is not None:
                on_result(name, result)
    medians = {
        name: float(np.median([r.final_target_acc for r in rows if r.cell == name]))
        for name in grid
    }
    return rows, medians
