"""Multinomial losses, the alternating multitask epoch and model selection."""

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import mask_rows, normalized_rows, submatrix_rows
from .errors import ConfigError, ContractError, TrainingAborted
from .model import ModelConfig, config_hash, init_params, save_checkpoint
from .numerics import AdamState, RngStream, adam_step, log_softmax

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "loss_mat", "loss_gen", "val_ndcg5", "seconds")


@dataclass
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.00001
    dropout: float = 0.3
    rho: float = 0.5
    psi: float = 0.5
    max_epochs: int = 200
    batch_size_users: int = 256
    batch_size_pairs: int = 1024
    seed: int = 0
    variant: str = "full"
    d: int = 200
    activation: str = "relu"
    stop_grad_zu: bool = False
    fixed_masks: bool = False

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_")
        for name in ("rho", "psi"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.batch_size_users < 1 or self.batch_size_pairs < 1:
            raise ConfigError("batch sizes must be >= 1")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")
        self.model_config()

    def model_config(self):
        return ModelConfig(d=self.d, dropout=self.dropout, variant=self.variant, activation=self.activation)

    def as_dict(self):
        return asdict(self)

    def hash(self):
        return config_hash(self.as_dict())


class TrainingData:
    """Sparse operators and index tables derived once from a split."""

    def __init__(self, dataset, split):
        self.dataset = dataset
        self.split = split
        self.train_R = split.train_R
        self.X = dataset.X
        self.n_bundles = dataset.n_bundles
        self.n_items = dataset.n_items
        self.V_norm = dataset.V.row_normalized()
        self.X_norm = dataset.X.row_normalized()
        self.universe = split.training_bundles
        self.universe_pos = np.full(self.n_bundles, -1, dtype=np.int64)
        self.universe_pos[self.universe] = np.arange(len(self.universe))
        self.train_counts = self.train_R.row_lengths()
        self.phase_a_users = np.flatnonzero(self.train_counts > 0)
        self.train_pairs = self.train_R.pairs()
        self._train_keys = self.train_pairs[:, 0] * self.n_bundles + self.train_pairs[:, 1]
        if len(self.train_R.indices) and self.universe_pos[self.train_R.indices].min() < 0:
            raise ContractError("training interactions reference held-out bundles")

    def user_inputs(self, users):
        """``(P_op, Q_op, no_bundles)`` for users with their full training bundles."""
        P_op = self.V_norm[users]
        ptr, idx = submatrix_rows(self.train_R.indptr, self.train_R.indices, users)
        return P_op, normalized_rows(ptr, idx, self.n_bundles), np.diff(ptr) == 0

    def is_training_pair(self, users, bundles):
        keys = np.asarray(users) * self.n_bundles + np.asarray(bundles)
        pos = np.searchsorted(self._train_keys, keys)
        pos = np.minimum(pos, len(self._train_keys) - 1)
        return self._train_keys[pos] == keys


def _targets_matching(data, users):
    ptr, idx = submatrix_rows(data.train_R.indptr, data.train_R.indices, users)
    if np.any(np.diff(ptr) == 0):
        bad = users[np.flatnonzero(np.diff(ptr) == 0)[0]]
        raise ContractError(f"user {bad} has no training bundle interactions")
    return normalized_rows(ptr, data.universe_pos[idx], len(data.universe))


def matching_loss(model, data, users, retained=None, rng=None, training=False, backward=True):
    """Multinomial matching loss averaged over ``users``.

    ``retained`` is the masked bundle input as CSR ``(indptr, indices)``
    aligned with ``users``; the target is always the full training row.
    Gradients are accumulated into the parameters' ``grad`` buffers.
    """
    users = np.asarray(users, dtype=np.int64)
    T = _targets_matching(data, users)
    if retained is None:
        retained = submatrix_rows(data.train_R.indptr, data.train_R.indices, users)
    Q_op = normalized_rows(retained[0], retained[1], data.n_bundles)
    P_op = data.V_norm[users]
    Bt = model.bundle_table(data.X_norm)
    Bu = Bt[data.universe]
    Z, cache = model.matching_forward(P_op, Q_op, None, Bt, rng=rng, training=training)
    logp = log_softmax(Z @ Bu.T)
    n = len(users)
    loss = -float(T.multiply(logp).sum()) / n
    if backward:
        g_logits = np.exp(logp)
        g_logits -= T.toarray()
        g_logits /= n
        gZ = g_logits @ Bu
        gBt = np.zeros_like(Bt)
        gBt[data.universe] = g_logits.T @ Z
        gE1T, gB = model.matching_backward(gZ, cache)
        gBt += gB
        gE1T += np.asarray(data.X_norm.T @ gBt)
        model.emb.add_matching_grad(gE1T.T)
    return loss


def generation_loss(model, data, pairs, retained_items=None, rng=None, training=False,
                    stop_grad_zu=False, backward=True):
    """Multinomial generation loss over (user, bundle) training pairs.

    Each pair is weighted by ``1 / |training bundles of u|`` and the total is
    divided by the number of distinct users in the batch. ``retained_items``
    holds the masked item input as CSR aligned with ``pairs``.
    """
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    users, bundles = pairs[:, 0], pairs[:, 1]
    ok = data.is_training_pair(users, bundles)
    if not ok.all():
        u, b = pairs[np.flatnonzero(~ok)[0]]
        raise ContractError(f"bundle {b} is not a training interaction of user {u}")
    if retained_items is None:
        retained_items = submatrix_rows(data.X.indptr, data.X.indices, bundles)
    weights = 1.0 / (data.train_counts[users] * len(np.unique(users)))

    Bt = model.bundle_table(data.X_norm)
    P_op, Q_op, no_bundles = data.user_inputs(users)
    Zu, mcache = model.matching_forward(P_op, Q_op, no_bundles, Bt, rng=rng, training=training)
    Xb_op = normalized_rows(retained_items[0], retained_items[1], data.n_items)
    logits, gcache = model.generation_forward(Zu, Xb_op, rng=rng, training=training)
    logp = log_softmax(logits)
    T = data.X_norm[bundles]
    loss = -float(T.multiply(logp).sum(axis=1).A1 @ weights)
    if backward:
        g_logits = np.exp(logp)
        g_logits -= T.toarray()
        g_logits *= weights[:, None]
        gZu = model.generation_backward(g_logits, gcache)
        if not stop_grad_zu:
            gE1T, gB = model.matching_backward(gZu, mcache)
            gE1T += np.asarray(data.X_norm.T @ gB)
            model.emb.add_matching_grad(gE1T.T)
    return loss


@dataclass
class EpochLosses:
    epoch: int
    loss_mat: float = float("nan")
    loss_gen: float = float("nan")


@dataclass
class TrainState:
    model: object
    adam: dict
    epoch: int = 0
    best_val_ndcg5: float = float("-inf")
    best_epoch: int = 0
    best_snapshot: dict = None
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, config, n_items, n_bundles):
        model = init_params(config.model_config(), n_items, n_bundles, RngStream(config.seed, "init"))
        hyper = dict(lr=config.lr, weight_decay=config.weight_decay)
        adam = {p.name: AdamState.for_param(p, **hyper) for p in model.tensors()}
        return cls(model=model, adam=adam)

    def snapshot(self):
        return {
            "params": self.model.state_arrays(),
            "adam": {k: (s.m.copy(), s.v.copy(), s.t) for k, s in self.adam.items()},
        }

    def restore(self, snap):
        self.model.load_state_arrays(snap["params"])
        for k, (m, v, t) in snap["adam"].items():
            s = self.adam[k]
            s.m[...] = m
            s.v[...] = v
            s.t = t


def _unique(tensors):
    seen, out = set(), []
    for p in tensors:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def _step(state, tensors):
    for p in tensors:
        adam_step(p, state.adam[p.name])


def run_epoch(state, data, config):
    """Phase A (matching) then phase B (generation), each with fresh masks."""
    model = state.model
    epoch = state.epoch + 1
    root = RngStream(config.seed, f"train/epoch{epoch}")
    mask_root = RngStream(config.seed, "train/fixed_masks") if config.fixed_masks else root
    out = EpochLosses(epoch)
    variant = config.variant

    if variant != "no_mat_loss":
        # Masks are drawn in canonical user order, then permuted, so a fixed
        # mask stream gives every user the same mask in every epoch.
        canon = data.phase_a_users
        ptr, idx = submatrix_rows(data.train_R.indptr, data.train_R.indices, canon)
        ptr, idx = mask_rows(ptr, idx, config.rho, mask_root.child("A/mask"))
        perm = root.child("A/shuffle").generator.permutation(len(canon))
        users = canon[perm]
        ptr, idx = submatrix_rows(ptr, idx, perm)
        drop = root.child("A/dropout")
        tensors = model.matching_tensors()
        total = 0.0
        for k, start in enumerate(range(0, len(users), config.batch_size_users)):
            stop = min(start + config.batch_size_users, len(users))
            retained = (ptr[start:stop + 1] - ptr[start], idx[ptr[start]:ptr[stop]])
            model.zero_grad()
            loss = matching_loss(model, data, users[start:stop], retained, rng=drop, training=True)
            if not np.isfinite(loss):
                raise TrainingAborted(epoch, "matching", k)
            _step(state, tensors)
            total += loss * (stop - start)
        out.loss_mat = total / max(len(users), 1)

    if variant != "no_gen_loss":
        canon = data.train_pairs
        ptr, idx = submatrix_rows(data.X.indptr, data.X.indices, canon[:, 1])
        ptr, idx = mask_rows(ptr, idx, config.psi, mask_root.child("B/mask"))
        perm = root.child("B/shuffle").generator.permutation(len(canon))
        pairs = canon[perm]
        ptr, idx = submatrix_rows(ptr, idx, perm)
        drop = root.child("B/dropout")
        tensors = model.generation_tensors()
        if not config.stop_grad_zu:
            tensors = _unique(tensors + model.matching_tensors())
        total = 0.0
        for k, start in enumerate(range(0, len(pairs), config.batch_size_pairs)):
            stop = min(start + config.batch_size_pairs, len(pairs))
            retained = (ptr[start:stop + 1] - ptr[start], idx[ptr[start]:ptr[stop]])
            model.zero_grad()
            loss = generation_loss(model, data, pairs[start:stop], retained, rng=drop, training=True,
                                   stop_grad_zu=config.stop_grad_zu)
            if not np.isfinite(loss):
                raise TrainingAborted(epoch, "generation", k)
            _step(state, tensors)
            total += loss * (stop - start)
        out.loss_gen = total / max(len(pairs), 1)

    state.epoch = epoch
    return out


@dataclass
class TrainResult:
    state: TrainState
    log: list

    @property
    def model(self):
        return self.state.model


def train(dataset, split, config, log_path=None, timing=True, on_epoch=None):
    """Train for ``max_epochs`` epochs, keeping the best validation nDCG@5 snapshot.

    On return the model holds the parameters of the selected epoch.
    """
    from .eval import ModelScorer, evaluate_matching

    data = TrainingData(dataset, split)
    state = TrainState.fresh(config, dataset.n_items, dataset.n_bundles)
    rows = []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", encoding="utf-8", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOG_HEADER)
    try:
        for _ in range(config.max_epochs):
            t0 = time.perf_counter()
            losses = run_epoch(state, data, config)
            report = evaluate_matching(ModelScorer(state.model, dataset, split), split, ks=(5,), which="val")
            ndcg5 = report.ndcg(5)
            seconds = time.perf_counter() - t0 if timing else 0.0
            if ndcg5 > state.best_val_ndcg5:
                state.best_val_ndcg5 = ndcg5
                state.best_epoch = state.epoch
                state.best_snapshot = state.snapshot()
            state.history.append(state.best_val_ndcg5)
            row = (state.epoch, losses.loss_mat, losses.loss_gen, ndcg5, seconds)
            rows.append(row)
            if writer:
                writer.writerow([row[0]] + [f"{x:.10g}" for x in row[1:4]] + [f"{seconds:.3f}"])
                fh.flush()
            log.info("epoch %d: L_mat=%.5f L_gen=%.5f val nDCG@5=%.4f (%.1fs)", *row)
            if on_epoch is not None:
                on_epoch(state, row)
    finally:
        if fh:
            fh.close()
    state.restore(state.best_snapshot)
    return TrainResult(state=state, log=rows)


def save_training_checkpoint(path, result, config, extra_header=None):
    state = result.state
    extra = {}
    for p in state.model.tensors():
        s = state.adam[p.name]
        extra[f"{p.name}.adam.m"] = s.m
        extra[f"{p.name}.adam.v"] = s.v
        extra[f"{p.name}.adam.t"] = np.array([[float(s.t)]])
    header = {
        "config_hash": config.hash(),
        "seed": config.seed,
        "best_epoch": state.best_epoch,
        "best_val_ndcg5": f"{state.best_val_ndcg5:.10g}",
        "epochs_run": state.epoch,
    }
    header.update(extra_header or {})
    save_checkpoint(path, state.model, header=header, extra=extra)


def config_from_dict(values):
    known = {f.name: f for f in fields(TrainConfig)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")
    return TrainConfig(**values)
