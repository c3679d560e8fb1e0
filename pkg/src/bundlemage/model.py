"""Matching and generation modules over partially shared item embeddings.

Embedding layout
----------------
Item embeddings live in one storage array of shape ``(n_blocks, d/2, n_items)``.
The matching table E1 and the generation table E2 are both basic-slice
views of two blocks each, so sharing is real memory aliasing:

=========  ========  ==========  ============
sharing    blocks    E1 blocks   E2 blocks
=========  ========  ==========  ============
partial    3         0, 1        0, 2
separate   4         0, 1        2, 3
full       2         0, 1        0, 1
=========  ========  ==========  ============

Block 0 is the shared half for ``partial``: logical row ``j < d/2`` of E1 is
the same memory as row ``j`` of E2. Logical row ``j`` of a view lives at
``view[j // (d/2), j % (d/2)]``.
"""

import hashlib
import io
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError, DimensionError
from .numerics import FFN2, ParamTensor, dropout_mask, ffn2_forward, sigmoid_map

log = logging.getLogger(__name__)

VARIANTS = ("full", "avg", "sep", "sha", "no_gen_loss", "no_mat_loss")
CHECKPOINT_MAGIC = "BUNDLEMAGE-CHECKPOINT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    d: int = 200
    dropout: float = 0.3
    variant: str = "full"
    activation: str = "relu"

    def __post_init__(self):
        self.variant = self.variant.replace("-", "_")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {', '.join(VARIANTS)}")
        if self.d < 2 or self.d % 2:
            raise ConfigError(f"embedding dimensionality must be even and >= 2, got {self.d}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def sharing(self):
        return {"sep": "separate", "sha": "full"}.get(self.variant, "partial")

    @property
    def gated(self):
        return self.variant != "avg"


_LAYOUTS = {
    # n_blocks, E1 slice, E2 slice, [(tensor name, block slice)]
    "partial": (3, slice(0, 2), slice(0, 3, 2), [("E.shared", slice(0, 1)), ("E.match", slice(1, 2)), ("E.gen", slice(2, 3))]),
    "separate": (4, slice(0, 2), slice(2, 4), [("E1", slice(0, 2)), ("E2", slice(2, 4))]),
    "full": (2, slice(0, 2), slice(0, 2), [("E.shared", slice(0, 2))]),
}


def _blocks(s, n):
    return set(range(n)[s])


class SharedItemEmbeddings:
    def __init__(self, d, n_items, sharing="partial"):
        if d % 2:
            raise DimensionError(f"embedding dimensionality must be even, got {d}")
        self.d, self.h, self.n_items, self.sharing = d, d // 2, n_items, sharing
        n_blocks, self._mat, self._gen, spec = _LAYOUTS[sharing]
        self.storage = np.zeros((n_blocks, self.h, n_items))
        self.grad_storage = np.zeros_like(self.storage)
        self.tensors = []
        mat_blocks, gen_blocks = _blocks(self._mat, n_blocks), _blocks(self._gen, n_blocks)
        self.matching_tensors, self.generation_tensors = [], []
        for name, s in spec:
            rows = (s.stop - s.start) * self.h
            p = ParamTensor(
                name,
                self.storage[s].reshape(rows, n_items),
                self.grad_storage[s].reshape(rows, n_items),
            )
            assert np.shares_memory(p.value, self.storage)
            self.tensors.append(p)
            blocks = _blocks(s, n_blocks)
            if blocks & mat_blocks:
                self.matching_tensors.append(p)
            if blocks & gen_blocks:
                self.generation_tensors.append(p)

    @property
    def matching_view(self):
        """E1 as a ``(2, d/2, n_items)`` view of the storage."""
        return self.storage[self._mat]

    @property
    def generation_view(self):
        """E2 as a ``(2, d/2, n_items)`` view of the storage."""
        return self.storage[self._gen]

    def matching_matrix(self):
        return self.matching_view.reshape(self.d, self.n_items)

    def generation_matrix(self):
        return self.generation_view.reshape(self.d, self.n_items)

    def add_matching_grad(self, g):
        self.grad_storage[self._mat] += g.reshape(2, self.h, self.n_items)

    def add_generation_grad(self, g):
        self.grad_storage[self._gen] += g.reshape(2, self.h, self.n_items)


class MatchingParams:
    def __init__(self, d, activation="relu"):
        self.W1 = ParamTensor("W1", np.zeros((d, 2 * d)))
        self.b1 = ParamTensor("b1", np.zeros(d))
        self.fnn1 = FFN2("fnn1", d, activation)

    def tensors(self, gated=True):
        return ([self.W1, self.b1] if gated else []) + self.fnn1.tensors()


class GenerationParams:
    def __init__(self, d, activation="relu"):
        h = d // 2
        self.W2 = ParamTensor("W2", np.zeros((h, d)))
        self.b2 = ParamTensor("b2", np.zeros(h))
        self.W3 = ParamTensor("W3", np.zeros((h, d)))
        self.b3 = ParamTensor("b3", np.zeros(h))
        self.fnn2 = FFN2("fnn2", d, activation)

    def tensors(self):
        return [self.W2, self.b2, self.W3, self.b3] + self.fnn2.tensors()


@dataclass
class PreMixResult:
    gate: np.ndarray
    latent: np.ndarray


class BundleMage:
    """Parameter container plus batched forward/backward passes."""

    def __init__(self, config, n_items, n_bundles):
        self.config = config
        self.n_items = n_items
        self.n_bundles = n_bundles
        d = config.d
        self.emb = SharedItemEmbeddings(d, n_items, config.sharing)
        self.matching = MatchingParams(d, config.activation)
        self.generation = GenerationParams(d, config.activation)

    def tensors(self):
        return self.emb.tensors + self.matching.tensors() + self.generation.tensors()

    def named_tensors(self):
        return {p.name: p for p in self.tensors()}

    def matching_tensors(self):
        return self.emb.matching_tensors + self.matching.tensors(self.config.gated)

    def generation_tensors(self):
        return self.emb.generation_tensors + self.generation.tensors()

    def zero_grad(self):
        for p in self.tensors():
            p.zero_grad()

    def state_arrays(self):
        return {p.name: p.value.copy() for p in self.tensors()}

    def load_state_arrays(self, arrays):
        for p in self.tensors():
            p.value[...] = arrays[p.name]

    # -- matching path ------------------------------------------------------

    def bundle_table(self, X_norm):
        """Bundle embeddings as rows: ``X D^-1`` applied to E1, shape ``(N_b, d)``."""
        return np.asarray(X_norm @ self.emb.matching_matrix().T)

    def matching_forward(self, P_op, Q_op, no_bundles, bundle_table, rng=None, training=False):
        """Latent user vectors for a batch.

        ``P_op`` (n x N_i) and ``Q_op`` (n x N_b) are row-normalized sparse
        operators producing p_u and q_u. Rows flagged in ``no_bundles`` have
        no bundle input; their q_u falls back to p_u.
        """
        d = self.config.d
        E1 = self.emb.matching_matrix()
        P = np.asarray(P_op @ E1.T)
        Q = np.asarray(Q_op @ bundle_table)
        if no_bundles is not None and no_bundles.any():
            Q[no_bundles] = P[no_bundles]
        rate = self.config.dropout if training else 0.0
        mP = dropout_mask(P.shape, rate, rng) if rate else None
        mQ = dropout_mask(Q.shape, rate, rng) if rate else None
        Pd = P * mP if rate else P
        Qd = Q * mQ if rate else Q
        if self.config.gated:
            W1 = self.matching.W1.value
            G = sigmoid_map(Pd @ W1[:, :d].T + Qd @ W1[:, d:].T + self.matching.b1.value)
            M = G * Pd + (1.0 - G) * Qd
        else:
            G = None
            M = 0.5 * (Pd + Qd)
        Z, fcache = self.matching.fnn1.forward(M)
        return Z, (P_op, Q_op, no_bundles, mP, mQ, Pd, Qd, G, fcache)

    def matching_backward(self, gZ, cache):
        """Backpropagate to W1, b1 and FNN1; return ``(gE1^T part, g bundle_table)``."""
        P_op, Q_op, no_bundles, mP, mQ, Pd, Qd, G, fcache = cache
        d = self.config.d
        gM = self.matching.fnn1.backward(gZ, fcache)
        if G is not None:
            gG = gM * (Pd - Qd)
            gPd = gM * G
            gQd = gM * (1.0 - G)
            gS = gG * G * (1.0 - G)
            W1 = self.matching.W1.value
            self.matching.W1.grad[:, :d] += gS.T @ Pd
            self.matching.W1.grad[:, d:] += gS.T @ Qd
            self.matching.b1.grad += gS.sum(axis=0)
            gPd += gS @ W1[:, :d]
            gQd += gS @ W1[:, d:]
        else:
            gPd = 0.5 * gM
            gQd = 0.5 * gM
        gP = gPd * mP if mP is not None else gPd
        gQ = gQd * mQ if mQ is not None else gQd
        if no_bundles is not None and no_bundles.any():
            gP = gP.copy()
            gP[no_bundles] += gQ[no_bundles]
            gQ = gQ.copy()
            gQ[no_bundles] = 0.0
        gE1T = np.asarray(P_op.T @ gP)
        gB = np.asarray(Q_op.T @ gQ)
        return gE1T, gB

    # -- generation path ----------------------------------------------------

    def generation_forward(self, Zu, Xb_op, rng=None, training=False):
        """Item logits for (user latent, incomplete bundle) pairs.

        ``Xb_op`` (n x N_i) is the row-normalized incomplete affiliation matrix.
        """
        g = self.generation
        E2 = self.emb.generation_matrix()
        Zb = np.asarray(Xb_op @ E2.T)
        rate = self.config.dropout if training else 0.0
        mB = dropout_mask(Zb.shape, rate, rng) if rate else None
        Zbd = Zb * mB if rate else Zb
        C = np.hstack([Zu @ g.W2.value.T + g.b2.value, Zbd @ g.W3.value.T + g.b3.value])
        Y, fcache = g.fnn2.forward(C)
        logits = Y @ E2
        return logits, (Zu, Xb_op, mB, Zbd, Y, fcache, E2)

    def generation_backward(self, g_logits, cache):
        """Accumulate generation-path gradients (including E2); return dL/dZu."""
        Zu, Xb_op, mB, Zbd, Y, fcache, E2 = cache
        g = self.generation
        h = self.config.d // 2
        gE2 = Y.T @ g_logits
        gY = g_logits @ E2.T
        gC = g.fnn2.backward(gY, fcache)
        gU, gB = gC[:, :h], gC[:, h:]
        g.W2.grad += gU.T @ Zu
        g.b2.grad += gU.sum(axis=0)
        g.W3.grad += gB.T @ Zbd
        g.b3.grad += gB.sum(axis=0)
        gZb = gB @ g.W3.value
        if mB is not None:
            gZb = gZb * mB
        gE2 += np.asarray(Xb_op.T @ gZb).T
        self.emb.add_generation_grad(gE2)
        return gU @ g.W2.value


# ---------------------------------------------------------------------------
# Per-example operations
# ---------------------------------------------------------------------------


def _table(E):
    E = np.asarray(E, dtype=np.float64)
    if E.ndim == 3:
        E = E.reshape(-1, E.shape[-1])
    return E


def _nonempty(indices, what):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ContractError(f"{what}: empty index set")
    return idx


def item_preference(items, E1):
    """Mean of the E1 columns of the user's interacted items."""
    return _table(E1)[:, _nonempty(items, "item_preference")].mean(axis=1)


def bundle_embedding_matrix(E1, X, bundle_sizes=None):
    """``E1 X D^-1``: column ``b`` is the mean embedding of bundle ``b``'s items."""
    E1 = _table(E1)
    sizes = X.row_lengths() if bundle_sizes is None else np.asarray(bundle_sizes)
    if np.any(sizes < 1):
        raise ContractError(f"bundle {int(np.flatnonzero(sizes < 1)[0])} has no items")
    summed = np.asarray(X.to_scipy() @ E1.T).T
    return summed / sizes


def bundle_preference(bundles, bundle_embeddings):
    return np.asarray(bundle_embeddings)[:, _nonempty(bundles, "bundle_preference")].mean(axis=1)


def premix(p_u, q_u, params, variant="full", dropout=0.0, rng=None, training=False):
    p_u = np.asarray(p_u, dtype=np.float64)
    q_u = np.asarray(q_u, dtype=np.float64)
    d = params.W1.shape[0]
    if p_u.shape != (d,) or q_u.shape != (d,):
        raise DimensionError(f"premix: expected vectors of length {d}, got {p_u.shape} and {q_u.shape}")
    if training and dropout:
        p_u = p_u * dropout_mask(p_u.shape, dropout, rng)
        q_u = q_u * dropout_mask(q_u.shape, dropout, rng)
    if variant == "avg":
        gate = np.full(d, 0.5)
        mixed = 0.5 * (p_u + q_u)
    else:
        gate = sigmoid_map(params.W1.value @ np.concatenate([p_u, q_u]) + params.b1.value)
        mixed = gate * p_u + (1.0 - gate) * q_u
    fnn = params.fnn1
    z = ffn2_forward(mixed, (fnn.w_in, fnn.b_in), (fnn.w_out, fnn.b_out), fnn.activation)
    return PreMixResult(gate=gate, latent=z)


def _check_candidates(candidates, n):
    if candidates is None:
        return slice(None)
    c = np.asarray(candidates, dtype=np.int64)
    if c.size and (c.min() < 0 or c.max() >= n):
        raise ValueError(f"candidate index out of range [0, {n})")
    return c


def matching_scores(z_u, bundle_embeddings, candidates=None):
    B = np.asarray(bundle_embeddings)
    z_u = np.asarray(z_u, dtype=np.float64)
    if z_u.shape != (B.shape[0],):
        raise DimensionError(f"matching_scores: z_u has shape {z_u.shape}, expected ({B.shape[0]},)")
    return B[:, _check_candidates(candidates, B.shape[1])].T @ z_u


def bundle_latent(items, E2):
    return _table(E2)[:, _nonempty(items, "bundle_latent")].mean(axis=1)


def pair_latent(z_u, z_b, params):
    z_u = np.asarray(z_u, dtype=np.float64)
    z_b = np.asarray(z_b, dtype=np.float64)
    d = params.W2.shape[1]
    if z_u.shape != (d,) or z_b.shape != (d,):
        raise DimensionError(f"pair_latent: expected vectors of length {d}, got {z_u.shape} and {z_b.shape}")
    zu = params.W2.value @ z_u + params.b2.value
    zb = params.W3.value @ z_b + params.b3.value
    fnn = params.fnn2
    return ffn2_forward(np.concatenate([zu, zb]), (fnn.w_in, fnn.b_in), (fnn.w_out, fnn.b_out), fnn.activation)


def generation_scores(z_bu, E2, candidates=None):
    E2 = _table(E2)
    z_bu = np.asarray(z_bu, dtype=np.float64)
    if z_bu.shape != (E2.shape[0],):
        raise DimensionError(f"generation_scores: vector has shape {z_bu.shape}, expected ({E2.shape[0]},)")
    return E2[:, _check_candidates(candidates, E2.shape[1])].T @ z_bu


# ---------------------------------------------------------------------------
# Initialization and checkpoints
# ---------------------------------------------------------------------------


def _xavier(p, rng):
    fan_out, fan_in = p.shape
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    p.value[...] = rng.child(p.name).generator.uniform(-bound, bound, size=p.shape)


def init_params(config, n_items, n_bundles, rng):
    """Xavier-uniform weights, zero biases, item embeddings uniform in +-0.01."""
    model = BundleMage(config, n_items, n_bundles)
    for p in model.emb.tensors:
        p.value[...] = rng.child(p.name).generator.uniform(-0.01, 0.01, size=p.shape)
    for p in model.matching.tensors() + model.generation.tensors():
        if p.value.ndim == 2:
            _xavier(p, rng)
        else:
            p.value[...] = 0.0
    return model


def config_hash(config_items):
    text = "\n".join(f"{k}={v}" for k, v in sorted(config_items.items()))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _write_record(fh, name, arr):
    arr = np.asarray(arr, dtype=np.float64)
    mat = arr.reshape(-1, 1) if arr.ndim == 1 else arr.reshape(arr.shape[0], -1)
    raw = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<QQ", mat.shape[0], mat.shape[1]))
    fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def save_checkpoint(path, model, header=None, extra=None):
    """Write a text header then named little-endian float64 records.

    ``extra`` maps additional record names (optimizer state, scalars) to arrays.
    """
    cfg = model.config
    head = {
        "format_version": CHECKPOINT_VERSION,
        "d": cfg.d,
        "n_items": model.n_items,
        "n_bundles": model.n_bundles,
        "variant": cfg.variant,
        "activation": cfg.activation,
        "dropout": repr(cfg.dropout),
    }
    head.update(header or {})
    records = [(p.name, p.value) for p in model.tensors()] + list((extra or {}).items())
    buf = io.BytesIO()
    text = CHECKPOINT_MAGIC + "\n" + "".join(f"{k}={v}\n" for k, v in head.items()) + "\n"
    buf.write(text.encode("utf-8"))
    buf.write(struct.pack("<Q", len(records)))
    for name, arr in records:
        _write_record(buf, name, arr)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path):
    """Return ``(header dict, {name: 2-D array})`` without building a model."""
    blob = Path(path).read_bytes()
    end = blob.find(b"\n\n")
    if not blob.startswith(CHECKPOINT_MAGIC.encode()) or end < 0:
        raise DataError(f"{path}: not a checkpoint file")
    lines = blob[:end].decode("utf-8").split("\n")[1:]
    header = dict(line.split("=", 1) for line in lines)
    off = end + 2
    (n,) = struct.unpack_from("<Q", blob, off)
    off += 8
    records = {}
    for _ in range(n):
        (ln,) = struct.unpack_from("<Q", blob, off)
        off += 8
        name = blob[off:off + ln].decode("utf-8")
        off += ln
        rows, cols = struct.unpack_from("<QQ", blob, off)
        off += 16
        records[name] = np.frombuffer(blob, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).copy()
        off += 8 * rows * cols
    if off != len(blob):
        raise DataError(f"{path}: trailing bytes after checkpoint records")
    return header, records


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns ``(model, header, records)``."""
    header, records = read_checkpoint(path)
    if int(header.get("format_version", -1)) != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
    cfg = ModelConfig(
        d=int(header["d"]), dropout=float(header["dropout"]),
        variant=header["variant"], activation=header.get("activation", "relu"),
    )
    model = BundleMage(cfg, int(header["n_items"]), int(header["n_bundles"]))
    for p in model.tensors():
        if p.name not in records:
            raise DataError(f"{path}: missing tensor record {p.name!r}")
        p.value[...] = records[p.name].reshape(p.shape)
    return model, header, records
