"""Variational graph autoencoder over road scene graph tensors.

Encoder: edge-conditioned convolutions (a filter network turns each edge's
label vector into a weight matrix), global gated or mean pooling, Gaussian
latent heads.  Decoder: a perceptron from z (optionally concatenated with a
BEV code) to adjacency, edge-label and node-feature probabilities.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DegenerateNormalizerError, ShapeMismatchError, TaskMismatchError
from .graph import FEATURE_DIM, N_CLASSES, GraphTensors, RoadSceneGraph, to_tensors
from .labels import REL_PREFIX, RelationshipLabel, default_label_order

log = logging.getLogger(__name__)

TASKS = ("RSGRN", "NGPGV", "NGPGVEB")
POOLINGS = ("gated", "none")
N_CONT = FEATURE_DIM - N_CLASSES
PROB_EPS = 1e-12
LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0
BEV_CHANNELS = (8, 16, 32)


@dataclass(frozen=True)
class LossWeights:
    lambda_A: float = 1.0
    lambda_F: float = 1.0
    lambda_E: float = 1.0
    lambda_cont: float = 0.1
    beta_kl: float = 0.05

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and v >= 0 and math.isfinite(v)):
                raise ConfigError(f"model.weights.{f.name} must be a nonnegative number")


@dataclass(frozen=True)
class ModelConfig:
    k_max: int = 40
    ecc_widths: tuple[int, ...] = (32, 32)
    filter_hidden: int = 32
    pool_dim: int = 64
    z_dim: int = 24
    decoder_hidden: tuple[int, ...] = (128,)
    pooling: str = "gated"
    task: str = "RSGRN"
    bev_size: int = 64
    bev_extent: float = 80.0
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        object.__setattr__(self, "ecc_widths", tuple(int(w) for w in self.ecc_widths))
        object.__setattr__(self, "decoder_hidden", tuple(int(w) for w in self.decoder_hidden))
        if isinstance(self.weights, dict):
            object.__setattr__(self, "weights", LossWeights(**self.weights))
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"unknown pooling {self.pooling!r}; expected gated or none")
        sizes = (self.k_max, self.filter_hidden, self.pool_dim, self.z_dim, *self.ecc_widths,
                 *self.decoder_hidden)
        if not self.ecc_widths or any(int(s) < 1 for s in sizes):
            raise ConfigError("model sizes must be positive integers")
        if self.bev_size < 8 or self.bev_extent <= 0:
            raise ConfigError("bev_size must be >= 8 and bev_extent positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ecc_widths"] = list(self.ecc_widths)
        d["decoder_hidden"] = list(self.decoder_hidden)
        return d


@dataclass
class Standardizer:
    """Per-column affine normalisation of the continuous feature block."""
    mean: np.ndarray = field(default_factory=lambda: np.zeros(N_CONT))
    std: np.ndarray = field(default_factory=lambda: np.ones(N_CONT))

    @classmethod
    def fit(cls, tensors: Sequence[GraphTensors]) -> "Standardizer":
        rows = [t.F[t.node_mask, N_CLASSES:] for t in tensors]
        rows = np.concatenate(rows) if rows else np.zeros((0, N_CONT))
        if len(rows) == 0:
            return cls()
        std = rows.std(axis=0)
        return cls(rows.mean(axis=0), np.where(std > 1e-9, std, 1.0))

    def apply(self, t: GraphTensors) -> GraphTensors:
        F = t.F.copy()
        F[:, N_CLASSES:] = np.where(t.node_mask[:, None], (F[:, N_CLASSES:] - self.mean) / self.std, 0.0)
        return dataclasses.replace(t, F=F)

    def invert(self, cont: np.ndarray) -> np.ndarray:
        return cont * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# -- parameter construction ------------------------------------------------------

def _dense(rng, params, name, d_in, d_out, scale=1.0):
    params[f"{name}.W"] = rng.normal(scale=scale / math.sqrt(d_in), size=(d_in, d_out))
    params[f"{name}.b"] = np.zeros(d_out)


def init_params(cfg: ModelConfig, n_labels: int, seed: int = 0) -> dict[str, np.ndarray]:
    """Deterministic initial weights for ``cfg``."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}
    d_in = FEATURE_DIM + n_labels
    for li, d_out in enumerate(cfg.ecc_widths):
        _dense(rng, p, f"ecc{li}.filter0", n_labels + 1, cfg.filter_hidden)
        _dense(rng, p, f"ecc{li}.filter1", cfg.filter_hidden, d_out * d_in, scale=0.1 / math.sqrt(d_in))
        # a label-independent base matrix keeps early messages well scaled
        p[f"ecc{li}.filter1.b"] = rng.normal(scale=1.0 / math.sqrt(d_in), size=d_out * d_in)
        p[f"ecc{li}.bias"] = np.zeros(d_out)
        d_in = d_out
    if cfg.pooling == "gated":
        _dense(rng, p, "pool.gate", d_in, 1)
    _dense(rng, p, "pool.value", d_in, cfg.pool_dim)
    _dense(rng, p, "latent.mu", cfg.pool_dim, cfg.z_dim)
    _dense(rng, p, "latent.logvar", cfg.pool_dim, cfg.z_dim, scale=0.1)
    h = cfg.z_dim + (BEV_CHANNELS[-1] if cfg.task == "NGPGVEB" else 0)
    for li, width in enumerate(cfg.decoder_hidden):
        _dense(rng, p, f"dec.hidden{li}", h, width)
        h = width
    k = cfg.k_max
    _dense(rng, p, "dec.A", h, k * k)
    _dense(rng, p, "dec.E", h, k * k * n_labels)
    _dense(rng, p, "dec.Fclass", h, k * N_CLASSES)
    _dense(rng, p, "dec.Fcont", h, k * N_CONT)
    if cfg.task == "NGPGVEB":
        c_in = 3
        for li, c_out in enumerate(BEV_CHANNELS):
            p[f"bev.conv{li}.w"] = rng.normal(scale=math.sqrt(2.0 / (9 * c_in)), size=(c_out, c_in, 3, 3))
            p[f"bev.conv{li}.b"] = np.zeros(c_out)
            c_in = c_out
    return p


def linear(x: Tensor, P: dict[str, Tensor], name: str) -> Tensor:
    y = ad.matmul(x, P[f"{name}.W"])
    b = P[f"{name}.b"]
    return ad.add(y, ad.broadcast_to(ad.reshape(b, (1, b.shape[0])), y.shape))


# -- batching --------------------------------------------------------------------

@dataclass
class GraphBatch:
    """Numpy-side inputs for a batch of (standardised) graph tensors."""
    B: int
    k: int
    X0: np.ndarray          # (B*k, d0) node inputs
    src: np.ndarray         # message source rows (self loops included)
    dst: np.ndarray
    label_rows: np.ndarray  # unique edge-label vectors (u, |L|+1)
    label_index: np.ndarray  # edge -> unique row
    pool: np.ndarray        # (B, B*k) membership, 1 for present nodes
    counts: np.ndarray      # nodes per graph


def graph_edges(A: np.ndarray, E: np.ndarray, mask: np.ndarray, offset: int = 0):
    """(src, dst, label vectors) of one graph, self loops last."""
    L = E.shape[2]
    off = A.copy()
    np.fill_diagonal(off, 0.0)
    pres = np.asarray(mask, dtype=bool)
    off[~pres, :] = 0.0
    off[:, ~pres] = 0.0
    s, d = np.nonzero(off > 0.5)
    labs = np.concatenate([E[s, d], np.zeros((len(s), 1))], axis=1)
    nodes = np.nonzero(pres)[0]
    self_lab = np.zeros((len(nodes), L + 1))
    self_lab[:, L] = 1.0
    return (np.concatenate([s, nodes]) + offset, np.concatenate([d, nodes]) + offset,
            np.concatenate([labs, self_lab]))


def make_batch(tensors: Sequence[GraphTensors]) -> GraphBatch:
    if not tensors:
        raise ValueError("empty batch")
    k = tensors[0].k_max
    B = len(tensors)
    X0, srcs, dsts, labs = [], [], [], []
    pool = np.zeros((B, B * k))
    for b, t in enumerate(tensors):
        if t.k_max != k:
            raise ShapeMismatchError(f"batch mixes k_max {k} and {t.k_max}")
        diag = t.E[np.arange(k), np.arange(k)]
        X0.append(np.concatenate([t.F, diag], axis=1) * t.node_mask[:, None])
        s, d, lab = graph_edges(t.A, t.E, t.node_mask, b * k)
        srcs.append(s)
        dsts.append(d)
        labs.append(lab)
        pool[b, b * k:(b + 1) * k] = t.node_mask
    labels = np.concatenate(labs)
    uniq, inv = np.unique(labels, axis=0, return_inverse=True)
    return GraphBatch(B, k, np.concatenate(X0), np.concatenate(srcs).astype(np.int64),
                      np.concatenate(dsts).astype(np.int64), uniq, inv.reshape(-1),
                      pool, pool.sum(axis=1))


# -- encoder pieces ----------------------------------------------------------------

def ecc_layer(X: Tensor, src, dst, label_rows, label_index, P: dict[str, Tensor], name: str) -> Tensor:
    """Mean over in-neighbours j of F(label(j, i)) @ X[j], plus bias."""
    n, d_in = X.shape
    d_out = P[f"{name}.bias"].shape[0]
    if P[f"{name}.filter1.W"].shape[1] != d_out * d_in:
        raise ShapeMismatchError(f"{name}: filter emits {P[f'{name}.filter1.W'].shape[1]} values, "
                                 f"need {d_out}x{d_in}")
    h = ad.relu(linear(Tensor(label_rows), P, f"{name}.filter0"))
    W = ad.reshape(linear(h, P, f"{name}.filter1"), (len(label_rows), d_out, d_in))
    W = ad.take(W, label_index, axis=0)
    agg = ad.edge_matvec_mean(W, X, src, dst, n)
    bias = P[f"{name}.bias"]
    return ad.add(agg, ad.broadcast_to(ad.reshape(bias, (1, d_out)), (n, d_out)))


def pool_nodes(X: Tensor, pool: np.ndarray, P: dict[str, Tensor], mode: str) -> Tensor:
    """Graph readout: gated sum or masked mean of node values."""
    val = linear(X, P, "pool.value")
    if mode == "gated":
        gate = ad.sigmoid(linear(X, P, "pool.gate"))
        val = ad.mul(ad.broadcast_to(gate, val.shape), val)
        return ad.matmul(Tensor(pool), val)
    counts = pool.sum(axis=1, keepdims=True)
    return ad.matmul(Tensor(np.divide(pool, counts, out=np.zeros_like(pool), where=counts > 0)), val)


def kl_terms(mu: Tensor, logvar: Tensor) -> Tensor:
    """Per-entry KL(N(mu, exp logvar) || N(0, 1))."""
    if mu.shape != logvar.shape:
        raise ShapeMismatchError(f"kl_loss: shapes {mu.shape} and {logvar.shape} do not match")
    inner = ad.sub(ad.sub(ad.add(logvar, 1.0), ad.square(mu)), ad.exp(logvar))
    return ad.mul(inner, -0.5)


def kl_loss(mu: Tensor, logvar: Tensor) -> Tensor:
    return ad.sum_(kl_terms(mu, logvar))


# -- decoder output -----------------------------------------------------------------

@dataclass
class Decoded:
    """Decoder logits for a batch; probabilities are formed on demand."""
    B: int
    k: int
    n_labels: int
    A_logit: Tensor      # (B, k*k)
    E_logit: Tensor      # (B*k*k, L)
    Fc_logit: Tensor     # (B*k, 4)
    F_cont: Tensor       # (B*k, N_CONT)

    def A(self) -> Tensor:
        return ad.sigmoid(self.A_logit)

    def E(self) -> Tensor:
        return ad.softmax(self.E_logit, axis=1)

    def F_class(self) -> Tensor:
        return ad.softmax(self.Fc_logit, axis=1)

    def arrays(self, b: int = 0):
        """(A', E', F') numpy arrays of graph ``b`` (continuous block standardised)."""
        k, L = self.k, self.n_labels
        A = self.A().data.reshape(self.B, k, k)[b]
        E = self.E().data.reshape(self.B, k, k, L)[b]
        Fc = self.F_class().data.reshape(self.B, k, N_CLASSES)[b]
        Fx = self.F_cont.data.reshape(self.B, k, N_CONT)[b]
        return A, E, np.concatenate([Fc, Fx], axis=1)


class VGAE:
    def __init__(self, cfg: ModelConfig, params: dict[str, np.ndarray],
                 label_order: Sequence[str] | None = None, standardizer: Standardizer | None = None):
        self.cfg = cfg
        self.label_order = list(label_order or default_label_order())
        self.standardizer = standardizer or Standardizer()
        expected = init_params(cfg, len(self.label_order), 0)
        for name, arr in expected.items():
            if name not in params:
                raise ShapeMismatchError(f"missing parameter {name}")
            if np.shape(params[name]) != arr.shape:
                raise ShapeMismatchError(f"parameter {name}: shape {np.shape(params[name])} vs {arr.shape}")
        extra = sorted(set(params) - set(expected))
        if extra:
            raise ShapeMismatchError(f"unexpected parameters: {', '.join(extra)}")
        self.params = {k: Tensor(np.array(params[k], dtype=np.float64), requires_grad=True)
                       for k in sorted(expected)}
        self.run_info: dict = {}  # free-form provenance stored in the sidecar

    @classmethod
    def create(cls, cfg: ModelConfig, label_order=None, standardizer=None, seed: int = 0) -> "VGAE":
        order = list(label_order or default_label_order())
        return cls(cfg, init_params(cfg, len(order), seed), order, standardizer)

    @property
    def n_labels(self) -> int:
        return len(self.label_order)

    def numpy_params(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    # encoder ----------------------------------------------------------------------
    def encode(self, batch: GraphBatch) -> tuple[Tensor, Tensor]:
        P = self.params
        X = Tensor(batch.X0)
        for li in range(len(self.cfg.ecc_widths)):
            X = ad.relu(ecc_layer(X, batch.src, batch.dst, batch.label_rows, batch.label_index, P, f"ecc{li}"))
        g = pool_nodes(X, batch.pool, P, self.cfg.pooling)
        mu = linear(g, P, "latent.mu")
        logvar = ad.clip(linear(g, P, "latent.logvar"), LOGVAR_MIN, LOGVAR_MAX)
        return mu, logvar

    def encode_bev(self, grids: np.ndarray) -> Tensor:
        """(B, 3, W, W) rasters -> (B, 32) codes."""
        if "bev.conv0.w" not in self.params:
            raise TaskMismatchError(f"a {self.cfg.task} model has no BEV encoder")
        return encode_bev(Tensor(np.asarray(grids, dtype=np.float64)), self.params)

    def decode(self, z: Tensor, bev_code: Tensor | None = None) -> Decoded:
        if (bev_code is not None) != (self.cfg.task == "NGPGVEB"):
            raise TaskMismatchError("a BEV code is required exactly for NGPGVEB models")
        P = self.params
        B = z.shape[0]
        h = z if bev_code is None else ad.concat([z, bev_code], axis=1)
        for li in range(len(self.cfg.decoder_hidden)):
            h = ad.relu(linear(h, P, f"dec.hidden{li}"))
        k, L = self.cfg.k_max, self.n_labels
        return Decoded(
            B, k, L,
            linear(h, P, "dec.A"),
            ad.reshape(linear(h, P, "dec.E"), (B * k * k, L)),
            ad.reshape(linear(h, P, "dec.Fclass"), (B * k, N_CLASSES)),
            ad.reshape(linear(h, P, "dec.Fcont"), (B * k, N_CONT)),
        )

    # convenience ------------------------------------------------------------------------
    def prepare(self, g: RoadSceneGraph, id_order=None) -> GraphTensors:
        t = to_tensors(g, self.cfg.k_max, self.label_order, id_order)
        return self.standardizer.apply(t)

    def reconstruct(self, t: GraphTensors, bev: np.ndarray | None = None) -> Decoded:
        """Deterministic pass with z = mu."""
        mu, _ = self.encode(make_batch([t]))
        code = self.encode_bev(bev[None]) if bev is not None else None
        return self.decode(mu, code)

    # persistence -------------------------------------------------------------------------
    def sidecar(self) -> dict:
        c = self.cfg
        return {
            "version": 1,
            "task": c.task,
            "pooling": c.pooling,
            "k_max": c.k_max,
            "z_dim": c.z_dim,
            "widths": {"ecc": list(c.ecc_widths), "filter_hidden": c.filter_hidden,
                       "pool_dim": c.pool_dim, "decoder_hidden": list(c.decoder_hidden)},
            "bev": {"size": c.bev_size, "extent": c.bev_extent},
            "label_order": self.label_order,
            "standardization": self.standardizer.to_dict(),
            "loss_weights": dataclasses.asdict(c.weights),
            "run": self.run_info,
        }

    def save(self, path) -> None:
        from .io import atomic_write_text

        ad.save_checkpoint(path, self.numpy_params())
        atomic_write_text(sidecar_path(path), json.dumps(self.sidecar(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "VGAE":
        from .errors import ParseError

        try:
            with open(sidecar_path(path), encoding="utf-8") as fh:
                meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"checkpoint sidecar: {exc}") from None
        cfg = ModelConfig(
            k_max=meta["k_max"], ecc_widths=tuple(meta["widths"]["ecc"]),
            filter_hidden=meta["widths"]["filter_hidden"], pool_dim=meta["widths"]["pool_dim"],
            z_dim=meta["z_dim"], decoder_hidden=tuple(meta["widths"]["decoder_hidden"]),
            pooling=meta["pooling"], task=meta["task"], bev_size=meta["bev"]["size"],
            bev_extent=meta["bev"]["extent"], weights=LossWeights(**meta["loss_weights"]),
        )
        model = cls(cfg, ad.load_checkpoint(path), meta["label_order"],
                    Standardizer.from_dict(meta["standardization"]))
        model.run_info = dict(meta.get("run", {}))
        return model


def sidecar_path(path) -> str:
    return str(path) + ".json"


def encode_bev(x: Tensor, P: dict[str, Tensor]) -> Tensor:
    if x.data.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatchError(f"encode_bev: expected (B, 3, W, W), got {x.shape}")
    for li in range(len(BEV_CHANNELS)):
        w, b = P[f"bev.conv{li}.w"], P[f"bev.conv{li}.b"]
        x = ad.conv2d(x, w, stride=2, pad=1)
        x = ad.relu(ad.add(x, ad.broadcast_to(ad.reshape(b, (1, b.shape[0], 1, 1)), x.shape)))
    B, C, H, W = x.shape
    return ad.mean(ad.reshape(x, (B, C, H * W)), axis=2)


def sample_latent(mu: Tensor, logvar: Tensor, seed) -> Tensor:
    """Reparameterised draw z = mu + exp(logvar / 2) * eps."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal(mu.shape)
    return ad.add(mu, ad.mul(ad.exp(ad.mul(logvar, 0.5)), Tensor(eps)))


# -- matching -----------------------------------------------------------------------

def match_nodes(truth: GraphTensors, pred_F: np.ndarray, pred_A: np.ndarray | None = None,
                mode: str = "identity") -> np.ndarray:
    """Slot assigned to every truth row (identity, or greedy by similarity).

    Greedy similarity: class-distribution agreement minus squared distance of
    the (standardised) position columns; pairs are taken in descending
    similarity, ties by (truth row, slot).
    """
    k = truth.k_max
    if mode == "identity":
        return np.arange(k)
    if mode != "greedy":
        raise ConfigError(f"unknown matching mode {mode!r}")
    rows = np.nonzero(truth.node_mask)[0]
    cls_t = truth.F[rows, :N_CLASSES]
    pos_t = truth.F[rows, N_CLASSES:N_CLASSES + 2]
    sim = cls_t @ pred_F[:, :N_CLASSES].T
    sim = sim - ((pos_t[:, None, :] - pred_F[None, :, N_CLASSES:N_CLASSES + 2]) ** 2).sum(axis=2)
    if pred_A is not None:
        sim = sim + np.diag(pred_A)[None, :]
    order = sorted(((-sim[a, s], a, s) for a in range(len(rows)) for s in range(k)))
    perm = -np.ones(k, dtype=np.int64)
    used = set()
    for _, a, s in order:
        r = rows[a]
        if perm[r] >= 0 or s in used:
            continue
        perm[r] = s
        used.add(s)
    free = [s for s in range(k) if s not in used]
    for r in range(k):
        if perm[r] < 0:
            perm[r] = free.pop(0)
    return perm


def permute_tensors(t: GraphTensors, perm: np.ndarray) -> GraphTensors:
    """Move truth row i to slot perm[i] (X A X^T)."""
    k = t.k_max
    inv = np.empty(k, dtype=np.int64)
    inv[perm] = np.arange(k)
    return dataclasses.replace(
        t, A=t.A[np.ix_(inv, inv)], E=t.E[np.ix_(inv, inv)], F=t.F[inv], node_mask=t.node_mask[inv],
        id_order=[t.id_order[i] if i < len(t.id_order) else -1 for i in inv])


# -- reconstruction loss ------------------------------------------------------------------

def _log_clamped(x: Tensor) -> Tensor:
    return ad.log(ad.clip(x, PROB_EPS, 1.0 - PROB_EPS))


def recon_terms(truth: Sequence[GraphTensors], out: Decoded) -> dict[str, Tensor | float]:
    """Per-term negative log-likelihoods averaged over the batch (unweighted)."""
    B, k, L = out.B, out.k, out.n_labels
    if len(truth) != B:
        raise ShapeMismatchError(f"recon_loss: {len(truth)} targets for a batch of {B}")
    A_t = np.stack([t.A for t in truth]).reshape(B, k * k)
    diag = np.zeros((k, k))
    np.fill_diagonal(diag, 1.0)
    diag = np.broadcast_to(diag.reshape(1, k * k), (B, k * k))
    c_pos = A_t * np.where(diag > 0, 1.0 / k, 1.0 / (k * (k - 1)) if k > 1 else 0.0)
    c_neg = (1.0 - A_t) * np.where(diag > 0, 1.0 / k, 1.0 / (k * (k - 1)) if k > 1 else 0.0)
    Ap = out.A()
    adj = ad.add(ad.sum_(ad.mul(Tensor(c_pos), _log_clamped(Ap))),
                 ad.sum_(ad.mul(Tensor(c_neg), _log_clamped(ad.sub(1.0, Ap)))))
    adj = ad.mul(adj, -1.0 / B)

    # node classes: (1/n) sum_i log F_i . F'_i over present truth rows
    mask = np.concatenate([t.node_mask for t in truth]).astype(np.float64)
    n = np.repeat([max(int(t.node_mask.sum()), 1) for t in truth], k)
    F_t = np.concatenate([t.F for t in truth])
    rows = np.nonzero(mask)[0]
    if len(rows):
        dot = ad.sum_(ad.mul(Tensor(F_t[rows, :N_CLASSES]), ad.take(out.F_class(), rows)), axis=1)
        feat = ad.mul(ad.sum_(ad.mul(Tensor(1.0 / n[rows]), _log_clamped(dot))), -1.0 / B)
        diff = ad.sub(ad.take(out.F_cont, rows), Tensor(F_t[rows, N_CLASSES:]))
        w = 1.0 / (n[rows] * N_CONT)
        cont = ad.mul(ad.sum_(ad.mul(Tensor(np.repeat(w[:, None], N_CONT, axis=1)), ad.square(diff))), 1.0 / B)
    else:
        feat = cont = 0.0

    # edges: normalised by ||A||_1 - n over the truth's relationship edges
    idx, wts = [], []
    for b, t in enumerate(truth):
        off = t.A.copy()
        np.fill_diagonal(off, 0.0)
        s, d = np.nonzero(off)
        norm = float(t.A.sum()) - float(t.node_mask.sum())
        if len(s) == 0:
            if norm != 0:
                raise DegenerateNormalizerError(f"edge normaliser is {norm} for a graph without edges")
            continue
        if norm <= 0:
            raise DegenerateNormalizerError(f"edge normaliser ||A||_1 - n = {norm} with {len(s)} edges")
        idx.append(b * k * k + s * k + d)
        wts.append(np.full(len(s), 1.0 / norm))
    if idx:
        idx = np.concatenate(idx)
        E_t = np.stack([t.E for t in truth]).reshape(B * k * k, L)[idx]
        # cross-entropy against the label distribution; for one-hot fibers this
        # is exactly log E_ij . E'_ij, and it spreads mass over every true label
        # of a multi-labelled pair instead of letting one label absorb it
        probs = ad.softmax(ad.take(out.E_logit, idx), axis=1)
        weighted = Tensor(E_t * np.concatenate(wts)[:, None])
        edge = ad.mul(ad.sum_(ad.mul(weighted, _log_clamped(probs))), -1.0 / B)
    else:
        if any(t.n for t in truth) and truth:
            log.debug("no relationship edges in batch; edge term is 0")
        edge = 0.0
    return {"adj": adj, "feat": feat, "edge": edge, "cont": cont}


def _combine(terms: dict, w: LossWeights) -> Tensor:
    total = Tensor(0.0)
    for key, lam in (("adj", w.lambda_A), ("feat", w.lambda_F), ("edge", w.lambda_E), ("cont", w.lambda_cont)):
        term = terms[key]
        if lam and isinstance(term, Tensor):
            total = ad.add(total, ad.mul(term, float(lam)))
    return total


def recon_loss(truth: Sequence[GraphTensors] | GraphTensors, out: Decoded, w: LossWeights | None = None,
               perms: Sequence[np.ndarray] | None = None) -> Tensor:
    """Weighted reconstruction loss; ``perms`` maps truth rows to decoder slots."""
    w = w or LossWeights()
    truth = [truth] if isinstance(truth, GraphTensors) else list(truth)
    if perms is not None:
        truth = [permute_tensors(t, p) for t, p in zip(truth, perms)]
    return _combine(recon_terms(truth, out), w)


# -- prediction ----------------------------------------------------------------------

def predict_relationships(g_in: RoadSceneGraph, model: VGAE, task: str | None = None,
                          bev: np.ndarray | None = None) -> list[tuple[int, int, RelationshipLabel, float]]:
    """Candidate relationship triples ranked by A'[i,j] * E'[i,j,label].

    Candidates are ordered pairs of input nodes with labels legal for their
    classes; RSGRN drops triples already in the input.  Ties fall back to
    (src, dst, label name) ascending.
    """
    task = task or model.cfg.task
    if task != model.cfg.task:
        raise TaskMismatchError(f"checkpoint was trained for {model.cfg.task}, not {task}")
    if (bev is not None) != (task == "NGPGVEB"):
        raise TaskMismatchError("a BEV raster is required exactly for NGPGVEB")
    t = model.prepare(g_in)
    A, E, _ = model.reconstruct(t, bev).arrays(0)
    chan = {key: c for c, key in enumerate(model.label_order)}
    present = g_in.rel_edges if task == "RSGRN" else frozenset()
    ranked = []
    ids = t.id_order
    for i, src in enumerate(ids):
        ci = g_in.nodes[src].cls
        for j, dst in enumerate(ids):
            if i == j:
                continue
            cj = g_in.nodes[dst].cls
            for lab in RelationshipLabel:
                if not lab.allows(ci, cj) or (src, dst, lab) in present:
                    continue
                c = chan.get(REL_PREFIX + lab.value)
                if c is None:
                    continue
                ranked.append((src, dst, lab, float(A[i, j] * E[i, j, c])))
    ranked.sort(key=lambda r: (-r[3], r[0], r[1], r[2].value))
    return ranked
