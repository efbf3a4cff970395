"""Training samples, the optimisation loop, and recall evaluation for the three tasks."""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .bev import rasterize_bev
from .errors import ConfigError, NaNLossError, TaskMismatchError
from .graph import RoadSceneGraph, mask_edges
from .labels import NodeClass
from .model import TASKS, VGAE, ModelConfig, Standardizer, _combine, kl_loss, make_batch, \
    predict_relationships, recon_terms, sample_latent
from .roadmap import RoadMap

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "steps", "loss", "adj", "feat", "edge", "cont", "kl")


@dataclass(frozen=True)
class TrainConfig:
    task: str = "RSGRN"
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    mask_k: int = 3
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {', '.join(TASKS)}")
        if self.epochs < 0 or self.batch_size < 1 or self.mask_k < 0:
            raise ConfigError("train.epochs >= 0, train.batch_size >= 1 and train.mask_k >= 0 are required")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ConfigError("train.lr must be positive")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("train.test_fraction must lie in [0, 1)")


@dataclass(frozen=True)
class Sample:
    """One (input, target) pair with the triples that recall is measured against."""
    scene: int
    source: RoadSceneGraph
    target: RoadSceneGraph
    gt: frozenset
    bev: np.ndarray | None = None


def graph_anchor(g: RoadSceneGraph) -> tuple[float, float]:
    """Centroid of the non-infrastructure nodes (origin for an empty scene)."""
    pts = [(f.x, f.y) for f in g.nodes.values() if f.cls is not NodeClass.TrafficSign]
    if not pts:
        return (0.0, 0.0)
    return tuple(np.mean(np.asarray(pts), axis=0).tolist())


def bev_for(g: RoadSceneGraph, m: RoadMap, cfg: ModelConfig) -> np.ndarray:
    return rasterize_bev(m, size=cfg.bev_size, extent=cfg.bev_extent, anchor=graph_anchor(g)).data


def mask_seed(seed: int, scene: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, scene, index]).generate_state(1)[0])


def build_samples(scenes: Sequence[Sequence[RoadSceneGraph]], task: str, mask_k: int = 3, seed: int = 0,
                  bev_map: RoadMap | None = None, model_cfg: ModelConfig | None = None) -> list[Sample]:
    """RSGRN: masked graph -> full graph.  NGPGV(EB): graph t -> graph t+1 of the same scene."""
    if task not in TASKS:
        raise TaskMismatchError(f"unknown task {task!r}")
    if task == "NGPGVEB" and bev_map is None:
        raise TaskMismatchError("NGPGVEB samples need the road map for BEV rasters")
    out = []
    for si, graphs in enumerate(scenes):
        if task == "RSGRN":
            for gi, g in enumerate(graphs):
                masked, removed = mask_edges(g, mask_k, mask_seed(seed, si, gi))
                out.append(Sample(si, masked, g, frozenset(removed)))
        else:
            for a, b in zip(graphs, graphs[1:]):
                bev = bev_for(a, bev_map, model_cfg or ModelConfig(task=task)) if task == "NGPGVEB" else None
                out.append(Sample(si, a, b, frozenset(b.rel_edges), bev))
    return out


def split_scenes(n_scenes: int, test_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Deterministic scene-level split; at least one training scene when any exist."""
    order = np.random.default_rng(seed).permutation(n_scenes).tolist()
    n_test = min(int(round(test_fraction * n_scenes)), max(n_scenes - 1, 0))
    return sorted(order[n_test:]), sorted(order[:n_test])


def fit_standardizer(samples: Sequence[Sample], cfg: ModelConfig, label_order=None) -> Standardizer:
    from .graph import to_tensors

    graphs = {id(g): g for s in samples for g in (s.source, s.target)}
    return Standardizer.fit([to_tensors(g, cfg.k_max, label_order) for g in graphs.values()])


def _prepared(model: VGAE, samples: Sequence[Sample]):
    inputs, targets = [], []
    for s in samples:
        t_in = model.prepare(s.source)
        inputs.append(t_in)
        targets.append(model.prepare(s.target, id_order=t_in.id_order))
    return inputs, targets


def train(model: VGAE, samples: Sequence[Sample], tcfg: TrainConfig,
          on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Adam on recon + beta * KL; one row of mean losses per epoch."""
    if tcfg.task != model.cfg.task:
        raise TaskMismatchError(f"model is configured for {model.cfg.task}, training asked for {tcfg.task}")
    if tcfg.epochs and not samples:
        raise TaskMismatchError("no training samples for this task")
    if model.cfg.task == "NGPGVEB" and any(s.bev is None for s in samples):
        raise TaskMismatchError("NGPGVEB training samples need BEV rasters")
    rng = np.random.default_rng(tcfg.seed)
    inputs, targets = _prepared(model, samples)
    state = ad.AdamState(model.params, lr=tcfg.lr)
    w = model.cfg.weights
    rows = []
    steps = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = rng.permutation(len(samples))
        sums = dict.fromkeys(LOG_COLUMNS[2:], 0.0)
        for lo in range(0, len(order), tcfg.batch_size):
            idx = order[lo:lo + tcfg.batch_size]
            batch = make_batch([inputs[i] for i in idx])
            mu, logvar = model.encode(batch)
            z = sample_latent(mu, logvar, rng)
            code = model.encode_bev(np.stack([samples[i].bev for i in idx])) if model.cfg.task == "NGPGVEB" else None
            out = model.decode(z, code)
            terms = recon_terms([targets[i] for i in idx], out)
            kl = ad.mul(kl_loss(mu, logvar), 1.0 / len(idx))
            loss = ad.add(_combine(terms, w), ad.mul(kl, w.beta_kl))
            value = float(loss.data)
            if not math.isfinite(value):
                parts = ", ".join(f"{k}={float(getattr(v, 'data', v))!r}" for k, v in terms.items())
                raise NaNLossError(f"non-finite loss at epoch {epoch} step {steps + 1}: {parts}, kl={float(kl.data)!r}")
            ad.backward(loss)
            ad.adam_step(model.params, state)
            ad.zero_grads(model.params.values())
            steps += 1
            sums["loss"] += value * len(idx)
            sums["kl"] += float(kl.data) * len(idx)
            for key in ("adj", "feat", "edge", "cont"):
                sums[key] += float(getattr(terms[key], "data", terms[key])) * len(idx)
        row = {"epoch": epoch, "steps": steps, **{k: v / len(samples) for k, v in sums.items()}}
        rows.append(row)
        if on_epoch:
            on_epoch(row)
    return rows


def format_log(rows: Sequence[dict]) -> str:
    lines = [",".join(LOG_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r[c]) if c in ("epoch", "steps") else repr(float(r[c])) for c in LOG_COLUMNS))
    return "\n".join(lines) + "\n"


def evaluate(model: VGAE, samples: Sequence[Sample], ks: Sequence[int]) -> dict[int, float]:
    """Mean scene-wise R@k (percent) over ``samples``."""
    from .analysis import recall_at_k

    if not samples:
        raise TaskMismatchError("cannot evaluate an empty corpus")
    totals = dict.fromkeys(ks, 0.0)
    for s in samples:
        ranked = predict_relationships(s.source, model, bev=s.bev)
        triples = [(a, b, lab) for a, b, lab, _ in ranked]
        for k in ks:
            totals[k] += recall_at_k(triples, s.gt, k)
    return {k: 100.0 * v / len(samples) for k, v in totals.items()}


def with_task(cfg: ModelConfig, task: str, pooling: str | None = None) -> ModelConfig:
    return dataclasses.replace(cfg, task=task, pooling=pooling or cfg.pooling)
