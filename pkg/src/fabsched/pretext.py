"""Self-supervised pretraining of the tool-family encoding.

A reference simulation run is replayed once, recording the normalized lot
batch at every decision point; the network is then trained with plain SGD to
predict each lot's tool family from its own (encoding-augmented) row, with an
L2 penalty keeping the encoding rows small. Afterwards the attention and
classifier weights are re-initialized for downstream training and only the
learned encoding survives, marked frozen.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import net, scenario as scenario_mod, sim
from .features import Normalizer, extract_matrix
from .net import LotBatch, PolicyParams
from .rng import derive_seed
from .scenario import MINUTES_PER_DAY, Scenario
from .sim import Dispatcher

DATASET_FORMAT_VERSION = 1
TWO_MONTHS_MINUTES = 60 * MINUTES_PER_DAY


@dataclass
class PretextDataset:
    items: list[LotBatch]
    source_seed: int
    dispatcher_name: str = ""

    def __len__(self) -> int:
        return len(self.items)

    def lot_count(self) -> int:
        return sum(b.x.shape[0] for b in self.items)


@dataclass
class SslResult:
    params: PolicyParams  # downstream-ready: fresh trunk, frozen encoding
    pretext_params: PolicyParams  # the fully trained pretext network
    history: list[dict] = field(default_factory=list)


@dataclass(frozen=True)
class SslConfig:
    weight_decay: float = 0.2  # L2 coefficient on the encoding block
    learning_rate: float = 0.01
    max_epochs: int = 200
    tol: float = 1e-4  # relative epoch-loss improvement considered converged
    seed: int = 0

    def __post_init__(self):
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


class _BatchCollector:
    """Dispatcher wrapper recording one normalized batch per decision point."""

    def __init__(self, inner: Dispatcher, normalizer: Normalizer):
        self.inner = inner
        self.normalizer = normalizer
        self.items: list[LotBatch] = []

    def __call__(self, st, legal):
        x, fam = extract_matrix(st, legal)
        self.items.append(LotBatch(x=self.normalizer.normalize_matrix(x), fam=fam))
        return self.inner(st, legal)


def collect_dataset(
    s: Scenario,
    dispatcher: Dispatcher,
    normalizer: Normalizer,
    horizon: int = TWO_MONTHS_MINUTES,
    seed: int = 0,
    initial_wip: int = 0,
    dispatcher_name: str = "",
) -> PretextDataset:
    collector = _BatchCollector(dispatcher, normalizer)
    sim.run(s, seed, collector, horizon, initial_wip=initial_wip, trace_enabled=False)
    if not collector.items:
        raise ValueError("simulation produced no decision points; nothing to collect")
    return PretextDataset(items=collector.items, source_seed=seed, dispatcher_name=dispatcher_name)


def train_pretext(
    dataset: PretextDataset, params: PolicyParams, cfg: SslConfig
) -> SslResult:
    """SGD over decision-point batches until the epoch-mean loss converges.

    The result carries both the downstream-ready parameters (fresh trunk and
    classifier draw, the trained encoding kept and frozen) and the fully
    trained pretext network, which is what held-out accuracy is measured on.
    """
    if not dataset.items:
        raise ValueError("dataset is empty")
    current = params.copy()
    rng = np.random.default_rng(derive_seed(cfg.seed, "ssl-shuffle"))
    history: list[dict] = []
    prev_loss = None
    for epoch in range(cfg.max_epochs):
        order = rng.permutation(len(dataset.items))
        losses = []
        for idx in order:
            batch = dataset.items[idx]
            loss, grads = net.backward_pretext(current, batch, batch.fam, cfg.weight_decay)
            losses.append(loss)
            if not np.isfinite(loss):
                raise RuntimeError(
                    f"pretext training diverged at epoch {epoch} (loss={loss}); "
                    f"lower the learning rate ({cfg.learning_rate})"
                )
            if cfg.learning_rate != 0.0:
                for name in net.BLOCK_ORDER:
                    if name in ("alpha", "beta"):
                        value = getattr(current, name) - cfg.learning_rate * float(grads[name][0])
                        setattr(current, name, value)
                    else:
                        block = getattr(current, name)
                        block -= cfg.learning_rate * grads[name]
        epoch_loss = float(np.mean(losses))
        history.append(
            {
                "epoch": epoch,
                "loss": epoch_loss,
                "encoding_norm": float(np.linalg.norm(current.encoding)),
            }
        )
        if prev_loss is not None and abs(prev_loss - epoch_loss) <= cfg.tol * max(1.0, abs(prev_loss)):
            break
        prev_loss = epoch_loss

    # the trunk and classifier are discarded for the downstream phase; only
    # the trained encoding is carried over, and nothing may update it later
    fresh = net.init_params(derive_seed(cfg.seed, "downstream-init"), params.family_count)
    fresh.encoding = current.encoding.copy()
    fresh.frozen = frozenset({"encoding"})
    return SslResult(params=fresh, pretext_params=current, history=history)


def pretext_accuracy(params: PolicyParams, dataset: PretextDataset) -> float:
    """Fraction of lots whose argmax predicted family matches the truth."""
    correct = 0
    total = 0
    for batch in dataset.items:
        probs = net.forward_pretext(params, batch)
        correct += int((probs.argmax(axis=1) == batch.fam).sum())
        total += batch.fam.size
    if total == 0:
        raise ValueError("dataset contains no lots")
    return correct / total


# ---------------------------------------------------------------------------
# Dataset cache
# ---------------------------------------------------------------------------


def dataset_cache_key(s: Scenario, dispatcher_name: str, horizon: int, seed: int) -> str:
    digest = hashlib.sha256()
    digest.update(json.dumps(scenario_mod.to_dict(s), sort_keys=True).encode())
    digest.update(f"|{dispatcher_name}|{horizon}|{seed}|v{DATASET_FORMAT_VERSION}".encode())
    return digest.hexdigest()[:16]


def save_dataset(dataset: PretextDataset, path: str | Path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for i, batch in enumerate(dataset.items):
        arrays[f"x{i}"] = batch.x
        arrays[f"f{i}"] = batch.fam
    meta = {
        "format_version": DATASET_FORMAT_VERSION,
        "count": len(dataset.items),
        "source_seed": dataset.source_seed,
        "dispatcher_name": dataset.dispatcher_name,
    }
    np.savez_compressed(path, __meta__=np.array(json.dumps(meta)), **arrays)


def load_dataset(path: str | Path) -> PretextDataset:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != DATASET_FORMAT_VERSION:
            raise ValueError(f"unsupported dataset version {meta.get('format_version')}")
        items = [
            LotBatch(x=data[f"x{i}"].astype(np.float64), fam=data[f"f{i}"].astype(np.int64))
            for i in range(meta["count"])
        ]
    return PretextDataset(
        items=items, source_seed=meta["source_seed"], dispatcher_name=meta["dispatcher_name"]
    )
