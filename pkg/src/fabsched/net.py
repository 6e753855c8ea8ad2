"""Attention scoring network over the set of dispatchable lots.

A learned 12-dim row per tool family is added to each normalized lot vector;
the result passes through a two-head scaled dot-product self-attention
sub-layer wrapped in a scaled residual y = alpha*x + beta*attn(alpha*x).
Two heads read y: a three-layer tanh feed-forward head emitting one priority
score per lot (policy), and a linear-softmax head emitting a distribution
over tool families (pretext classification). The pretext loss has a full
analytic backward pass; the policy head is trained derivative-free.

All math is float64 numpy; forward passes are pure and size-invariant in the
number of lots.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MODEL_DIM = 12
HEAD_DIM = 6
FFN_DIM = 16
PARAMS_FORMAT_VERSION = 1

# flat-vector packing order; "encoding" is the only block frozen after pretext
BLOCK_ORDER = (
    "encoding",
    "q1", "k1", "v1",
    "q2", "k2", "v2",
    "w_out",
    "alpha", "beta",
    "w1", "b1", "w2", "b2", "w3", "b3",
    "wc", "bc",
)


@dataclass(frozen=True)
class LotBatch:
    """Normalized feature rows plus the tool family index of each lot."""

    x: np.ndarray  # (n, 12) float64
    fam: np.ndarray  # (n,) int64

    def __post_init__(self):
        if self.x.ndim != 2 or self.x.shape[1] != MODEL_DIM:
            raise ValueError(f"batch features must be (n, {MODEL_DIM}), got {self.x.shape}")
        if self.x.shape[0] < 1:
            raise ValueError("batch must contain at least one lot")
        if self.fam.shape != (self.x.shape[0],):
            raise ValueError("family indices must align with feature rows")


@dataclass
class PolicyParams:
    encoding: np.ndarray  # (F, 12)
    q1: np.ndarray
    k1: np.ndarray
    v1: np.ndarray
    q2: np.ndarray
    k2: np.ndarray
    v2: np.ndarray
    w_out: np.ndarray  # (12, 12)
    alpha: float
    beta: float
    w1: np.ndarray  # (12, 16)
    b1: np.ndarray
    w2: np.ndarray  # (16, 16)
    b2: np.ndarray
    w3: np.ndarray  # (16, 1)
    b3: np.ndarray
    wc: np.ndarray  # (12, F)
    bc: np.ndarray
    frozen: frozenset[str] = field(default_factory=frozenset)

    @property
    def family_count(self) -> int:
        return self.encoding.shape[0]

    def block(self, name: str) -> np.ndarray:
        value = getattr(self, name)
        if name in ("alpha", "beta"):
            return np.array([value], dtype=np.float64)
        return value

    def block_shapes(self) -> dict[str, tuple[int, ...]]:
        return {name: self.block(name).shape for name in BLOCK_ORDER}

    def trainable_blocks(self) -> tuple[str, ...]:
        return tuple(name for name in BLOCK_ORDER if name not in self.frozen)

    def to_flat(self, names: tuple[str, ...] | None = None) -> np.ndarray:
        names = names or self.trainable_blocks()
        return np.concatenate([self.block(n).ravel() for n in names])

    def with_flat(self, vec: np.ndarray, names: tuple[str, ...] | None = None) -> "PolicyParams":
        names = names or self.trainable_blocks()
        updates: dict[str, object] = {}
        offset = 0
        for name in names:
            shape = self.block(name).shape
            size = int(np.prod(shape))
            chunk = vec[offset:offset + size]
            offset += size
            if name in ("alpha", "beta"):
                updates[name] = float(chunk[0])
            else:
                updates[name] = chunk.reshape(shape).copy()
        if offset != vec.size:
            raise ValueError(f"flat vector has {vec.size} entries, expected {offset}")
        return replace(self, **updates)

    def copy(self) -> "PolicyParams":
        updates = {
            name: (getattr(self, name) if name in ("alpha", "beta") else getattr(self, name).copy())
            for name in BLOCK_ORDER
        }
        return replace(self, **updates)


def init_params(seed: int, family_count: int) -> PolicyParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights; the residual starts
    as the identity (alpha=1, beta=0)."""
    if family_count < 1:
        raise ValueError("family_count must be >= 1")
    rng = np.random.default_rng(seed)

    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    return PolicyParams(
        encoding=uniform((family_count, MODEL_DIM), MODEL_DIM),
        q1=uniform((MODEL_DIM, HEAD_DIM), MODEL_DIM),
        k1=uniform((MODEL_DIM, HEAD_DIM), MODEL_DIM),
        v1=uniform((MODEL_DIM, HEAD_DIM), MODEL_DIM),
        q2=uniform((MODEL_DIM, HEAD_DIM), MODEL_DIM),
        k2=uniform((MODEL_DIM, HEAD_DIM), MODEL_DIM),
        v2=uniform((MODEL_DIM, HEAD_DIM), MODEL_DIM),
        w_out=uniform((MODEL_DIM, MODEL_DIM), MODEL_DIM),
        alpha=1.0,
        beta=0.0,
        w1=uniform((MODEL_DIM, FFN_DIM), MODEL_DIM),
        b1=uniform((FFN_DIM,), MODEL_DIM),
        w2=uniform((FFN_DIM, FFN_DIM), FFN_DIM),
        b2=uniform((FFN_DIM,), FFN_DIM),
        w3=uniform((FFN_DIM, 1), FFN_DIM),
        b3=uniform((1,), FFN_DIM),
        wc=uniform((MODEL_DIM, family_count), MODEL_DIM),
        bc=uniform((family_count,), MODEL_DIM),
    )


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def encode(params: PolicyParams, batch: LotBatch) -> np.ndarray:
    """Add the learned family row to each lot vector."""
    if batch.fam.min() < 0 or batch.fam.max() >= params.family_count:
        raise ValueError("family index out of range")
    return batch.x + params.encoding[batch.fam]


def attention_forward(params: PolicyParams, x: np.ndarray) -> np.ndarray:
    """Two-head scaled dot-product self-attention plus output projection."""
    heads = []
    for q_w, k_w, v_w in ((params.q1, params.k1, params.v1), (params.q2, params.k2, params.v2)):
        q = x @ q_w
        k = x @ k_w
        v = x @ v_w
        p = _softmax_rows((q @ k.T) / np.sqrt(HEAD_DIM))
        heads.append(p @ v)
    return np.concatenate(heads, axis=1) @ params.w_out


def _trunk(params: PolicyParams, batch: LotBatch, cache: dict | None = None) -> np.ndarray:
    s = encode(params, batch)
    x = params.alpha * s
    heads = []
    head_cache = []
    for q_w, k_w, v_w in ((params.q1, params.k1, params.v1), (params.q2, params.k2, params.v2)):
        q = x @ q_w
        k = x @ k_w
        v = x @ v_w
        p = _softmax_rows((q @ k.T) / np.sqrt(HEAD_DIM))
        heads.append(p @ v)
        head_cache.append((q, k, v, p))
    concat = np.concatenate(heads, axis=1)
    attn = concat @ params.w_out
    y = x + params.beta * attn
    if cache is not None:
        cache.update(s=s, x=x, heads=head_cache, concat=concat, attn=attn, y=y)
    return y


def forward_policy(params: PolicyParams, batch: LotBatch) -> np.ndarray:
    """One priority score per lot."""
    y = _trunk(params, batch)
    h1 = np.tanh(y @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    return (h2 @ params.w3 + params.b3).ravel()


def forward_pretext(params: PolicyParams, batch: LotBatch) -> np.ndarray:
    """One probability row over tool families per lot."""
    y = _trunk(params, batch)
    return _softmax_rows(y @ params.wc + params.bc)


def pretext_loss(params: PolicyParams, batch: LotBatch, labels: np.ndarray, lam: float) -> float:
    probs = forward_pretext(params, batch)
    n = batch.x.shape[0]
    with np.errstate(divide="ignore"):  # log(0) -> inf flags divergence upstream
        ce = -np.log(probs[np.arange(n), labels]).mean()
    return float(ce + lam * np.sum(params.encoding**2))


def backward_pretext(
    params: PolicyParams, batch: LotBatch, labels: np.ndarray, lam: float
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss and analytic gradients of mean cross-entropy + lam*||encoding||^2
    for every parameter block (policy-head blocks get zero gradients: they do
    not participate in the pretext forward)."""
    n = batch.x.shape[0]
    if labels.shape != (n,) or labels.min() < 0 or labels.max() >= params.family_count:
        raise ValueError("labels must be valid family indices, one per lot")
    cache: dict = {}
    y = _trunk(params, batch, cache)
    logits = y @ params.wc + params.bc
    probs = _softmax_rows(logits)
    with np.errstate(divide="ignore"):  # log(0) -> inf flags divergence upstream
        ce = -np.log(probs[np.arange(n), labels]).mean()
    loss = float(ce + lam * np.sum(params.encoding**2))

    d_logits = probs.copy()
    d_logits[np.arange(n), labels] -= 1.0
    d_logits /= n

    grads: dict[str, np.ndarray] = {
        name: np.zeros_like(params.block(name)) for name in BLOCK_ORDER
    }
    grads["wc"] = y.T @ d_logits
    grads["bc"] = d_logits.sum(axis=0)
    dy = d_logits @ params.wc.T

    x, attn, concat = cache["x"], cache["attn"], cache["concat"]
    grads["beta"] = np.array([np.sum(dy * attn)])
    d_attn = params.beta * dy
    grads["w_out"] = concat.T @ d_attn
    d_concat = d_attn @ params.w_out.T

    dx = dy.copy()
    head_weights = ((params.q1, params.k1, params.v1), (params.q2, params.k2, params.v2))
    for h, (q_w, k_w, v_w) in enumerate(head_weights):
        q, k, v, p = cache["heads"][h]
        d_head = d_concat[:, h * HEAD_DIM:(h + 1) * HEAD_DIM]
        d_p = d_head @ v.T
        d_v = p.T @ d_head
        d_scores = p * (d_p - (d_p * p).sum(axis=1, keepdims=True))
        d_scores /= np.sqrt(HEAD_DIM)
        d_q = d_scores @ k
        d_k = d_scores.T @ q
        prefix = f"q{h + 1}", f"k{h + 1}", f"v{h + 1}"
        grads[prefix[0]] = x.T @ d_q
        grads[prefix[1]] = x.T @ d_k
        grads[prefix[2]] = x.T @ d_v
        dx += d_q @ q_w.T + d_k @ k_w.T + d_v @ v_w.T

    s = cache["s"]
    grads["alpha"] = np.array([np.sum(dx * s)])
    ds = params.alpha * dx
    d_enc = np.zeros_like(params.encoding)
    np.add.at(d_enc, batch.fam, ds)
    grads["encoding"] = d_enc + 2.0 * lam * params.encoding
    return loss, grads


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_params(path: str | Path, params: PolicyParams, meta: dict | None = None) -> None:
    """Write the parameter blocks with a JSON manifest (format version, family
    count, frozen blocks, plus any caller metadata such as seeds or an
    embedded normalizer)."""
    doc = dict(meta or {})
    doc.update(
        format_version=PARAMS_FORMAT_VERSION,
        family_count=params.family_count,
        frozen=sorted(params.frozen),
        block_order=list(BLOCK_ORDER),
    )
    arrays = {name: params.block(name) for name in BLOCK_ORDER}
    np.savez_compressed(path, __meta__=np.array(json.dumps(doc)), **arrays)


def load_params(path: str | Path) -> tuple[PolicyParams, dict]:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        if meta.get("format_version") != PARAMS_FORMAT_VERSION:
            raise ValueError(f"unsupported params file version: {meta.get('format_version')}")
        kwargs = {}
        for name in BLOCK_ORDER:
            arr = data[name].astype(np.float64)
            kwargs[name] = float(arr[0]) if name in ("alpha", "beta") else arr
    params = PolicyParams(frozen=frozenset(meta.get("frozen", ())), **kwargs)
    return params, meta
