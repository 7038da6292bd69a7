"""Attention-based normal regression network with a learnable softmax temperature.

Pipeline for one mean-centered patch of ``k`` points:

1. a shared 3-layer per-point MLP lifts coordinates to features ``F`` (k x D);
2. temperature-adjusted multi-head self-attention mixes the rows of ``F``;
3. a two-layer feed-forward network transforms each row;
4. a column-wise max over rows pools a D-dim patch descriptor;
5. fully connected layers regress a 3-vector, L2-normalized to a unit normal.

All heads share one temperature ``t = exp(log_t)``, so ``t`` stays positive
under unconstrained optimisation. Features are divided by ``t`` before the
query/key/value projections.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import Patch

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"ATTNRM"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    k: int = 50
    D: int = 64
    H: int = 4
    mlp_widths: tuple = (32, 64, 64)
    ffn_hidden: int = 128
    fc_widths: tuple = (64, 32, 3)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "mlp_widths", tuple(int(w) for w in self.mlp_widths))
        object.__setattr__(self, "fc_widths", tuple(int(w) for w in self.fc_widths))
        if self.H < 1 or self.D < self.H:
            raise ValueError("need H >= 1 and D >= H")
        if self.D % self.H:
            raise ValueError("H must divide D")
        if len(self.mlp_widths) != 3 or self.mlp_widths[-1] != self.D:
            raise ValueError("mlp_widths must have 3 entries ending in D")
        if not self.fc_widths or self.fc_widths[-1] != 3:
            raise ValueError("fc_widths must end in 3")
        if self.k < 1:
            raise ValueError("k must be positive")

    @property
    def head_dim(self) -> int:
        return self.D // self.H


@dataclass
class TrainConfig:
    epochs: int = 900
    batch_size: int = 256
    lr: float = 5e-4
    lr_decay: float = 10.0
    decay_epochs: tuple = (400, 800)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    learn_temperature: bool = True

    def __post_init__(self):
        self.decay_epochs = tuple(int(e) for e in self.decay_epochs)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 0-based epoch index."""
        drops = sum(1 for e in self.decay_epochs if epoch >= e)
        return self.lr / self.lr_decay**drops


class ModelParams:
    """Named learnable tensors in a fixed order, plus the log-temperature."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def log_t(self) -> Tensor:
        return self.tensors["log_t"]

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_t.item()))

    def copy(self) -> "ModelParams":
        return ModelParams({name: Tensor(t.data.copy(), requires_grad=True, name=name) for name, t in self.items()})

    def state(self) -> dict:
        return {name: t.data.copy() for name, t in self.items()}


@dataclass
class AttentionMap:
    """Per-head (k x k) row-stochastic attention and the mean attention each neighbour receives.

    Columns are ordered by neighbour rank, nearest first.
    """

    per_head: np.ndarray
    received: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.received is None:
            self.received = self.per_head.mean(axis=(0, 1))


@dataclass
class PatchSet:
    """Stacked training/evaluation patches: coords (N, k, 3) and target normals (N, 3)."""

    coords: np.ndarray
    normals: np.ndarray

    @classmethod
    def from_pairs(cls, pairs) -> "PatchSet":
        pairs = list(pairs)
        if not pairs:
            raise ValueError("empty dataset")
        coords = np.stack([p.centered_coords if isinstance(p, Patch) else np.asarray(p) for p, _ in pairs])
        normals = np.stack([np.asarray(n, dtype=np.float64) for _, n in pairs])
        return cls(coords, normals)

    def __len__(self):
        return len(self.coords)


def _kaiming_uniform(rng, fan_in, fan_out):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def init_params(cfg: ModelConfig) -> ModelParams:
    """Kaiming-uniform weights, zero biases, temperature 1."""
    rng = np.random.default_rng(cfg.seed)
    tensors = {}

    def linear(name, fan_in, fan_out, bias=True):
        tensors[f"{name}.w"] = _kaiming_uniform(rng, fan_in, fan_out)
        if bias:
            tensors[f"{name}.b"] = np.zeros((1, fan_out))

    width = 3
    for i, w in enumerate(cfg.mlp_widths):
        linear(f"mlp{i}", width, w)
        width = w
    for h in range(cfg.H):
        for proj in ("q", "k", "v"):
            tensors[f"attn{h}.w{proj}"] = _kaiming_uniform(rng, cfg.D, cfg.head_dim)
    linear("attn.o", cfg.H * cfg.head_dim, cfg.D, bias=False)
    linear("ffn0", cfg.D, cfg.ffn_hidden)
    linear("ffn1", cfg.ffn_hidden, cfg.D)
    width = cfg.D
    for i, w in enumerate(cfg.fc_widths):
        linear(f"fc{i}", width, w)
        width = w
    tensors["log_t"] = np.zeros((1, 1))
    return ModelParams({name: Tensor(value, requires_grad=True, name=name) for name, value in tensors.items()})


def _input_tensor(patch) -> Tensor:
    if isinstance(patch, Tensor):
        return patch
    coords = patch.centered_coords if isinstance(patch, Patch) else np.asarray(patch, dtype=np.float64)
    return Tensor(coords)


def _linear(x, params, name, activation=True):
    y = ad.matmul(x, params[f"{name}.w"])
    if f"{name}.b" in params.tensors:
        y = ad.add(y, params[f"{name}.b"])
    return ad.relu(y) if activation else y


def n_layers(params: ModelParams, prefix: str) -> int:
    """Number of ``<prefix><i>.w`` weights, e.g. 3 for ``mlp0.w .. mlp2.w``."""
    count = 0
    while f"{prefix}{count}.w" in params.tensors:
        count += 1
    return count


def mlp_features(patch, params: ModelParams) -> Tensor:
    """Shared per-point MLP: (…, k, 3) coords -> (…, k, D) features."""
    x = _input_tensor(patch)
    if x.shape[-1] != 3:
        raise ValueError(f"expected (k, 3) coordinates, got {x.shape}")
    for i in range(n_layers(params, "mlp")):
        x = _linear(x, params, f"mlp{i}")
    return x


def temperature_tensor(params: ModelParams) -> Tensor:
    return ad.exp(params.log_t)


def _attend(ft: Tensor, wq: Tensor, wk: Tensor, wv: Tensor):
    # the 1/sqrt(d_h) factor is applied to the queries: cheaper than scaling k x k logits
    q = ad.scalar_mul(ad.matmul(ft, wq), 1.0 / np.sqrt(wk.shape[1]))
    key = ad.matmul(ft, wk)
    v = ad.matmul(ft, wv)
    attn = ad.softmax_rows(ad.matmul(q, ad.transpose(key)))
    return ad.matmul(attn, v), attn.data


def _temperature_divide(F: Tensor, t):
    t = t if isinstance(t, Tensor) else Tensor(t)
    if t.item() <= 0:
        raise ValueError("non-positive temperature")
    return ad.scalar_div(F, t)


def tsa(F: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, t):
    """Temperature-adjusted self-attention for one head.

    Returns ``(output (…, k, d_h), attention weights (…, k, k))``. The logits
    are scaled by ``1/sqrt(d_h)`` where ``d_h`` is the key width.
    """
    if F.shape[-1] != wq.shape[0]:
        raise ValueError(f"feature width {F.shape[-1]} does not match projection {wq.shape}")
    return _attend(_temperature_divide(F, t), wq, wk, wv)


def tmhsa(F: Tensor, params: ModelParams, return_attention: bool = False):
    """Concatenate all heads' TSA outputs and project with ``W_o`` back to width D."""
    # one shared temperature, so F/t is computed once for all heads
    ft = _temperature_divide(F, temperature_tensor(params))
    heads, maps = [], []
    h = 0
    while f"attn{h}.wq" in params.tensors:
        out, attn = _attend(ft, params[f"attn{h}.wq"], params[f"attn{h}.wk"], params[f"attn{h}.wv"])
        heads.append(out)
        maps.append(attn)
        h += 1
    cat = heads[0] if len(heads) == 1 else ad.concat_cols(*heads)
    out = ad.matmul(cat, params["attn.o.w"])
    if return_attention:
        return out, np.stack(maps, axis=-3)
    return out


def forward_tensor(patch, params: ModelParams):
    """Full forward pass returning ``(unit normal tensor (…, 1, 3), attention (…, H, k, k))``."""
    f = mlp_features(patch, params)
    f1, attention = tmhsa(f, params, return_attention=True)
    f2 = _linear(_linear(f1, params, "ffn0"), params, "ffn1", activation=False)
    x = ad.max_rows(f2)
    n_fc = n_layers(params, "fc")
    for i in range(n_fc):
        x = _linear(x, params, f"fc{i}", activation=i < n_fc - 1)
    return ad.l2_normalize_row(x), attention


def forward(patch, params: ModelParams):
    """Predict the unit normal of one patch; returns ``(normal (3,), AttentionMap)``."""
    with ad.no_grad():
        pred, attention = forward_tensor(patch, params)
    return pred.data.reshape(3), AttentionMap(attention)


def export_attention(patch, params: ModelParams) -> AttentionMap:
    return forward(patch, params)[1]


def predict_normals(coords, params: ModelParams, batch_size: int = 512) -> np.ndarray:
    """Batched inference over (M, k, 3) patches."""
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty((len(coords), 3))
    with ad.no_grad():
        for start in range(0, len(coords), batch_size):
            pred, _ = forward_tensor(coords[start:start + batch_size], params)
            out[start:start + batch_size] = pred.data[:, 0, :]
    return out


def predict_attention(coords, params: ModelParams, batch_size: int = 512) -> np.ndarray:
    """Per-patch received attention (M, k), averaged over heads and query rows."""
    coords = np.asarray(coords, dtype=np.float64)
    out = np.empty(coords.shape[:2])
    with ad.no_grad():
        for start in range(0, len(coords), batch_size):
            _, attention = forward_tensor(coords[start:start + batch_size], params)
            out[start:start + batch_size] = attention.mean(axis=(1, 2))
    return out


def sine_loss(pred, gt) -> Tensor:
    """``|pred x gt| / (|pred| |gt|)`` per row: (…, r, 3) -> (…, r, 1)."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    gt = gt if isinstance(gt, Tensor) else Tensor(gt)
    if gt.shape != pred.shape:
        gt = Tensor(np.broadcast_to(gt.data, pred.shape).copy())
    if not (np.all(np.any(pred.data != 0, axis=-1)) and np.all(np.any(gt.data != 0, axis=-1))):
        raise ValueError("zero vector in loss")
    return ad.div(ad.norm2(ad.cross3(pred, gt)), ad.mul(ad.norm2(pred), ad.norm2(gt)))


def batch_loss(coords, normals, params: ModelParams) -> Tensor:
    """Mean sine loss of a batch of patches (a 1x1 tensor)."""
    pred, _ = forward_tensor(Tensor(coords), params)
    target = Tensor(np.asarray(normals, dtype=np.float64)[:, None, :])
    return ad.mean_all(sine_loss(pred, target))


# ---------------------------------------------------------------------------
# optimisation
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params, grads: dict, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update (no weight decay), applied in place.

    ``params`` maps names to tensors (a :class:`ModelParams` or plain dict);
    ``grads`` maps the same names to arrays. Parameters missing from ``grads``
    are left untouched.
    """
    for g in grads.values():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("diverged")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def _as_patchset(dataset) -> PatchSet:
    if isinstance(dataset, PatchSet):
        return dataset
    return PatchSet.from_pairs(dataset)


def train(dataset, cfg: TrainConfig, mcfg: ModelConfig, params: ModelParams | None = None, callback=None):
    """Minimise mean sine loss with Adam over shuffled mini-batches.

    Returns ``(params, losses)`` where ``losses[e]`` is the sample-weighted mean
    training loss seen during epoch ``e``. Deterministic for fixed seeds.
    """
    data = _as_patchset(dataset)
    if len(data) == 0:
        raise ValueError("empty dataset")
    params = init_params(mcfg) if params is None else params
    trainable = [name for name in params if cfg.learn_temperature or name != "log_t"]
    leaves = {params[name]: name for name in trainable}
    for name, tensor in params.items():
        tensor.requires_grad = name in trainable
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    losses = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = rng.permutation(len(data))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = batch_loss(data.coords[idx], data.normals[idx], params)
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"diverged: non-finite loss at epoch {epoch}")
            grads = {leaves[leaf]: g for leaf, g in ad.backward(loss).items()}
            adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += value * len(idx)
        losses.append(total / len(data))
        logger.debug("epoch %d lr %.2e loss %.6f t %.4f", epoch, lr, losses[-1], params.temperature)
        if callback is not None:
            callback(epoch, losses[-1], params)
    for tensor in params.tensors.values():
        tensor.requires_grad = True
    return params, losses


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(path, mcfg: ModelConfig, params: ModelParams, extra: dict | None = None):
    """Write config + tensors: magic, version, JSON header length, header, raw float64 data."""
    names = list(params)
    header = {
        "config": asdict(mcfg),
        "tensors": [[name, list(params[name].shape)] for name in names],
        "extra": extra or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for name in names:
            fh.write(np.ascontiguousarray(params[name].data, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(ModelConfig, ModelParams, extra)``."""
    with open(path, "rb") as fh:
        if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a model checkpoint")
        version, size = struct.unpack("<II", fh.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        header = json.loads(fh.read(size))
        tensors = {}
        for name, shape in header["tensors"]:
            count = int(np.prod(shape))
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise ValueError(f"{path}: truncated checkpoint")
            tensors[name] = Tensor(np.frombuffer(raw, dtype="<f8").reshape(shape).copy(), requires_grad=True, name=name)
    return ModelConfig(**header["config"]), ModelParams(tensors), header.get("extra", {})
