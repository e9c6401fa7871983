"""Clue-guided feature enhancement: clue embedding, fusion and dilated
neighbourhood attention, with hand-written reverse-mode gradients.

Tokens are voxels of a feature grid in x-major order (z fastest), so a
feature volume is an ``(N, d)`` float64 array with ``N = H * W * Z``.

Each attention layer splits the width into heads; head ``h`` attends over a
``k x k x k`` window whose members are spaced by that head's dilation. Windows
near a border are shifted rather than clipped, so every query sees ``k``
members per axis. When an axis is too short for that, members are clamped to
the border and the repeated positions are masked out of the softmax, which is
what makes an oversized window equal to dense attention.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

from .errors import CacheMismatchError, FormatError, InvalidInputError
from .voxel import LabelGrid

MAGIC = b"ENH1"

# Gradient entries smaller than this are compared in absolute terms. Central
# differences carry roundoff of about eps * |objective| / h (~1e-10 here), which
# would otherwise dominate the ratio for tiny entries.
GRAD_FLOOR = 0.1


@dataclass(frozen=True)
class EnhanceConfig:
    dims: tuple[int, int, int] = (8, 8, 4)
    d: int = 32
    heads: int = 4
    kernel: int = 7
    dilations: tuple[int, ...] = (1, 2, 4, 8)
    layers: int = 2
    feat_dim: int = 32
    embed_dim: int = 16
    num_classes: int = 19

    def __post_init__(self) -> None:
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "dilations", tuple(int(v) for v in self.dilations))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise InvalidInputError(f"dims must be three positive sizes, got {self.dims}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise InvalidInputError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.heads < 1 or self.d % self.heads:
            raise InvalidInputError(f"width {self.d} is not divisible by {self.heads} heads")
        if len(self.dilations) != self.heads or min(self.dilations) < 1:
            raise InvalidInputError(f"need one positive dilation per head, got {self.dilations}")
        for name in ("layers", "feat_dim", "embed_dim", "num_classes"):
            if getattr(self, name) < 0 or (name != "layers" and getattr(self, name) < 1):
                raise InvalidInputError(f"{name} must be positive")

    @property
    def num_tokens(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def unknown_id(self) -> int:
        return self.num_classes + 1

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnhanceConfig":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


_LAYER_NAMES = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")


@dataclass(frozen=True, eq=False)
class LayerParams:
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray


@dataclass(frozen=True, eq=False)
class EnhanceParams:
    """Learnable state. Weights act on row vectors: ``y = x @ w + b``."""

    table: np.ndarray  # (C + 2, embed_dim): classes, empty (row 0) and unknown (last row)
    fuse_w: np.ndarray  # (feat_dim + embed_dim, d)
    fuse_b: np.ndarray  # (d,)
    layers: tuple[LayerParams, ...]

    def named_tensors(self) -> list[tuple[str, np.ndarray]]:
        """All tensors in declaration (and serialisation) order."""
        out = [("table", self.table), ("fuse_w", self.fuse_w), ("fuse_b", self.fuse_b)]
        for i, layer in enumerate(self.layers):
            out += [(f"layers.{i}.{n}", getattr(layer, n)) for n in _LAYER_NAMES]
        return out

    def tensors(self) -> list[np.ndarray]:
        return [t for _, t in self.named_tensors()]

    @classmethod
    def from_tensors(cls, arrays: Sequence[np.ndarray]) -> "EnhanceParams":
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        if (len(arrays) - 3) % len(_LAYER_NAMES):
            raise InvalidInputError(f"unexpected tensor count {len(arrays)}")
        for a in arrays:
            a.setflags(write=False)
        layers = tuple(
            LayerParams(*arrays[i:i + len(_LAYER_NAMES)]) for i in range(3, len(arrays), len(_LAYER_NAMES))
        )
        return cls(arrays[0], arrays[1], arrays[2], layers)

    def map(self, fn: Callable, *others: "EnhanceParams") -> "EnhanceParams":
        return EnhanceParams.from_tensors(
            [fn(*ts) for ts in zip(self.tensors(), *(o.tensors() for o in others))]
        )

    def zeros_like(self) -> "EnhanceParams":
        return self.map(np.zeros_like)

    def check(self, config: EnhanceConfig) -> None:
        for (name, got), want in zip(self.named_tensors(), _shapes(config)):
            if got.shape != want:
                raise InvalidInputError(f"{name} has shape {got.shape}, expected {want}")
        if len(self.layers) != config.layers:
            raise InvalidInputError(f"{len(self.layers)} layers, config says {config.layers}")


def _shapes(config: EnhanceConfig) -> list[tuple[int, ...]]:
    d = config.d
    shapes = [(config.num_classes + 2, config.embed_dim), (config.feat_dim + config.embed_dim, d), (d,)]
    return shapes + [(d, d), (d,)] * 4 * config.layers


def _fan_in(config: EnhanceConfig) -> list[int]:
    # a table lookup reads a single row, so the embedding's fan-in is 1
    fans = [1, config.feat_dim + config.embed_dim, config.feat_dim + config.embed_dim]
    return fans + [config.d] * 8 * config.layers


def init_params(config: EnhanceConfig, seed: int = 0) -> EnhanceParams:
    """Uniform in +-1/sqrt(fan_in), drawn tensor by tensor in declaration order."""
    rng = np.random.default_rng(seed)
    arrays = []
    for shape, fan in zip(_shapes(config), _fan_in(config)):
        bound = 1.0 / np.sqrt(fan)
        arrays.append(rng.uniform(-bound, bound, shape))
    return EnhanceParams.from_tensors(arrays)


# -- serialisation ------------------------------------------------------------

_HEADER_FIELDS = ("dims", "d", "heads", "kernel", "layers", "feat_dim", "embed_dim", "num_classes")


def save_params(params: EnhanceParams, config: EnhanceConfig) -> bytes:
    """``ENH1``, a little-endian u32 config header, then every tensor as f64 LE."""
    params.check(config)
    head = [*config.dims, config.d, config.heads, config.kernel, config.layers,
            config.feat_dim, config.embed_dim, config.num_classes, *config.dilations]
    parts = [MAGIC, struct.pack(f"<{len(head)}I", *head)]
    parts += [np.ascontiguousarray(t, dtype="<f8").tobytes() for t in params.tensors()]
    return b"".join(parts)


def load_params(data: bytes) -> tuple[EnhanceConfig, EnhanceParams]:
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(data[:4])!r}, expected {MAGIC!r}", offset=0)
    fixed = 3 + len(_HEADER_FIELDS) - 1
    if len(data) < 4 + 4 * fixed:
        raise FormatError("truncated config header", offset=4)
    vals = struct.unpack_from(f"<{fixed}I", data, 4)
    heads = vals[4]
    off = 4 + 4 * fixed
    if len(data) < off + 4 * heads:
        raise FormatError("truncated dilation list", offset=off)
    dilations = struct.unpack_from(f"<{heads}I", data, off)
    off += 4 * heads
    try:
        config = EnhanceConfig(dims=vals[:3], d=vals[3], heads=heads, kernel=vals[5], layers=vals[6],
                               feat_dim=vals[7], embed_dim=vals[8], num_classes=vals[9], dilations=dilations)
    except InvalidInputError as e:
        raise FormatError(f"invalid config header: {e}", offset=4) from None
    arrays = []
    for shape in _shapes(config):
        n = int(np.prod(shape)) * 8
        if len(data) < off + n:
            raise FormatError(f"truncated tensor payload, need {n} bytes", offset=off)
        arrays.append(np.frombuffer(data, dtype="<f8", count=n // 8, offset=off).reshape(shape))
        off += n
    if off != len(data):
        raise FormatError(f"{len(data) - off} trailing bytes", offset=off)
    return config, EnhanceParams.from_tensors(arrays)


# -- embedding and fusion -----------------------------------------------------

def clue_ids(clues, config: EnhanceConfig) -> np.ndarray:
    """Flat table row per voxel. Masked voxels of a LabelGrid map to the unknown row."""
    if isinstance(clues, LabelGrid):
        ids = clues.labels.astype(np.int64)
        if clues.ignore_mask is not None:
            ids = np.where(clues.ignore_mask, config.unknown_id, ids)
    else:
        ids = np.asarray(clues)
        if ids.dtype.kind not in "iu":
            raise InvalidInputError(f"clue ids must be integers, got {ids.dtype}")
        ids = ids.astype(np.int64)
    if ids.shape != config.dims:
        raise InvalidInputError(f"clue grid {ids.shape} does not match feature grid {config.dims}")
    ids = ids.reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() > config.unknown_id):
        raise InvalidInputError(f"clue label outside [0, {config.unknown_id}]")
    return ids


def embed_clues(clues, table: np.ndarray, config: EnhanceConfig) -> np.ndarray:
    return table[clue_ids(clues, config)]


def fuse_concat(feats: np.ndarray, clue_emb: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or clue_emb.ndim != 2 or feats.shape[0] != clue_emb.shape[0]:
        raise InvalidInputError(f"token counts differ: {feats.shape} vs {clue_emb.shape}")
    if w.shape[0] != feats.shape[1] + clue_emb.shape[1]:
        raise InvalidInputError(f"fusion weight {w.shape} does not fit {feats.shape[1]}+{clue_emb.shape[1]} inputs")
    return np.concatenate([feats, clue_emb], axis=1) @ w + b


# -- neighbourhoods -----------------------------------------------------------

def axis_window_table(n: int, k: int, dilation: int) -> np.ndarray:
    """(n, k) member positions along one axis for every query position."""
    i = np.arange(n)
    lo = -(i // dilation)  # first offset whose member is >= 0
    top = (n - 1 - i) // dilation  # last offset whose member is < n
    hi = top - (k - 1)
    j0 = np.where(lo <= hi, np.clip(-(k // 2), lo, np.maximum(lo, hi)), lo)
    members = i[:, None] + dilation * (j0[:, None] + np.arange(k))
    return np.minimum(members, (i + dilation * top)[:, None])


def axis_window(pos: int, n: int, k: int, dilation: int) -> list[int]:
    return axis_window_table(n, k, dilation)[pos].tolist()


def neighborhood_indices(pos, dims, k: int, dilation: int) -> list[tuple[int, int, int]]:
    """The k**3 window of ``pos`` as (x, y, z) positions, x-major order."""
    if k < 1 or k % 2 == 0:
        raise InvalidInputError(f"kernel must be odd and >= 1, got {k}")
    axes = [axis_window(int(p), int(n), k, dilation) for p, n in zip(pos, dims)]
    return [(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]]


@lru_cache(maxsize=64)
def neighbor_table(dims: tuple[int, int, int], k: int, dilation: int) -> tuple[np.ndarray, np.ndarray]:
    """Flat neighbour ids (N, k**3) and a mask that is False on repeated positions."""
    H, W, Z = dims
    tabs = [axis_window_table(n, k, dilation) for n in dims]
    firsts = [np.concatenate([np.ones((t.shape[0], 1), bool), t[:, 1:] > t[:, :-1]], axis=1) for t in tabs]
    x, y, z = tabs
    nbr = ((x[:, None, None, :, None, None] * W + y[None, :, None, None, :, None]) * Z
           + z[None, None, :, None, None, :])
    mask = (firsts[0][:, None, None, :, None, None] & firsts[1][None, :, None, None, :, None]
            & firsts[2][None, None, :, None, None, :])
    nbr = nbr.reshape(H * W * Z, k ** 3)
    mask = np.broadcast_to(mask, (H, W, Z, k, k, k)).reshape(H * W * Z, k ** 3)
    nbr.setflags(write=False)
    mask.setflags(write=False)
    return nbr, mask


# -- attention ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class _LayerCache:
    x: np.ndarray
    q: np.ndarray  # (N, heads, dh)
    k: np.ndarray
    v: np.ndarray
    attn: tuple[np.ndarray, ...]  # per head (N, K)
    o: np.ndarray  # concatenated head outputs (N, d)


@dataclass(frozen=True, eq=False)
class DinaCache:
    config: EnhanceConfig
    layers: tuple[LayerParams, ...]
    steps: tuple[_LayerCache, ...]
    y: np.ndarray


def _softmax_masked(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _attention_layer(x: np.ndarray, p: LayerParams, config: EnhanceConfig) -> tuple[np.ndarray, _LayerCache]:
    n, dh = x.shape[0], config.head_dim
    q = (x @ p.wq + p.bq).reshape(n, config.heads, dh)
    k = (x @ p.wk + p.bk).reshape(n, config.heads, dh)
    v = (x @ p.wv + p.bv).reshape(n, config.heads, dh)
    scale = 1.0 / np.sqrt(dh)
    heads_out, attn = [], []
    for h, dil in enumerate(config.dilations):
        nbr, mask = neighbor_table(config.dims, config.kernel, dil)
        logits = np.einsum("nd,nkd->nk", q[:, h], k[nbr, h]) * scale
        a = _softmax_masked(logits, mask)
        heads_out.append(np.einsum("nk,nkd->nd", a, v[nbr, h]))
        attn.append(a)
    o = np.concatenate(heads_out, axis=1)
    y = x + o @ p.wo + p.bo
    return y, _LayerCache(x, q, k, v, tuple(attn), o)


def _check_tokens(x: np.ndarray, config: EnhanceConfig) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (config.num_tokens, config.d):
        raise InvalidInputError(f"expected tokens of shape {(config.num_tokens, config.d)}, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("tokens must be finite")
    return x


def dina_forward(x: np.ndarray, params: EnhanceParams, config: EnhanceConfig) -> tuple[np.ndarray, DinaCache]:
    """Run every attention layer (residual after each, no normalisation)."""
    x = _check_tokens(x, config)
    params.check(config)
    steps = []
    for layer in params.layers:
        x, c = _attention_layer(x, layer, config)
        steps.append(c)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("non-finite activations in attention output")
    return x, DinaCache(config, params.layers, tuple(steps), x)


def _attention_layer_backward(c: _LayerCache, p: LayerParams, dy: np.ndarray,
                              config: EnhanceConfig) -> tuple[np.ndarray, LayerParams]:
    n, dh = dy.shape[0], config.head_dim
    dwo = c.o.T @ dy
    dbo = dy.sum(axis=0)
    do = (dy @ p.wo.T).reshape(n, config.heads, dh)
    dq = np.zeros_like(c.q)
    dk = np.zeros_like(c.k)
    dv = np.zeros_like(c.v)
    scale = 1.0 / np.sqrt(dh)
    for h, dil in enumerate(config.dilations):
        nbr, _ = neighbor_table(config.dims, config.kernel, dil)
        a = c.attn[h]
        v_n = c.v[nbr, h]
        da = np.einsum("nd,nkd->nk", do[:, h], v_n)
        np.add.at(dv[:, h], nbr.reshape(-1), (a[:, :, None] * do[:, h, None, :]).reshape(-1, dh))
        dl = a * (da - (a * da).sum(axis=1, keepdims=True)) * scale
        dq[:, h] = np.einsum("nk,nkd->nd", dl, c.k[nbr, h])
        np.add.at(dk[:, h], nbr.reshape(-1), (dl[:, :, None] * c.q[:, h, None, :]).reshape(-1, dh))
    dq, dk, dv = (g.reshape(n, -1) for g in (dq, dk, dv))
    dx = dy + dq @ p.wq.T + dk @ p.wk.T + dv @ p.wv.T
    grads = LayerParams(c.x.T @ dq, dq.sum(axis=0), c.x.T @ dk, dk.sum(axis=0),
                        c.x.T @ dv, dv.sum(axis=0), dwo, dbo)
    return dx, grads


def dina_backward(cache: DinaCache, grad_y: np.ndarray,
                  params: EnhanceParams | None = None) -> tuple[np.ndarray, tuple[LayerParams, ...]]:
    """Gradients w.r.t. the layer input and every layer's parameters.

    Passing ``params`` checks that they are the ones the forward pass used.
    """
    if params is not None and any(
            a is not b for la, lb in zip(params.layers, cache.layers) for a, b in zip(vars(la).values(), vars(lb).values())):
        raise CacheMismatchError("cache was produced with different parameters")
    grad_y = np.asarray(grad_y, dtype=np.float64)
    if grad_y.shape != cache.y.shape:
        raise CacheMismatchError(f"upstream gradient {grad_y.shape} does not match output {cache.y.shape}")
    dx = grad_y
    grads = []
    for c, p in zip(reversed(cache.steps), reversed(cache.layers)):
        dx, g = _attention_layer_backward(c, p, dx, cache.config)
        grads.append(g)
    return dx, tuple(reversed(grads))


# -- full module ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EnhanceCache:
    ids: np.ndarray
    fused_in: np.ndarray  # concatenated [feats | clue embedding]
    params: EnhanceParams
    dina: DinaCache


def enhance_forward(feats: np.ndarray, clues, params: EnhanceParams, config: EnhanceConfig,
                    return_cache: bool = False):
    """Embed clues, fuse with the features, then attend. Deterministic."""
    params.check(config)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape != (config.num_tokens, config.feat_dim):
        raise InvalidInputError(f"expected features of shape {(config.num_tokens, config.feat_dim)}, got {feats.shape}")
    ids = clue_ids(clues, config)
    emb = params.table[ids]
    fused = fuse_concat(feats, emb, params.fuse_w, params.fuse_b)
    y, dcache = dina_forward(fused, params, config)
    if return_cache:
        return y, EnhanceCache(ids, np.concatenate([feats, emb], axis=1), params, dcache)
    return y


def enhance_backward(cache: EnhanceCache, grad_y: np.ndarray) -> tuple[np.ndarray, EnhanceParams]:
    """Gradients w.r.t. the input features and all parameters."""
    p = cache.params
    dfused, layer_grads = dina_backward(cache.dina, grad_y)
    dfuse_w = cache.fused_in.T @ dfused
    dfuse_b = dfused.sum(axis=0)
    din = dfused @ p.fuse_w.T
    feat_dim = cache.fused_in.shape[1] - p.table.shape[1]
    dtable = np.zeros_like(p.table)
    np.add.at(dtable, cache.ids, din[:, feat_dim:])
    arrays = [dtable, dfuse_w, dfuse_b]
    for g in layer_grads:
        arrays += [getattr(g, n) for n in _LAYER_NAMES]
    return din[:, :feat_dim], EnhanceParams.from_tensors(arrays)


def sgd_step(params: EnhanceParams, grads: EnhanceParams, lr: float) -> EnhanceParams:
    if not lr >= 0:
        raise InvalidInputError(f"learning rate must be non-negative, got {lr}")
    for (name, p), g in zip(params.named_tensors(), grads.tensors()):
        if p.shape != g.shape:
            raise InvalidInputError(f"gradient for {name} has shape {g.shape}, expected {p.shape}")
    return params.map(lambda p, g: p - lr * g, grads)


# -- gradient check -------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    location: str  # tensor name and flat index of the worst entry
    max_abs_error: float
    checked: int


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries from blowing up."""
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def toy_problem(config: EnhanceConfig, seed: int):
    """Random features, clue ids (including unknown) and an upstream gradient."""
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((config.num_tokens, config.feat_dim))
    ids = rng.integers(0, config.unknown_id + 1, config.dims)
    upstream = rng.standard_normal((config.num_tokens, config.d))
    return feats, ids, upstream


def finite_diff_check(config: EnhanceConfig, seed: int = 0, h: float = 1e-5,
                      params: EnhanceParams | None = None, floor: float = GRAD_FLOOR,
                      grad_hook: Callable | None = None) -> GradCheckReport:
    """Compare analytic gradients with central differences on every scalar.

    The scalar objective is ``sum(y * R)`` for a fixed random ``R``, so its
    gradient is exactly what :func:`enhance_backward` returns for ``grad_y = R``.
    ``grad_hook(dfeats, dparams)`` may replace the analytic gradients before
    comparison; it exists so tests can confirm that a wrong gradient is caught.
    """
    if config.num_tokens > 64 or config.d > 16:
        raise InvalidInputError("finite-difference checks are limited to toy sizes (N <= 64, d <= 16)")
    params = params if params is not None else init_params(config, seed)
    feats, ids, upstream = toy_problem(config, seed)
    _, cache = enhance_forward(feats, ids, params, config, return_cache=True)
    dfeats, dparams = enhance_backward(cache, upstream)
    if grad_hook is not None:
        dfeats, dparams = grad_hook(dfeats, dparams)

    def objective(f, arrays):
        return float(np.sum(enhance_forward(f, ids, EnhanceParams.from_tensors(arrays), config) * upstream))

    worst, where, worst_abs, count = 0.0, "", 0.0, 0
    base = [t.copy() for t in params.tensors()]
    targets = [("feats", feats, dfeats, None)]
    targets += [(name, t, g, i) for i, ((name, t), g) in enumerate(zip(params.named_tensors(), dparams.tensors()))]
    for name, tensor, grad, slot in targets:
        numeric = np.zeros(tensor.size)
        for j in range(tensor.size):
            vals = []
            for sign in (1.0, -1.0):
                arr = tensor.copy().reshape(-1)
                arr[j] += sign * h
                arr = arr.reshape(tensor.shape)
                if slot is None:
                    vals.append(objective(arr, base))
                else:
                    vals.append(objective(feats, base[:slot] + [arr] + base[slot + 1:]))
            numeric[j] = (vals[0] - vals[1]) / (2 * h)
        err = relative_error(grad.reshape(-1), numeric, floor)
        count += tensor.size
        worst_abs = max(worst_abs, float(np.abs(grad.reshape(-1) - numeric).max(initial=0.0)))
        if err.size and err.max() > worst:
            worst, where = float(err.max()), f"{name}[{int(err.argmax())}]"
    return GradCheckReport(worst, where, worst_abs, count)


# -- desk-scale training --------------------------------------------------------

def mse_loss(y: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = y - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size


@dataclass(frozen=True, eq=False)
class AdamState:
    m: EnhanceParams
    v: EnhanceParams
    t: int = 0

    @classmethod
    def zeros(cls, params: EnhanceParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like())


def adam_step(params: EnhanceParams, grads: EnhanceParams, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> tuple[EnhanceParams, AdamState]:
    if not lr >= 0:
        raise InvalidInputError(f"learning rate must be non-negative, got {lr}")
    t = state.t + 1
    m = state.m.map(lambda a, g: beta1 * a + (1 - beta1) * g, grads)
    v = state.v.map(lambda a, g: beta2 * a + (1 - beta2) * g * g, grads)
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    params = params.map(lambda p, mm, vv: p - lr * (mm / c1) / (np.sqrt(vv / c2) + eps), m, v)
    return params, AdamState(m, v, t)


@dataclass(frozen=True, eq=False)
class TrainResult:
    params: EnhanceParams
    losses: list[float]


def train_enhance(feats: np.ndarray, clues, target: np.ndarray, params: EnhanceParams,
                  config: EnhanceConfig, steps: int = 500, lr: float = 0.01,
                  optimizer: str = "adam") -> TrainResult:
    """Minimise mean squared error to ``target``; ``losses[i]`` is the loss before step i,
    and the last entry is the loss after the final step."""
    if optimizer not in ("adam", "sgd"):
        raise InvalidInputError(f"unknown optimizer {optimizer!r}")
    state = AdamState.zeros(params)
    losses = []
    for _ in range(steps):
        y, cache = enhance_forward(feats, clues, params, config, return_cache=True)
        loss, grad = mse_loss(y, target)
        losses.append(loss)
        _, grads = enhance_backward(cache, grad)
        if optimizer == "adam":
            params, state = adam_step(params, grads, state, lr)
        else:
            params = sgd_step(params, grads, lr)
    losses.append(mse_loss(enhance_forward(feats, clues, params, config), target)[0])
    return TrainResult(params, losses)
