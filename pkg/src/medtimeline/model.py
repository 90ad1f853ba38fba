"""Decoder-only causal transformer in NumPy with hand-written backward pass.

Pre-norm blocks, rotary positions (half-split convention), GELU MLP, untied
output head. ``float64`` is used for gradient checks, ``float32`` for
training.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

LN_EPS = 1e-5
GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_mlp: int = 256
    context_len: int = 256
    rope_base: float = 10000.0
    dtype: str = "float32"

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "d_model", "n_heads", "d_mlp"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if (self.d_model // self.n_heads) % 2:
            raise ValueError("head dimension must be even for rotary positions")
        if self.context_len < 2:
            raise ValueError("context_len must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def _layer_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m = c.d_model, c.d_mlp
    return {
        "ln1_g": (d,), "ln1_b": (d,),
        "wqkv": (d, 3 * d), "bqkv": (3 * d,),
        "wo": (d, d), "bo": (d,),
        "ln2_g": (d,), "ln2_b": (d,),
        "w1": (d, m), "b1": (m,),
        "w2": (m, d), "b2": (d,),
    }


def param_shapes(c: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {"emb": (c.vocab_size, c.d_model)}
    for layer in range(c.n_layers):
        for k, s in _layer_shapes(c).items():
            shapes[f"h{layer}.{k}"] = s
    shapes["lnf_g"] = (c.d_model,)
    shapes["lnf_b"] = (c.d_model,)
    shapes["head"] = (c.d_model, c.vocab_size)
    return shapes


def count_params(c: ModelConfig) -> dict[str, int]:
    """Closed-form parameter counts.

    ``non_embedding`` excludes the input embedding, output head and final
    norm, so it is exactly proportional to the layer count.
    """
    d, m, V, L = c.d_model, c.d_mlp, c.vocab_size, c.n_layers
    per_layer = 4 * d + 3 * d * d + 3 * d + d * d + d + d * m + m + m * d + d
    non_embedding = L * per_layer
    return {"total": non_embedding + 2 * V * d + 2 * d, "non_embedding": non_embedding}


def init_params(c: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    dtype = np.dtype(c.dtype)
    out_std = 0.02 / math.sqrt(2 * c.n_layers)
    params = {}
    for name, shape in param_shapes(c).items():
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            p = np.ones(shape)
        elif leaf.endswith("_b") or leaf.startswith("b"):
            p = np.zeros(shape)
        elif leaf in ("wo", "w2"):
            p = rng.normal(0.0, out_std, shape)
        else:
            p = rng.normal(0.0, 0.02, shape)
        params[name] = p.astype(dtype)
    return params


# ---------------------------------------------------------------------------
# primitives


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).reshape(-1, xhat.shape[-1]).sum(0)
    db = dy.reshape(-1, dy.shape[-1]).sum(0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True) - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(GELU_C * u * (1.0 + 0.044715 * u * u))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(dy, u, t):
    return dy * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3 * 0.044715 * u * u))


def _rope_tables(positions, head_dim, base, dtype):
    half = head_dim // 2
    freq = base ** (-np.arange(half, dtype=np.float64) * 2.0 / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[..., None] * freq
    return np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)


def _rope(x, cos, sin):
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _rope_back(dy, cos, sin):
    half = dy.shape[-1] // 2
    d1, d2 = dy[..., :half], dy[..., half:]
    return np.concatenate([d1 * cos + d2 * sin, -d1 * sin + d2 * cos], axis=-1)


def _softmax(s):
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(-1, keepdims=True)


# ---------------------------------------------------------------------------
# forward / backward


def _check_ids(ids, c: ModelConfig):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
        raise ValueError(f"token id outside [0, {c.vocab_size})")
    return ids


def _forward(params, c: ModelConfig, ids, positions=None, key_valid=None, keep_cache=False):
    """Full-sequence forward. Returns (logits, cache or None, per-layer (k, v))."""
    ids = _check_ids(ids, c)
    B, T = ids.shape
    H, hd = c.n_heads, c.head_dim
    dtype = params["emb"].dtype
    if positions is None:
        positions = np.arange(T)
    cos, sin = _rope_tables(positions, hd, c.rope_base, dtype)
    if cos.ndim == 3:  # per-row positions (B, T, half)
        cos, sin = cos[:, None], sin[:, None]
    mask = np.tril(np.ones((T, T), dtype=bool))[None, None]
    if key_valid is not None:
        mask = mask & key_valid[:, None, None, :]
        mask = mask | np.eye(T, dtype=bool)[None, None]  # padded queries see themselves only
    scale = 1.0 / math.sqrt(hd)
    neg = np.asarray(-1e30 if dtype == np.float64 else -1e9, dtype=dtype)

    h = params["emb"][ids]
    caches, kvs = [], []
    for layer in range(c.n_layers):
        p = lambda k: params[f"h{layer}.{k}"]  # noqa: E731
        a, ln1 = _ln(h, p("ln1_g"), p("ln1_b"))
        qkv = a @ p("wqkv") + p("bqkv")
        q, k, v = (qkv[..., i * c.d_model:(i + 1) * c.d_model].reshape(B, T, H, hd).transpose(0, 2, 1, 3) for i in range(3))
        qr, kr = _rope(q, cos, sin), _rope(k, cos, sin)
        s = np.where(mask, (qr @ kr.transpose(0, 1, 3, 2)) * scale, neg)
        P = _softmax(s)
        o = (P @ v).transpose(0, 2, 1, 3).reshape(B, T, c.d_model)
        h1 = h + o @ p("wo") + p("bo")
        a2, ln2 = _ln(h1, p("ln2_g"), p("ln2_b"))
        u = a2 @ p("w1") + p("b1")
        g, t = _gelu(u)
        h2 = h1 + g @ p("w2") + p("b2")
        kvs.append((kr, v))
        if keep_cache:
            caches.append((a, ln1, qr, kr, v, P, o, a2, ln2, u, g, t))
        h = h2
    hf, lnf = _ln(h, params["lnf_g"], params["lnf_b"])
    logits = hf @ params["head"]
    cache = {"ids": ids, "cos": cos, "sin": sin, "layers": caches, "hf": hf, "lnf": lnf} if keep_cache else None
    return logits, cache, kvs


def forward(params, c: ModelConfig, ids) -> np.ndarray:
    """Logits (B, T, V) for a batch of id rows (or (T, V) for a single row)."""
    ids = np.asarray(ids)
    single = ids.ndim == 1
    logits, _, _ = _forward(params, c, ids[None] if single else ids)
    return logits[0] if single else logits


def loss_and_grad(params, c: ModelConfig, rows, loss_mask=None, with_grad: bool = True):
    """Mean next-token cross-entropy over supervised targets and its exact gradient.

    Position i predicts token i+1; a target is supervised when its
    ``loss_mask`` entry is True.
    """
    rows = np.asarray(rows)
    if loss_mask is None:
        loss_mask = np.ones(rows.shape, dtype=bool)
    tmask = np.asarray(loss_mask, dtype=bool)[:, 1:]
    n = int(tmask.sum())
    if n == 0:
        raise ValueError("no supervised positions")
    logits, cache, _ = _forward(params, c, rows, keep_cache=with_grad)
    B, T, V = logits.shape
    z = logits[:, :-1]
    zmax = z.max(-1, keepdims=True)
    ez = np.exp(z - zmax)
    lse = np.log(ez.sum(-1, keepdims=True)) + zmax
    targets = rows[:, 1:]
    picked = np.take_along_axis(z, targets[..., None], -1)[..., 0]
    nll = (lse[..., 0] - picked) * tmask
    loss = float(nll.sum() / n)
    if not with_grad:
        return loss, None

    dz = ez / ez.sum(-1, keepdims=True)
    np.put_along_axis(dz, targets[..., None], np.take_along_axis(dz, targets[..., None], -1) - 1.0, -1)
    dz *= (tmask / n)[..., None]
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1] = dz
    return loss, _backward(params, c, cache, dlogits)


def _backward(params, c: ModelConfig, cache, dlogits):
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    B, T, _ = dlogits.shape
    H, hd, d = c.n_heads, c.head_dim, c.d_model
    scale = 1.0 / math.sqrt(hd)
    cos, sin = cache["cos"], cache["sin"]
    hf = cache["hf"]
    grads["head"] = hf.reshape(-1, d).T @ dlogits.reshape(-1, c.vocab_size)
    dhf = dlogits @ params["head"].T
    dh, grads["lnf_g"], grads["lnf_b"] = _ln_back(dhf, params["lnf_g"], cache["lnf"])
    for layer in range(c.n_layers - 1, -1, -1):
        pre = f"h{layer}."
        p = lambda k: params[pre + k]  # noqa: E731
        a, ln1, qr, kr, v, P, o, a2, ln2, u, g, t = cache["layers"][layer]
        # MLP
        grads[pre + "w2"] = g.reshape(-1, c.d_mlp).T @ dh.reshape(-1, d)
        grads[pre + "b2"] = dh.reshape(-1, d).sum(0)
        du = _gelu_back(dh @ p("w2").T, u, t)
        grads[pre + "w1"] = a2.reshape(-1, d).T @ du.reshape(-1, c.d_mlp)
        grads[pre + "b1"] = du.reshape(-1, c.d_mlp).sum(0)
        dx, grads[pre + "ln2_g"], grads[pre + "ln2_b"] = _ln_back(du @ p("w1").T, p("ln2_g"), ln2)
        dh = dh + dx
        # attention
        grads[pre + "wo"] = o.reshape(-1, d).T @ dh.reshape(-1, d)
        grads[pre + "bo"] = dh.reshape(-1, d).sum(0)
        do = (dh @ p("wo").T).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        dv = P.transpose(0, 1, 3, 2) @ do
        dP = do @ v.transpose(0, 1, 3, 2)
        ds = P * (dP - (dP * P).sum(-1, keepdims=True)) * scale
        dq = _rope_back(ds @ kr, cos, sin)
        dk = _rope_back(ds.transpose(0, 1, 3, 2) @ qr, cos, sin)
        dqkv = np.concatenate([x.transpose(0, 2, 1, 3).reshape(B, T, d) for x in (dq, dk, dv)], axis=-1)
        grads[pre + "wqkv"] = a.reshape(-1, d).T @ dqkv.reshape(-1, 3 * d)
        grads[pre + "bqkv"] = dqkv.reshape(-1, 3 * d).sum(0)
        dx, grads[pre + "ln1_g"], grads[pre + "ln1_b"] = _ln_back(dqkv @ p("wqkv").T, p("ln1_g"), ln1)
        dh = dh + dx
    np.add.at(grads["emb"], cache["ids"], dh)
    return grads


# ---------------------------------------------------------------------------
# sampling


def sample_from_uniform(logits, temperature: float, u):
    """Inverse-CDF draw(s) from softmax(logits / temperature) using uniform(s) ``u``.

    Works on a single logit vector or a batch (rows along the first axis).
    Temperature 0 returns the argmax (lowest id wins ties).
    """
    if temperature < 0:
        raise ValueError("temperature must be >= 0")
    logits = np.asarray(logits, dtype=np.float64)
    if temperature == 0:
        return np.argmax(logits, axis=-1)
    p = _softmax(logits / temperature)
    cdf = np.cumsum(p, axis=-1)
    u = np.asarray(u, dtype=np.float64) * cdf[..., -1]
    idx = (cdf <= u[..., None]).sum(-1)
    return np.minimum(idx, logits.shape[-1] - 1)


def sample_next(logits_at_last, temperature: float, rng: np.random.Generator) -> int:
    return int(sample_from_uniform(logits_at_last, temperature, rng.random()))


# ---------------------------------------------------------------------------
# incremental decoding


class KVDecoder:
    """Batched incremental decoder with a key/value cache.

    Every live row consumes one token per ``step``; finished rows are
    dropped with ``select``. When the cache fills, the default is to
    re-encode every row from its last ``keep`` tokens. With ``sliding=True``
    the cache becomes a ring buffer: the oldest key is overwritten, so
    attention always spans the last ``window`` tokens at constant cost.
    """

    def __init__(self, params, config: ModelConfig, window: int | None = None, keep: int | None = None,
                 sliding: bool = False):
        self.params = params
        self.c = config
        self.W = window or config.context_len
        self.keep = keep or max(1, self.W // 2)
        self.sliding = sliding
        self.history: list[list[int]] = []

    @property
    def batch_size(self) -> int:
        return len(self.history)

    def prefill(self, prompts) -> np.ndarray:
        """Encode one prompt per row; returns next-token logits (B, V)."""
        prompts = [list(map(int, p))[-self.W:] for p in prompts]
        if not prompts or any(len(p) == 0 for p in prompts):
            raise ValueError("need at least one non-empty prompt")
        self.history = [list(p) for p in prompts]
        return self._encode(prompts)

    def _encode(self, prompts) -> np.ndarray:
        # identical rows (many samples of one prompt) are encoded once
        first: dict[tuple, int] = {}
        inverse = np.array([first.setdefault(tuple(p), len(first)) for p in prompts], dtype=np.int64)
        unique = [list(k) for k in first]
        c = self.c
        B = len(unique)
        lens = np.array([len(p) for p in unique])
        P = int(lens.max())
        pad = P - lens
        ids = np.zeros((B, P), dtype=np.int64)
        for b, pr in enumerate(unique):
            ids[b, pad[b]:] = pr
        cols = np.arange(P)
        valid = cols[None, :] >= pad[:, None]
        positions = np.maximum(cols[None, :] - pad[:, None], 0)
        logits, _, kvs = _forward(self.params, c, ids, positions=positions, key_valid=valid)
        dtype = self.params["emb"].dtype
        shape = (c.n_layers, len(prompts), c.n_heads, self.W, c.head_dim)
        self.K = np.zeros(shape, dtype=dtype)
        self.V = np.zeros(shape, dtype=dtype)
        for layer, (k, v) in enumerate(kvs):
            self.K[layer, :, :, :P] = k[inverse]
            self.V[layer, :, :, :P] = v[inverse]
        self.valid = np.zeros((len(prompts), self.W), dtype=bool)
        self.valid[:, :P] = valid[inverse]
        self.pos = lens[inverse]
        self.t = P
        return logits[inverse, -1]

    def select(self, rows) -> None:
        """Keep only ``rows`` (indices into the current batch), in that order."""
        rows = np.asarray(rows, dtype=np.int64)
        self.history = [self.history[r] for r in rows]
        self.K = self.K[:, rows]
        self.V = self.V[:, rows]
        self.valid = self.valid[rows]
        self.pos = self.pos[rows]

    def step(self, tokens) -> np.ndarray:
        """Feed one token to every row; returns next-token logits (B, V)."""
        tokens = _check_ids(np.asarray(tokens).reshape(-1), self.c)
        if len(tokens) != self.batch_size:
            raise ValueError("one token per row required")
        for h, tok in zip(self.history, tokens.tolist()):
            h.append(tok)
        if self.t >= self.W and not self.sliding:
            return self._encode([h[-self.keep:] for h in self.history])
        return self._step(tokens)

    def _step(self, tokens):
        c, params = self.c, self.params
        n, H, hd, d = len(tokens), c.n_heads, c.head_dim, c.d_model
        dtype = params["emb"].dtype
        cos, sin = _rope_tables(self.pos, hd, c.rope_base, dtype)
        cos, sin = cos[:, None, None], sin[:, None, None]  # (n, 1, 1, half)
        slot = self.t % self.W
        span = min(self.t + 1, self.W)
        self.valid[:, slot] = True
        keymask = self.valid[:, None, None, :span]
        scale = 1.0 / math.sqrt(hd)
        h = params["emb"][tokens][:, None]  # (n, 1, d)
        for layer in range(c.n_layers):
            p = lambda k: params[f"h{layer}.{k}"]  # noqa: E731
            a, _ = _ln(h, p("ln1_g"), p("ln1_b"))
            qkv = a @ p("wqkv") + p("bqkv")
            q, k, v = (qkv[..., i * d:(i + 1) * d].reshape(n, 1, H, hd).transpose(0, 2, 1, 3) for i in range(3))
            q, k = _rope(q, cos, sin), _rope(k, cos, sin)
            self.K[layer, :, :, slot] = k[:, :, 0]
            self.V[layer, :, :, slot] = v[:, :, 0]
            s = np.where(keymask, (q @ self.K[layer, :, :, :span].transpose(0, 1, 3, 2)) * scale, -1e9)
            o = (_softmax(s) @ self.V[layer, :, :, :span]).transpose(0, 2, 1, 3).reshape(n, 1, d)
            h = h + o @ p("wo") + p("bo")
            a2, _ = _ln(h, p("ln2_g"), p("ln2_b"))
            g, _ = _gelu(a2 @ p("w1") + p("b1"))
            h = h + g @ p("w2") + p("b2")
        hf, _ = _ln(h, params["lnf_g"], params["lnf_b"])
        self.pos += 1
        self.t += 1
        return (hf @ params["head"])[:, 0]


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"MTLCKPT\x00"
CKPT_VERSION = 1
_CKPT_HEAD = struct.Struct("<8sIQ")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, config: ModelConfig, step: int = 0, rng_state=None, extra=None, tensors=None) -> None:
    """JSON header (config, step, RNG state) followed by little-endian float32 tensors.

    ``tensors`` holds additional named arrays (optimizer moments) stored
    alongside the parameters.
    """
    all_tensors = dict(params)
    for k, v in (tensors or {}).items():
        all_tensors[k] = v
    index, offset, blobs = [], 0, []
    for name in sorted(all_tensors):
        arr = np.ascontiguousarray(all_tensors[name], dtype="<f4")
        index.append([name, list(arr.shape), offset])
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    header = {
        "version": CKPT_VERSION,
        "config": asdict(config),
        "step": int(step),
        "rng_state": rng_state,
        "extra": extra or {},
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(Path(path), "wb") as fh:
        fh.write(_CKPT_HEAD.pack(CKPT_MAGIC, CKPT_VERSION, len(head)))
        fh.write(head)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, dtype: str | None = None):
    """Returns (params, config, header, extra_tensors)."""
    raw = Path(path).read_bytes()
    if len(raw) < _CKPT_HEAD.size:
        raise CheckpointError(f"{path}: truncated checkpoint")
    magic, version, hlen = _CKPT_HEAD.unpack_from(raw)
    if magic != CKPT_MAGIC or version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format")
    header = json.loads(raw[_CKPT_HEAD.size:_CKPT_HEAD.size + hlen])
    cfg = dict(header["config"])
    if dtype:
        cfg["dtype"] = dtype
    config = ModelConfig(**cfg)
    base = _CKPT_HEAD.size + hlen
    expected = param_shapes(config)
    params, other = {}, {}
    for name, shape, offset in header["tensors"]:
        count = int(np.prod(shape)) if shape else 1
        if base + offset + 4 * count > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=base + offset).reshape(shape)
        (params if name in expected else other)[name] = arr.astype(config.dtype)
    if set(params) != set(expected) or any(params[k].shape != s for k, s in expected.items()):
        raise CheckpointError(f"{path}: tensors do not match the stored config")
    return params, config, header, other
