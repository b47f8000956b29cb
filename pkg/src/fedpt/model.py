"""Tiny pre-norm transformer decoder in float64 numpy with hand-written backprop.

Small and large variants share one byte-level :class:`Vocab` and differ only in
depth and width.  Weight matrices use the ``(out, in)`` layout, so a linear map
is ``y = x @ W.T + b`` and a low-rank delta ``B @ A`` adds to ``W`` directly.

Low-rank adapters enter the core as a mapping ``weight name -> (A, B)``; the
forward adds ``(x @ A.T) @ B.T`` to the frozen projection.  The adapter module
owns construction and serialization of those factors.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, InputError

DTYPE = np.float64
LN_EPS = 1e-5
INIT_STD = 0.02
GELU_C = math.sqrt(2.0 / math.pi)

LORA_A = ".lora_A"
LORA_B = ".lora_B"

Lora = Mapping[str, "tuple[np.ndarray, np.ndarray]"]


# ---------------------------------------------------------------------------
# Configuration and parameters
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Vocab:
    """Token id space: 256 byte values followed by the special ids."""

    size: int = 259
    pad: int = 256
    bos: int = 257
    eos: int = 258

    def __post_init__(self) -> None:
        specials = (self.pad, self.bos, self.eos)
        if self.size < 4:
            raise InputError(f"vocab size must be >= 4, got {self.size}")
        if len(set(specials)) != 3 or not all(0 <= s < self.size for s in specials):
            raise InputError(f"special ids {specials} must be distinct and < {self.size}")


BYTE_VOCAB = Vocab()


@dataclass(frozen=True)
class ModelConfig:
    layers: int
    width: int
    heads: int
    context_len: int = 256
    vocab: Vocab = field(default=BYTE_VOCAB)

    def __post_init__(self) -> None:
        if self.layers < 1 or self.width < 1 or self.heads < 1:
            raise InputError("layers, width and heads must be positive")
        if self.width % self.heads:
            raise InputError(f"width {self.width} not divisible by heads {self.heads}")
        if self.context_len < 8:
            raise InputError(f"context_len must be >= 8, got {self.context_len}")

    @property
    def head_dim(self) -> int:
        return self.width // self.heads

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter names and shapes in the fixed serialization order."""
        d, V = self.width, self.vocab.size
        shapes: dict[str, tuple[int, ...]] = {"wte": (V, d), "wpe": (self.context_len, d)}
        for i in range(self.layers):
            p = f"h{i}."
            shapes.update({
                p + "ln1.g": (d,), p + "ln1.b": (d,),
                p + "attn.wq": (d, d), p + "attn.bq": (d,),
                p + "attn.wk": (d, d), p + "attn.bk": (d,),
                p + "attn.wv": (d, d), p + "attn.bv": (d,),
                p + "attn.wo": (d, d), p + "attn.bo": (d,),
                p + "ln2.g": (d,), p + "ln2.b": (d,),
                p + "mlp.w1": (4 * d, d), p + "mlp.b1": (4 * d,),
                p + "mlp.w2": (d, 4 * d), p + "mlp.b2": (d,),
            })
        shapes.update({"lnf.g": (d,), "lnf.b": (d,), "lm_head": (V, d)})
        return shapes

    def num_params(self) -> int:
        return sum(math.prod(s) for s in self.param_shapes().values())

    def to_dict(self) -> dict:
        v = self.vocab
        return {
            "layers": self.layers, "width": self.width, "heads": self.heads,
            "context_len": self.context_len,
            "vocab_size": v.size, "pad": v.pad, "bos": v.bos, "eos": v.eos,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> ModelConfig:
        vocab = Vocab(int(d.get("vocab_size", 259)), int(d.get("pad", 256)),
                      int(d.get("bos", 257)), int(d.get("eos", 258)))
        return cls(int(d["layers"]), int(d["width"]), int(d["heads"]),
                   int(d.get("context_len", 256)), vocab)


SMALL = ModelConfig(layers=2, width=64, heads=4)
LARGE = ModelConfig(layers=4, width=128, heads=4)


@dataclass
class ModelParams:
    """Full weights of one model; ``arrays`` follows ``config.param_shapes()``."""

    config: ModelConfig
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> ModelParams:
        return ModelParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def replace(self, updates: Mapping[str, np.ndarray]) -> ModelParams:
        arrays = dict(self.arrays)
        arrays.update(updates)
        return ModelParams(self.config, arrays)

    def num_params(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def is_finite(self) -> bool:
        return all(np.isfinite(a).all() for a in self.arrays.values())

    def equals(self, other: ModelParams) -> bool:
        """Bitwise equality of config and every array."""
        return self.config == other.config and self.arrays.keys() == other.arrays.keys() and all(
            np.array_equal(v, other.arrays[k]) for k, v in self.arrays.items())


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in config.param_shapes().items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            arrays[name] = np.ones(shape, DTYPE)
        elif leaf.startswith("b"):
            arrays[name] = np.zeros(shape, DTYPE)
        else:
            arrays[name] = rng.normal(0.0, INIT_STD, size=shape).astype(DTYPE)
    return ModelParams(config, arrays)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def _ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _ln_back(dy, g, saved, grads, prefix, need):
    xhat, rstd = saved
    if prefix + ".g" in need:
        grads[prefix + ".g"] = grads.get(prefix + ".g", 0.0) + (dy * xhat).sum(0)
    if prefix + ".b" in need:
        grads[prefix + ".b"] = grads.get(prefix + ".b", 0.0) + dy.sum(0)
    dxhat = dy * g
    return rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                   - xhat * (dxhat * xhat).mean(-1, keepdims=True))


def _gelu(x):
    # tanh approximation; x**3 via multiplies (float pow is far slower)
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= GELU_C
    np.tanh(t, out=t)
    y = t + 1.0
    y *= x
    y *= 0.5
    return y, t


def _gelu_back(dy, x, t):
    x2 = x * x
    x2 *= 3 * 0.044715
    x2 += 1.0
    x2 *= GELU_C
    dt = 1.0 - t * t
    dt *= x2
    dt *= x
    dt += 1.0
    dt += t
    dt *= 0.5
    dt *= dy
    return dt


def _acc(grads: dict, name: str, value: np.ndarray) -> None:
    if name in grads:
        grads[name] = grads[name] + value
    else:
        grads[name] = value


def _proj(a, arrays, wname, bname, lora):
    y = a @ arrays[wname].T + arrays[bname]
    if lora is not None and wname in lora:
        A, B = lora[wname]
        u = a @ A.T
        return y + u @ B.T, u
    return y, None


def _causal_bias(T: int, P: int) -> np.ndarray:
    bias = np.zeros((T, P + T), DTYPE)
    bias[:, P:][np.triu_indices(T, 1)] = -np.inf
    return bias


# ---------------------------------------------------------------------------
# Core forward / backward
# ---------------------------------------------------------------------------


def _run_layers(arrays, cfg: ModelConfig, tokens: np.ndarray, start: int, past, lora, keep: bool):
    """Run the block stack on ``tokens`` (B, T) placed at positions ``start...``.

    ``past`` holds per-layer (keys, values) of shape (Bp, H, P, dh) with Bp in
    {1, B}, attended to by every new position.  Returns the residual stream
    (B*T, d), per-layer caches (if ``keep``) and the new per-layer (k, v).
    """
    B, T = tokens.shape
    d, H, dh = cfg.width, cfg.heads, cfg.head_dim
    x = (arrays["wte"][tokens] + arrays["wpe"][start:start + T]).reshape(B * T, d)
    P = 0 if past is None else past[0][0].shape[2]
    bias = _causal_bias(T, P)
    scale = 1.0 / math.sqrt(dh)
    caches, present = [], []
    for i in range(cfg.layers):
        p = f"h{i}."
        a, ln1 = _ln(x, arrays[p + "ln1.g"], arrays[p + "ln1.b"])
        q, uq = _proj(a, arrays, p + "attn.wq", p + "attn.bq", lora)
        k, uk = _proj(a, arrays, p + "attn.wk", p + "attn.bk", lora)
        v, uv = _proj(a, arrays, p + "attn.wv", p + "attn.bv", lora)
        qh = q.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        kh = k.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        vh = v.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        present.append((kh, vh))
        if P:
            kp, vp = past[i]
            kf = np.concatenate([np.broadcast_to(kp, (B, H, P, dh)), kh], axis=2)
            vf = np.concatenate([np.broadcast_to(vp, (B, H, P, dh)), vh], axis=2)
        else:
            kf, vf = kh, vh
        s = qh @ kf.transpose(0, 1, 3, 2)
        s *= scale
        s += bias
        s -= s.max(-1, keepdims=True)
        np.exp(s, out=s)
        s /= s.sum(-1, keepdims=True)
        att = s
        o = (att @ vf).transpose(0, 2, 1, 3).reshape(B * T, d)
        x = x + o @ arrays[p + "attn.wo"].T + arrays[p + "attn.bo"]
        m, ln2 = _ln(x, arrays[p + "ln2.g"], arrays[p + "ln2.b"])
        h1 = m @ arrays[p + "mlp.w1"].T + arrays[p + "mlp.b1"]
        g, t = _gelu(h1)
        x = x + g @ arrays[p + "mlp.w2"].T + arrays[p + "mlp.b2"]
        if keep:
            caches.append(dict(a=a, ln1=ln1, uq=uq, uk=uk, uv=uv, qh=qh, kf=kf, vf=vf, att=att,
                               o=o, m=m, ln2=ln2, h1=h1, t=t, g=g))
    return x, caches, present


def _backward_layers(arrays, cfg: ModelConfig, tokens, start, caches, dx, lora, need, grads,
                     P: int = 0, inject=None):
    """Backprop through the block stack; returns per-layer grads w.r.t. ``past``.

    ``inject`` adds extra upstream gradients to each layer's own (k, v) heads,
    used when this segment served as the shared prefix of another.
    """
    B, T = tokens.shape
    d, H, dh = cfg.width, cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    dpast = [None] * cfg.layers
    for i in reversed(range(cfg.layers)):
        p = f"h{i}."
        c = caches[i]
        # MLP branch
        if p + "mlp.w2" in need:
            _acc(grads, p + "mlp.w2", dx.T @ c["g"])
        if p + "mlp.b2" in need:
            _acc(grads, p + "mlp.b2", dx.sum(0))
        dh1 = _gelu_back(dx @ arrays[p + "mlp.w2"], c["h1"], c["t"])
        if p + "mlp.w1" in need:
            _acc(grads, p + "mlp.w1", dh1.T @ c["m"])
        if p + "mlp.b1" in need:
            _acc(grads, p + "mlp.b1", dh1.sum(0))
        dx = dx + _ln_back(dh1 @ arrays[p + "mlp.w1"], arrays[p + "ln2.g"], c["ln2"], grads,
                           p + "ln2", need)
        # attention branch
        if p + "attn.wo" in need:
            _acc(grads, p + "attn.wo", dx.T @ c["o"])
        if p + "attn.bo" in need:
            _acc(grads, p + "attn.bo", dx.sum(0))
        do = (dx @ arrays[p + "attn.wo"]).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        att = c["att"]
        dvf = att.transpose(0, 1, 3, 2) @ do
        dp = do @ c["vf"].transpose(0, 1, 3, 2)
        ds = att * (dp - (dp * att).sum(-1, keepdims=True))
        ds *= scale
        dq = ds @ c["kf"]
        dkf = ds.transpose(0, 1, 3, 2) @ c["qh"]
        dk, dv = dkf[:, :, P:], dvf[:, :, P:]
        if P:
            dpast[i] = (dkf[:, :, :P].sum(0, keepdims=True), dvf[:, :, :P].sum(0, keepdims=True))
        if inject is not None:
            dk = dk + inject[i][0]
            dv = dv + inject[i][1]
        a = c["a"]
        da = None
        for name, dy, u in (("q", dq, c["uq"]), ("k", dk, c["uk"]), ("v", dv, c["uv"])):
            dy = dy.transpose(0, 2, 1, 3).reshape(B * T, d)
            wname = p + "attn.w" + name
            if wname in need:
                _acc(grads, wname, dy.T @ a)
            if p + "attn.b" + name in need:
                _acc(grads, p + "attn.b" + name, dy.sum(0))
            contrib = dy @ arrays[wname]
            if u is not None:
                A, Bm = lora[wname]
                du = dy @ Bm
                if wname + LORA_B in need:
                    _acc(grads, wname + LORA_B, dy.T @ u)
                    _acc(grads, wname + LORA_A, du.T @ a)
                contrib = contrib + du @ A
            da = contrib if da is None else da + contrib
        dx = dx + _ln_back(da, arrays[p + "ln1.g"], c["ln1"], grads, p + "ln1", need)
    if "wpe" in need:
        dpe = np.zeros_like(arrays["wpe"])
        dpe[start:start + T] = dx.reshape(B, T, d).sum(0)
        _acc(grads, "wpe", dpe)
    if "wte" in need:
        dte = np.zeros_like(arrays["wte"])
        np.add.at(dte, tokens.reshape(-1), dx)
        _acc(grads, "wte", dte)
    return dpast


def _head(arrays, x):
    xf, lnf = _ln(x, arrays["lnf.g"], arrays["lnf.b"])
    return xf @ arrays["lm_head"].T, (xf, lnf)


def _head_back(arrays, saved, dlogits, grads, need):
    xf, lnf = saved
    if "lm_head" in need:
        _acc(grads, "lm_head", dlogits.T @ xf)
    return _ln_back(dlogits @ arrays["lm_head"], arrays["lnf.g"], lnf, grads, "lnf", need)


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def check_tokens(config: ModelConfig, tokens: Sequence[int] | np.ndarray) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if arr.size > config.context_len:
        raise InputError(f"sequence length {arr.size} exceeds context_len {config.context_len}")
    if arr.size and (arr.min() < 0 or arr.max() >= config.vocab.size):
        raise InputError(f"token ids must lie in [0, {config.vocab.size})")
    return arr


def _lora_need(lora: Lora | None) -> set[str]:
    if not lora:
        return set()
    return {n + s for n in lora for s in (LORA_A, LORA_B)}


# ---------------------------------------------------------------------------
# Teacher-forced batches
# ---------------------------------------------------------------------------


class TeacherForcedPass:
    """Forward pass over a batch of (prompt, target) pairs, keeping what backward needs.

    Sequences are ``prompt + target``; position ``j`` predicts token ``j + 1`` and
    only positions that predict target tokens are scored.  When two or more
    sequences share a leading run of tokens (the prompt template), that run is
    computed once and broadcast as attention context to the rest of each row.

    ``logits`` holds one row per scored position, grouped by example in batch
    order; ``example`` and ``targets`` index those rows.
    """

    MIN_SHARED = 4

    def __init__(self, params: ModelParams, batch: Sequence[tuple], lora: Lora | None = None,
                 need: Iterable[str] | None = None, keep: bool = True):
        if not batch:
            raise InputError("batch must be non-empty")
        cfg = params.config
        self.params, self.lora, self.keep = params, lora, keep
        seqs, plens, tlens = [], [], []
        for prompt, target in batch:
            pr, tg = check_tokens(cfg, prompt), check_tokens(cfg, target)
            if tg.size == 0:
                raise InputError("target must be non-empty")
            if pr.size == 0:
                raise InputError("prompt must hold at least one token")
            seq = check_tokens(cfg, np.concatenate([pr, tg]))
            seqs.append(seq)
            plens.append(pr.size)
            tlens.append(tg.size)
        self.need = set(need) if need is not None else set()
        P = 0
        if len(seqs) > 1:
            P = min(plens) - 1
            first = seqs[0]
            for s in seqs[1:]:
                neq = np.nonzero(s[:P] != first[:P])[0]
                if neq.size:
                    P = int(neq[0])
            if P < self.MIN_SHARED:
                P = 0
        self.P = P
        B, S = len(seqs), max(s.size for s in seqs) - P
        toks = np.full((B, S), cfg.vocab.pad, np.int64)
        rows, ex, tgt = [], [], []
        for b, (seq, pl, tl) in enumerate(zip(seqs, plens, tlens)):
            toks[b, :seq.size - P] = seq[P:]
            pos = np.arange(pl - 1, pl - 1 + tl)
            rows.append(b * S + pos - P)
            ex.append(np.full(tl, b))
            tgt.append(seq[pos + 1])
        self.tokens = toks
        self.rows = np.concatenate(rows)
        self.example = np.concatenate(ex)
        self.targets = np.concatenate(tgt)
        self.batch_size = B
        self.counts = np.asarray(tlens)

        arrays = params.arrays
        past = None
        if P:
            self.prefix_tokens = seqs[0][None, :P]
            _, self.prefix_cache, past = _run_layers(arrays, cfg, self.prefix_tokens, 0, None,
                                                     lora, keep)
        x, self.cache, _ = _run_layers(arrays, cfg, toks, P, past, lora, keep)
        self.logits, self.head_saved = _head(arrays, x[self.rows])
        self._resid_shape = x.shape

    def backward(self, dlogits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of ``sum(dlogits * logits)`` w.r.t. every name in ``need``."""
        if not self.keep:
            raise ContractViolation("pass was built without keep=True")
        arrays, cfg, need = self.params.arrays, self.params.config, self.need
        grads: dict[str, np.ndarray] = {}
        dxr = _head_back(arrays, self.head_saved, dlogits, grads, need)
        dx = np.zeros(self._resid_shape, DTYPE)
        dx[self.rows] = dxr
        dpast = _backward_layers(arrays, cfg, self.tokens, self.P, self.cache, dx, self.lora,
                                 need, grads, P=self.P)
        if self.P:
            dx0 = np.zeros((self.P, cfg.width), DTYPE)
            _backward_layers(arrays, cfg, self.prefix_tokens, 0, self.prefix_cache, dx0,
                             self.lora, need, grads, inject=dpast)
        return {k: grads[k] for k in sorted(grads, key=_grad_order(cfg, grads))}

    def example_means(self, per_position: np.ndarray) -> np.ndarray:
        """Per-example mean of a per-position quantity."""
        return np.bincount(self.example, weights=per_position,
                           minlength=self.batch_size) / self.counts

    def position_weights(self) -> np.ndarray:
        """Weights turning a per-position sum into the mean over examples of per-example means."""
        return 1.0 / (self.batch_size * self.counts[self.example])


def _grad_order(cfg: ModelConfig, grads):
    order = {n: i for i, n in enumerate(cfg.param_shapes())}
    return lambda k: (order.get(k, len(order)), k)


def target_logits(params: ModelParams, batch: Sequence[tuple], lora: Lora | None = None):
    """Scored-position logits for ``batch`` without keeping activations."""
    return TeacherForcedPass(params, batch, lora, keep=False).logits


def nll_from_logits(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood."""
    return -log_softmax(logits)[np.arange(targets.size), targets]


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def forward_logits(params: ModelParams, tokens: Sequence[int], lora: Lora | None = None
                   ) -> np.ndarray:
    """Next-token logits at every position of ``tokens``, shape (T, V)."""
    arr = check_tokens(params.config, tokens)
    if arr.size == 0:
        return np.zeros((0, params.config.vocab.size), DTYPE)
    x, _, _ = _run_layers(params.arrays, params.config, arr[None, :], 0, None, lora, False)
    return _head(params.arrays, x)[0]


def nll_loss(params: ModelParams, prompt: Sequence[int], target: Sequence[int],
             lora: Lora | None = None) -> float:
    """Mean negative log-probability of ``target`` given ``prompt`` (prompt positions unscored)."""
    tp = TeacherForcedPass(params, [(prompt, target)], lora, keep=False)
    return float(nll_from_logits(tp.logits, tp.targets).mean())


def batch_loss(params: ModelParams, batch: Sequence[tuple], lora: Lora | None = None) -> float:
    tp = TeacherForcedPass(params, batch, lora, keep=False)
    return float(tp.example_means(nll_from_logits(tp.logits, tp.targets)).mean())


def backward(params: ModelParams, batch: Sequence[tuple], lora: Lora | None = None,
             trainable: Iterable[str] | None = None) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch NLL and its gradient w.r.t. the trainable tensors.

    By default every base tensor is trainable when ``lora`` is None, and only the
    adapter factors (``<weight>.lora_A`` / ``<weight>.lora_B``) otherwise.
    """
    if trainable is None:
        trainable = _lora_need(lora) if lora else set(params.config.param_shapes())
    tp = TeacherForcedPass(params, batch, lora, need=trainable)
    probs = softmax(tp.logits)
    nll = -np.log(probs[np.arange(tp.targets.size), tp.targets])
    loss = float(tp.example_means(nll).mean())
    dlogits = probs
    dlogits[np.arange(tp.targets.size), tp.targets] -= 1.0
    dlogits *= tp.position_weights()[:, None]
    return loss, tp.backward(dlogits)


def cosine_lr(t: int, total: int, base_lr: float) -> float:
    """Cosine decay from ``base_lr`` at round 0 to zero at round ``total - 1``."""
    if total < 1 or not 0 <= t < total:
        raise InputError(f"round {t} outside [0, {total})")
    if total == 1:
        return float(base_lr)
    return float(base_lr * 0.5 * (1.0 + math.cos(math.pi * t / (total - 1))))


# ---------------------------------------------------------------------------
# Incremental decoding support
# ---------------------------------------------------------------------------


class KVSession:
    """Cached incremental forward for one sequence; ``logits`` is the latest next-token row."""

    def __init__(self, params: ModelParams, prompt: Sequence[int], lora: Lora | None = None):
        cfg = params.config
        arr = check_tokens(cfg, prompt)
        if arr.size == 0:
            raise InputError("prompt must hold at least one token")
        self.params, self.lora = params, lora
        x, _, self.past = _run_layers(params.arrays, cfg, arr[None, :], 0, None, lora, False)
        self.length = arr.size
        self.logits = _head(params.arrays, x[-1:])[0][0]

    def append(self, token: int) -> np.ndarray:
        cfg = self.params.config
        if self.length >= cfg.context_len:
            raise InputError("context length exhausted")
        if not 0 <= token < cfg.vocab.size:
            raise InputError(f"token id {token} out of range")
        x, _, new = _run_layers(self.params.arrays, cfg, np.array([[token]]), self.length,
                                self.past, self.lora, False)
        self.past = [(np.concatenate([kp, k], axis=2), np.concatenate([vp, v], axis=2))
                     for (kp, vp), (k, v) in zip(self.past, new)]
        self.length += 1
        self.logits = _head(self.params.arrays, x)[0][0]
        return self.logits
