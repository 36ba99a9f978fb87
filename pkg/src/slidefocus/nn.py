"""Neural layers, losses, optimizer, parameter store, checkpoints.

Everything here operates on autodiff Tensors. Parameter creation order is
deterministic (models build all parameters up front), so a fixed seed
yields bit-identical initialization.
"""

from __future__ import annotations

import json
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

NEG_INF = -1e30  # additive attention mask value; exact isolation after max-subtraction


class ParamStore:
    """Named learnable tensors with seeded initialization."""

    def __init__(self, seed: int = 0, dtype=np.float64):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def param(self, name: str, shape, init: str = "xavier") -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        if init == "xavier":
            fan_in = shape[0] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            vals = self.rng.uniform(-lim, lim, size=shape)
        elif init == "zeros":
            vals = np.zeros(shape)
        elif init == "ones":
            vals = np.ones(shape)
        elif init == "normal":
            vals = self.rng.normal(0.0, 0.02, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(np.asarray(vals, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def load_values(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                raise KeyError(f"checkpoint missing parameter {name!r}")
            a = arrays[name]
            if tuple(a.shape) != tuple(t.values.shape):
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {a.shape}, model {t.values.shape}")
            t.values = np.asarray(a, dtype=self.dtype)

    def export_values(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self._params.items()}


# ---------------------------------------------------------------------------
# layers


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ad.matmul(x, w)
    if b is not None:
        out = ad.add(out, b)
    return out


def build_linear(ps: ParamStore, prefix: str, d_in: int, d_out: int, bias: bool = True):
    ps.param(f"{prefix}/w", (d_in, d_out))
    if bias:
        ps.param(f"{prefix}/b", (d_out,), init="zeros")


def apply_linear(ps: ParamStore, prefix: str, x: Tensor) -> Tensor:
    b = ps[f"{prefix}/b"] if f"{prefix}/b" in ps else None
    return linear(x, ps[f"{prefix}/w"], b)


def build_layer_norm(ps: ParamStore, prefix: str, d: int):
    ps.param(f"{prefix}/g", (d,), init="ones")
    ps.param(f"{prefix}/b", (d,), init="zeros")


def apply_layer_norm(ps: ParamStore, prefix: str, x: Tensor) -> Tensor:
    return ad.layer_norm(x, ps[f"{prefix}/g"], ps[f"{prefix}/b"])


def build_mlp_head(ps: ParamStore, prefix: str, d_in: int, d_hidden: int, d_out: int):
    build_linear(ps, f"{prefix}/fc1", d_in, d_hidden)
    build_linear(ps, f"{prefix}/fc2", d_hidden, d_out)


def apply_mlp_head(ps: ParamStore, prefix: str, x: Tensor) -> Tensor:
    h = ad.gelu(apply_linear(ps, f"{prefix}/fc1", x))
    return apply_linear(ps, f"{prefix}/fc2", h)


def build_encoder_block(ps: ParamStore, prefix: str, d: int):
    """Pre-norm transformer encoder block parameters (MLP hidden = 4d).

    Q/K projections carry no bias: a key bias shifts every attention score
    in a row equally, which softmax cancels, leaving a permanently
    zero-gradient direction.
    """
    build_layer_norm(ps, f"{prefix}/ln1", d)
    build_linear(ps, f"{prefix}/q", d, d, bias=False)
    build_linear(ps, f"{prefix}/k", d, d, bias=False)
    build_linear(ps, f"{prefix}/v", d, d)
    build_linear(ps, f"{prefix}/o", d, d)
    build_layer_norm(ps, f"{prefix}/ln2", d)
    build_linear(ps, f"{prefix}/m1", d, 4 * d)
    build_linear(ps, f"{prefix}/m2", 4 * d, d)


def _split_heads(t: Tensor, heads: int) -> Tensor:
    s, d = t.shape
    t = ad.reshape(t, (s, heads, d // heads))
    return ad.transpose(t, (1, 0, 2))  # [heads, S, dh]


def _merge_heads(t: Tensor) -> Tensor:
    h, s, dh = t.shape
    return ad.reshape(ad.transpose(t, (1, 0, 2)), (s, h * dh))


def apply_encoder_block(ps: ParamStore, prefix: str, x: Tensor, heads: int,
                        mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm residual attention block over an [S, d] token sequence.

    mask, if given, is an [S, S] additive matrix (0 = attend, NEG_INF = blocked)
    applied to the attention scores of every head. No positional encoding.
    """
    s, d = x.shape
    dh = d // heads
    if dh * heads != d:
        raise ValueError("model width must divide evenly across heads")
    h = apply_layer_norm(ps, f"{prefix}/ln1", x)
    q = _split_heads(apply_linear(ps, f"{prefix}/q", h), heads)
    k = _split_heads(apply_linear(ps, f"{prefix}/k", h), heads)
    v = _split_heads(apply_linear(ps, f"{prefix}/v", h), heads)
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(dh))
    if mask is not None:
        scores = ad.add(scores, mask.astype(x.dtype)[None, :, :])
    att = ad.matmul(ad.softmax(scores, axis=-1), v)
    x = ad.add(x, apply_linear(ps, f"{prefix}/o", _merge_heads(att)))
    h2 = apply_layer_norm(ps, f"{prefix}/ln2", x)
    m = apply_linear(ps, f"{prefix}/m2", ad.gelu(apply_linear(ps, f"{prefix}/m1", h2)))
    return ad.add(x, m)


def build_encoder_stack(ps: ParamStore, prefix: str, d: int, depth: int):
    for i in range(depth):
        build_encoder_block(ps, f"{prefix}/blk{i}", d)


def apply_encoder_stack(ps: ParamStore, prefix: str, x: Tensor, heads: int, depth: int,
                        mask: np.ndarray | None = None) -> Tensor:
    for i in range(depth):
        x = apply_encoder_block(ps, f"{prefix}/blk{i}", x, heads, mask)
    return x


def normalized_adjacency(adj: np.ndarray, dtype=np.float64) -> np.ndarray:
    """Symmetric degree normalization of adjacency-with-self-loops.

    Returns D^{-1/2} (A + I) D^{-1/2} as a dense constant matrix.
    """
    a = np.asarray(adj, dtype=dtype) + np.eye(adj.shape[0], dtype=dtype)
    dinv = 1.0 / np.sqrt(a.sum(axis=1))
    return a * dinv[:, None] * dinv[None, :]


def gcn_layer(nhat: np.ndarray, h: Tensor, w: Tensor) -> Tensor:
    """One graph convolution: GeLU(nhat @ h @ w); nhat is a constant."""
    return ad.gelu(ad.matmul(ad.matmul(Tensor(nhat), h), w))


def build_gcn_stack(ps: ParamStore, prefix: str, d_in: int, d: int, layers: int = 3):
    build_linear(ps, f"{prefix}/lift", d_in, d)
    for i in range(layers):
        build_layer_norm(ps, f"{prefix}/ln{i}", d)
        ps.param(f"{prefix}/w{i}", (d, d))


def apply_gcn_stack(ps: ParamStore, prefix: str, nhat: np.ndarray, x: Tensor,
                    layers: int = 3) -> Tensor:
    """Lift node features to width d, then pre-norm residual GCN layers."""
    h = apply_linear(ps, f"{prefix}/lift", x)
    for i in range(layers):
        hn = apply_layer_norm(ps, f"{prefix}/ln{i}", h)
        h = ad.add(h, gcn_layer(nhat, hn, ps[f"{prefix}/w{i}"]))
    return h


# ---------------------------------------------------------------------------
# losses


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Softmax cross-entropy from raw logits, stable under large magnitudes.

    target is a class index for a [C] logit vector, or an index array for
    [T, C] logits (the mean over rows is returned).
    """
    x = logits.values
    if x.ndim == 1:
        idx = np.asarray([int(target)])
        x2 = x[None, :]
    else:
        idx = np.asarray(target, dtype=np.int64)
        x2 = x
    n, c = x2.shape
    m = x2.max(axis=1, keepdims=True)
    e = np.exp(x2 - m)
    z = e.sum(axis=1, keepdims=True)
    p = e / z
    lse = m[:, 0] + np.log(z[:, 0])
    loss = (lse - x2[np.arange(n), idx]).mean()

    def gl(g):
        gg = p.copy()
        gg[np.arange(n), idx] -= 1.0
        gg *= float(g) / n
        return gg if x.ndim == 2 else gg[0]

    return ad.make_op(np.asarray(loss, dtype=x.dtype), [(logits, gl)])


def kl_divergence(p, q, clamp: float = 1e-12) -> Tensor:
    """KL(P || Q) for distribution vectors; 0 ln 0 = 0, Q clamped below.

    Inputs may be Tensors or arrays; both must be nonnegative and sum to 1
    within 1e-6 or a ValueError is raised.
    """
    pt = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    qt = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64))
    pv, qv = pt.values, qt.values
    for name, v in (("P", pv), ("Q", qv)):
        if v.min() < 0:
            raise ValueError(f"{name} has negative entries")
        if abs(v.sum() - 1.0) > 1e-6:
            raise ValueError(f"{name} does not sum to 1 (got {v.sum()!r})")
    qc = np.maximum(qv, clamp)
    active = pv > 0
    terms = np.where(active, pv * (np.log(np.where(active, pv, 1.0)) - np.log(qc)), 0.0)
    val = terms.sum()

    def gp(g):
        return float(g) * np.where(active, np.log(np.where(active, pv, 1.0)) - np.log(qc) + 1.0, 0.0)

    def gq(g):
        return float(g) * np.where(qv > clamp, -pv / qc, 0.0)

    return ad.make_op(np.asarray(val, dtype=pv.dtype), [(pt, gp), (qt, gq)])


# ---------------------------------------------------------------------------
# optimizer


class SGD:
    """SGD with classical momentum and decoupled-from-nothing weight decay.

    v <- momentum * v + grad + weight_decay * theta ; theta <- theta - lr * v.
    Per-parameter learning rates come from lr_for(name).
    """

    def __init__(self, ps: ParamStore, lr_for: Callable[[str], float],
                 momentum: float = 0.9, weight_decay: float = 5e-4):
        self.ps = ps
        self.lr_for = lr_for
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros_like(t.values) for name, t in ps.items()}

    def step(self) -> None:
        for name, t in self.ps.items():
            if t.grad is None:
                continue
            v = self.velocity[name]
            v *= self.momentum
            v += t.grad
            if self.weight_decay:
                v += self.weight_decay * t.values
            t.values = t.values - self.lr_for(name) * v

    def zero_grad(self) -> None:
        self.ps.zero_grad()

    def export_velocity(self) -> dict:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_velocity(self, arrays: dict) -> None:
        for name, v in arrays.items():
            if name not in self.velocity:
                raise KeyError(f"unknown velocity buffer {name!r}")
            cur = self.velocity[name]
            v = np.asarray(v, dtype=cur.dtype)
            if cur.shape != v.shape:
                raise ValueError(f"velocity shape mismatch for {name!r}")
            self.velocity[name] = v.copy()


def sgd_step(theta: np.ndarray, grad: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float = 0.9, weight_decay: float = 5e-4):
    """Single-tensor update rule, exposed for direct verification."""
    v = momentum * velocity + grad + weight_decay * theta
    return theta - lr * v, v


def clip_grad_norm(ps: ParamStore, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns the pre-clip norm. max_norm <= 0 disables clipping. The norm is
    accumulated in float64 regardless of parameter dtype so the clip decision
    does not depend on the training precision.
    """
    sq = 0.0
    for _, t in ps.items():
        if t.grad is not None:
            g = np.asarray(t.grad, dtype=np.float64)
            sq += float((g * g).sum())
    norm = sq ** 0.5
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for _, t in ps.items():
            if t.grad is not None:
                t.grad = t.grad * np.asarray(scale, dtype=t.grad.dtype)
    return norm


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(f: Callable[[], Tensor], params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between backward() and central finite differences.

    f rebuilds the scalar loss from current parameter values. Relative error
    is |a - n| / max(|a|, |n|, 1e-8) per element; the max over all checked
    elements is returned.
    """
    for p in params:
        p.grad = None
    loss = f()
    ad.backward(loss)
    analytic = [np.zeros_like(p.values) if p.grad is None else np.array(p.grad, dtype=np.float64)
                for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.values.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().values)
            flat[i] = orig - eps
            f_minus = float(f().values)
            flat[i] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            a = an.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named tensors: length-prefixed JSON header + raw little-endian bytes."""
    header: dict = {"meta": meta or {}, "tensors": {}}
    payload = bytearray()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        dt = a.dtype.newbyteorder("<")
        raw = a.astype(dt, copy=False).tobytes()
        header["tensors"][name] = {
            "shape": list(a.shape),
            "dtype": a.dtype.name,
            "offset": len(payload),
        }
        payload.extend(raw)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(len(hbytes).to_bytes(8, "little"))
        fh.write(hbytes)
        fh.write(bytes(payload))


def load_checkpoint(path):
    """Read a checkpoint; returns (meta, {name: array})."""
    with open(path, "rb") as fh:
        hlen = int.from_bytes(fh.read(8), "little")
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    arrays = {}
    for name, info in header["tensors"].items():
        dt = np.dtype(info["dtype"]).newbyteorder("<")
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        a = np.frombuffer(payload, dtype=dt, count=count, offset=info["offset"])
        arrays[name] = a.reshape(info["shape"]).astype(np.dtype(info["dtype"]))
    return header["meta"], arrays
