"""Dense-array layers with hand-written backward passes, AdamW, gradient
checking and the tensor checkpoint container.

Arrays are plain ``numpy.ndarray`` objects. Layers compute in whatever float
dtype their inputs carry, so casting the parameters to float64 (as
:func:`grad_check` does) runs the whole model in double precision.
"""

from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

DTYPE = np.float32

CHECKPOINT_MAGIC = b"PENE"
CHECKPOINT_VERSION = 1


class ConfigurationError(ValueError):
    """Raised on shape or configuration mismatches that cannot be recovered."""


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


# ---------------------------------------------------------------------------
# parameters


@dataclass
class Param:
    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None, repr=False)
    adam_m: np.ndarray = field(default=None, repr=False)
    adam_v: np.ndarray = field(default=None, repr=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        if self.adam_m is None:
            self.adam_m = np.zeros_like(self.value)
        if self.adam_v is None:
            self.adam_v = np.zeros_like(self.value)


class ParamStore:
    """Ordered name -> :class:`Param` mapping shared by all model parts."""

    def __init__(self):
        self._params: dict[str, Param] = {}

    def add(self, name: str, value: np.ndarray) -> Param:
        if name in self._params:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        p = Param(name, np.asarray(value, dtype=DTYPE))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Param]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def select(self, prefix: str) -> list[Param]:
        return [p for n, p in self._params.items() if n.startswith(prefix)]

    def zero_grad(self) -> None:
        for p in self:
            p.grad[...] = 0

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.value for n, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self._params.items():
            if name not in state:
                if strict:
                    raise ConfigurationError(f"missing parameter {name!r} in state")
                continue
            arr = np.asarray(state[name])
            if arr.shape != p.value.shape:
                raise ConfigurationError(
                    f"shape mismatch for {name!r}: {arr.shape} vs {p.value.shape}"
                )
            p.value = arr.astype(p.value.dtype, copy=True)
            p.grad = np.zeros_like(p.value)

    def copy_values(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self._params.items()}

    @contextmanager
    def precision(self, dtype) -> Iterator["ParamStore"]:
        """Temporarily run with parameter values (and grads) cast to ``dtype``."""
        saved = {n: (p.value, p.grad) for n, p in self._params.items()}
        try:
            for p in self:
                p.value = p.value.astype(dtype)
                p.grad = np.zeros_like(p.value)
            yield self
        finally:
            for n, p in self._params.items():
                p.value, p.grad = saved[n]


# ---------------------------------------------------------------------------
# layers


def _check_last_dim(x: np.ndarray, n: int, what: str) -> None:
    if x.shape[-1] != n:
        raise ConfigurationError(f"{what}: expected last dim {n}, got shape {x.shape}")


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None) -> np.ndarray:
    """``out[..., k] = sum_j w[k, j] * x[..., j] + b[k]``."""
    if w.ndim != 2:
        raise ConfigurationError(f"weight must be 2-D, got shape {w.shape}")
    _check_last_dim(x, w.shape[1], "linear_forward")
    out = x @ w.T
    if b is not None:
        if b.shape != (w.shape[0],):
            raise ConfigurationError(f"bias shape {b.shape} does not match weight {w.shape}")
        out = out + b
    return out


def linear_backward(dy: np.ndarray, x: np.ndarray, w: np.ndarray):
    """Returns ``(dx, dw, db)`` for :func:`linear_forward`."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = dy2.T @ x2
    db = dy2.sum(axis=0)
    dx = dy @ w
    return dx, dw, db


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    return dy * (x > 0)


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_ce_weighted(logits: np.ndarray, target: np.ndarray, class_weights) -> tuple[float, np.ndarray]:
    """Class-weighted cross entropy averaged over every cell.

    ``logits`` has shape ``[..., K]`` and ``target`` the leading shape with
    integer classes. The loss is ``mean(w[t] * -log softmax(logits)[t])`` where
    the mean runs over all cells (not normalised by the weights).
    Returns ``(loss, dloss/dlogits)``.
    """
    logits = np.asarray(logits)
    target = np.asarray(target)
    w = np.asarray(class_weights, dtype=logits.dtype)
    k = logits.shape[-1]
    if target.shape != logits.shape[:-1]:
        raise ConfigurationError(
            f"target shape {target.shape} does not match logits {logits.shape}"
        )
    if w.shape != (k,):
        raise ConfigurationError(f"class_weights must have shape ({k},), got {w.shape}")
    n_cells = max(1, target.size)
    logp = log_softmax(logits)
    flat_logp = logp.reshape(-1, k)
    flat_t = target.reshape(-1).astype(np.int64)
    cell_w = w[flat_t]
    picked = flat_logp[np.arange(flat_t.size), flat_t]
    # .item() keeps extended precision (longdouble) for gradient checks
    loss = (-(cell_w * picked).sum() / n_cells).item()
    grad = np.exp(flat_logp)
    grad[np.arange(flat_t.size), flat_t] -= 1
    grad *= (cell_w / n_cells)[:, None]
    return loss, grad.reshape(logits.shape).astype(logits.dtype, copy=False)


def embedding_forward(table: np.ndarray, ids: np.ndarray) -> np.ndarray:
    return table[ids]


def embedding_backward(dy: np.ndarray, ids: np.ndarray, table_shape) -> np.ndarray:
    g = np.zeros(table_shape, dtype=dy.dtype)
    np.add.at(g, ids, dy)
    return g


def attention_forward(q: np.ndarray, k: np.ndarray, v: np.ndarray):
    """Scaled dot-product attention over ``[heads, N, d]`` inputs.

    Returns ``(out, probs)``; ``probs`` is needed by the backward pass.
    """
    d = q.shape[-1]
    scores = q @ np.swapaxes(k, -1, -2) / math.sqrt(d)
    probs = softmax(scores, axis=-1)
    return probs @ v, probs


def attention_backward(dout: np.ndarray, q, k, v, probs):
    d = q.shape[-1]
    scale = 1.0 / math.sqrt(d)
    dv = np.swapaxes(probs, -1, -2) @ dout
    dprobs = dout @ np.swapaxes(v, -1, -2)
    dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
    dq = dscores @ k * scale
    dk = np.swapaxes(dscores, -1, -2) @ q * scale
    return dq, dk, dv


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    warmup_ratio: float = 0.1
    total_steps: int = 1000

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigurationError("betas must lie in [0, 1)")
        if self.epsilon <= 0 or self.weight_decay < 0:
            raise ConfigurationError("epsilon must be positive and weight_decay non-negative")
        if not 0 <= self.warmup_ratio <= 1:
            raise ConfigurationError("warmup_ratio must lie in [0, 1]")
        if self.total_steps < 1:
            raise ConfigurationError("total_steps must be positive")

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_ratio * self.total_steps))

    def lr_at(self, step: int) -> float:
        """Linear warmup to ``learning_rate`` then linear decay to 0 at ``total_steps``."""
        warm = self.warmup_steps
        if step <= 0:
            return 0.0
        if warm > 0 and step < warm:
            return self.learning_rate * step / warm
        if step >= self.total_steps:
            return 0.0
        span = self.total_steps - warm
        return self.learning_rate * (self.total_steps - step) / span


def adamw_step(params: Iterable[Param], cfg: OptimizerConfig) -> None:
    """One AdamW update with decoupled weight decay; grads are zeroed after.

    The schedule position of each parameter is its own ``step_count`` after
    incrementing, so the first update uses ``cfg.lr_at(1)``.
    """
    for p in params:
        p.step_count += 1
        t = p.step_count
        lr = cfg.lr_at(t)
        g = p.grad
        p.adam_m *= cfg.beta1
        p.adam_m += (1 - cfg.beta1) * g
        p.adam_v *= cfg.beta2
        p.adam_v += (1 - cfg.beta2) * (g * g)
        if lr > 0:
            m_hat = p.adam_m / (1 - cfg.beta1**t)
            v_hat = p.adam_v / (1 - cfg.beta2**t)
            if cfg.weight_decay:
                p.value *= 1 - lr * cfg.weight_decay
            p.value -= (lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(p.value.dtype)
        p.grad[...] = 0


def clip_grad_norm(params: Iterable[Param], max_norm: float) -> float:
    params = list(params)
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= scale
    return total


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))


def grad_check(
    fn: Callable[[], float],
    params: ParamStore | Iterable[Param],
    epsilon: float = 6e-6,
    max_coords_per_param: int = 8,
    seed: int = 0,
    dtype=np.float64,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` computes the scalar loss and writes analytic gradients into each
    ``Param.grad`` (it must zero them itself or start from zeroed grads).
    Parameters are cast to ``dtype`` for the duration of the check and
    restored afterwards; coordinates are sampled per parameter.

    The default step is close to the cube root of float64 machine epsilon,
    which balances truncation error against cancellation in ``up - down``.
    """
    store = params if isinstance(params, ParamStore) else _wrap(params)
    rng = make_rng(seed)
    worst = 0.0
    with store.precision(dtype):
        store.zero_grad()
        fn()
        analytic = {p.name: p.grad.copy() for p in store}
        for p in store:
            flat = p.value.reshape(-1)
            n = flat.size
            if max_coords_per_param and n > max_coords_per_param:
                coords = rng.choice(n, size=max_coords_per_param, replace=False)
            else:
                coords = np.arange(n)
            for c in coords:
                orig = flat[c]
                flat[c] = orig + epsilon
                store.zero_grad()
                up = fn()
                flat[c] = orig - epsilon
                store.zero_grad()
                down = fn()
                flat[c] = orig
                numeric = (up - down) / (2 * epsilon)
                worst = max(worst, relative_error(float(analytic[p.name].reshape(-1)[c]), numeric))
        store.zero_grad()
    return float(worst)


def _wrap(params: Iterable[Param]) -> ParamStore:
    store = ParamStore()
    for p in params:
        store._params[p.name] = p
    return store


# ---------------------------------------------------------------------------
# checkpoint container


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    """Write named float32 tensors in the ``PENE`` container format.

    Layout: magic, u32 version, then per tensor: u32 name length, UTF-8 name,
    u32 rank, rank x u64 dims, little-endian float32 data. Names are written
    in the order given.
    """
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        chunks.append(a.tobytes())
    Path(path).write_bytes(b"".join(chunks))


class CheckpointError(ValueError):
    pass


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    pos = 8
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(data):
            (nlen,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", data, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", data, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos)
            pos += 4 * count
            out[name] = arr.reshape(dims).astype(np.float32)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated or corrupt record ({exc})") from exc
    return out
