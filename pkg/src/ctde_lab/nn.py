"""Small fixed-topology neural nets with hand-derived gradients.

Everything in this project runs on one network shape: input -> hidden ->
hidden -> output, ReLU on the hidden layers, and a head table that splits the
output vector into contiguous slices, each either linear or a softmax group.
The topology is deliberately hard-wired; there is no general autodiff here.
`mlp_backward` returns parameter gradients *and* the gradient with respect to
the input vector, because the communication learning step routes one agent's
loss through another agent's input slots.

All arithmetic is float64. Functions are pure except `adam_step` and
`soft_update`, which update their policy argument in place (single writer per
policy object).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

HEAD_KINDS = ("linear", "softmax")
LOSS_KINDS = ("cross_entropy", "mse")

# floor used when a softmax probability underflows; keeps cross-entropy
# gradients finite without changing any realistically-scaled result
_P_FLOOR = 1e-300

_GUMBEL_EPS = 1e-20


@dataclass(frozen=True)
class Head:
    """One contiguous slice of the output vector.

    kind "linear" passes raw affine outputs through; "softmax" normalizes the
    slice into a probability vector.
    """

    offset: int
    length: int
    kind: str

    def slice(self) -> slice:
        return slice(self.offset, self.offset + self.length)


def _validate_heads(heads: tuple[Head, ...], out_len: int) -> None:
    pos = 0
    for h in heads:
        if h.kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {h.kind!r}")
        if h.offset != pos or h.length < 1:
            raise ValueError("heads must partition the output vector contiguously")
        pos += h.length
    if pos != out_len:
        raise ValueError(f"heads cover {pos} outputs, network has {out_len}")


@dataclass
class MlpPolicy:
    """Two-hidden-layer perceptron plus output head table.

    weights[k] has shape (fan_out, fan_in); forward computes x @ W.T + b.
    """

    layer_sizes: tuple[int, int, int, int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    heads: tuple[Head, ...]
    activation: str = "relu"

    def __post_init__(self) -> None:
        if len(self.layer_sizes) != 4:
            raise ValueError("exactly two hidden layers are supported")
        if self.activation != "relu":
            raise ValueError(f"unsupported activation {self.activation!r}")
        sizes = self.layer_sizes
        for k in range(3):
            if self.weights[k].shape != (sizes[k + 1], sizes[k]):
                raise ValueError("weight shape does not match layer_sizes")
            if self.biases[k].shape != (sizes[k + 1],):
                raise ValueError("bias shape does not match layer_sizes")
        self.heads = tuple(self.heads)
        _validate_heads(self.heads, sizes[3])
        for arr in self.params():
            if not np.all(np.isfinite(arr)):
                raise ValueError("non-finite parameter value")

    # -- construction ------------------------------------------------------

    @classmethod
    def create(
        cls,
        layer_sizes: tuple[int, int, int, int],
        heads: tuple[Head, ...],
        rng: np.random.Generator,
    ) -> "MlpPolicy":
        """Fan-in scaled uniform init, U(-1/sqrt(n_in), 1/sqrt(n_in))."""
        weights, biases = [], []
        for k in range(3):
            fan_in = layer_sizes[k]
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, (layer_sizes[k + 1], fan_in)))
            biases.append(rng.uniform(-bound, bound, layer_sizes[k + 1]))
        return cls(tuple(layer_sizes), weights, biases, tuple(heads))

    @classmethod
    def zeros(
        cls, layer_sizes: tuple[int, int, int, int], heads: tuple[Head, ...]
    ) -> "MlpPolicy":
        weights = [np.zeros((layer_sizes[k + 1], layer_sizes[k])) for k in range(3)]
        biases = [np.zeros(layer_sizes[k + 1]) for k in range(3)]
        return cls(tuple(layer_sizes), weights, biases, tuple(heads))

    def copy(self) -> "MlpPolicy":
        return MlpPolicy(
            self.layer_sizes,
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.heads,
            self.activation,
        )

    # -- views -------------------------------------------------------------

    def params(self) -> list[np.ndarray]:
        """Parameter arrays in fixed order W1, b1, W2, b2, W3, b3."""
        out = []
        for k in range(3):
            out.append(self.weights[k])
            out.append(self.biases[k])
        return out

    @property
    def input_len(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_len(self) -> int:
        return self.layer_sizes[3]

    def head_named(self, kind_index: int) -> Head:
        return self.heads[kind_index]


@dataclass
class GradBundle:
    """Gradients congruent to a policy, plus the input gradient.

    d_weights / d_biases are summed over batch rows; d_input keeps one row per
    input row (callers fold any 1/B factor into the upstream gradient).
    """

    d_weights: list[np.ndarray]
    d_biases: list[np.ndarray]
    d_input: np.ndarray

    def params(self) -> list[np.ndarray]:
        out = []
        for k in range(3):
            out.append(self.d_weights[k])
            out.append(self.d_biases[k])
        return out

    @classmethod
    def zeros_like(cls, policy: MlpPolicy, input_shape) -> "GradBundle":
        return cls(
            [np.zeros_like(w) for w in policy.weights],
            [np.zeros_like(b) for b in policy.biases],
            np.zeros(input_shape),
        )

    def add_params(self, other: "GradBundle", scale: float = 1.0) -> None:
        for a, b in zip(self.params(), other.params()):
            a += scale * b

    def global_norm(self) -> float:
        total = 0.0
        for g in self.params():
            total += float(np.sum(g * g))
        return float(np.sqrt(total))


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _as_rows(x: np.ndarray, n_cols: int, what: str) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != n_cols:
            raise ValueError(f"{what}: expected length {n_cols}, got {x.shape[0]}")
        return x[None, :], True
    if x.ndim == 2:
        if x.shape[1] != n_cols:
            raise ValueError(f"{what}: expected width {n_cols}, got {x.shape[1]}")
        return x, False
    raise ValueError(f"{what}: expected a vector or a matrix of rows")


def _forward_cache(policy: MlpPolicy, x: np.ndarray) -> tuple[np.ndarray, dict]:
    rows, squeeze = _as_rows(x, policy.input_len, "mlp input")
    w, b = policy.weights, policy.biases
    z1 = rows @ w[0].T + b[0]
    a1 = np.maximum(z1, 0.0)
    z2 = a1 @ w[1].T + b[1]
    a2 = np.maximum(z2, 0.0)
    z3 = a2 @ w[2].T + b[2]
    out = z3.copy()
    for h in policy.heads:
        if h.kind == "softmax":
            out[:, h.slice()] = _softmax_rows(z3[:, h.slice()])
    cache = {"x": rows, "z1": z1, "a1": a1, "z2": z2, "a2": a2, "out": out,
             "squeeze": squeeze}
    return (out[0] if squeeze else out), cache


def mlp_forward(policy: MlpPolicy, x: np.ndarray) -> np.ndarray:
    """Output vector for input x; a matrix of inputs gives a matrix of rows.

    Softmax head slices of the result are probability vectors; linear slices
    are raw affine outputs.
    """
    out, _ = _forward_cache(policy, x)
    return out


def _backward_from_cache(
    policy: MlpPolicy, cache: dict, upstream: np.ndarray
) -> GradBundle:
    out = cache["out"]
    up, _ = _as_rows(upstream, policy.output_len, "upstream gradient")
    if up.shape[0] != out.shape[0]:
        raise ValueError("upstream rows do not match forward rows")
    # compose loss gradient through the head nonlinearities to get d/dz3
    dz3 = up.copy()
    for h in policy.heads:
        if h.kind == "softmax":
            sl = h.slice()
            p = out[:, sl]
            g = up[:, sl]
            dz3[:, sl] = p * (g - np.sum(g * p, axis=1, keepdims=True))
    w = policy.weights
    a1, a2, x = cache["a1"], cache["a2"], cache["x"]
    dw3 = dz3.T @ a2
    db3 = dz3.sum(axis=0)
    da2 = dz3 @ w[2]
    dz2 = da2 * (cache["z2"] > 0.0)
    dw2 = dz2.T @ a1
    db2 = dz2.sum(axis=0)
    da1 = dz2 @ w[1]
    dz1 = da1 * (cache["z1"] > 0.0)
    dw1 = dz1.T @ x
    db1 = dz1.sum(axis=0)
    dx = dz1 @ w[0]
    if cache["squeeze"]:
        dx = dx[0]
    return GradBundle([dw1, dw2, dw3], [db1, db2, db3], dx)


def mlp_backward(
    policy: MlpPolicy, x: np.ndarray, upstream: np.ndarray
) -> GradBundle:
    """Gradients of L = <upstream, mlp_forward(policy, x)>.

    The inner product is taken on the post-head output, so softmax head
    Jacobians are composed in. Returns d L / d params and d L / d x.
    """
    _, cache = _forward_cache(policy, x)
    return _backward_from_cache(policy, cache, upstream)


# -- optimizer state -------------------------------------------------------


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_policy(cls, policy: MlpPolicy) -> "AdamState":
        return cls(
            [np.zeros_like(p) for p in policy.params()],
            [np.zeros_like(p) for p in policy.params()],
        )


def adam_step(
    policy: MlpPolicy, grads: GradBundle, state: AdamState, lr: float
) -> MlpPolicy:
    """One bias-corrected Adam update, applied to the policy in place.

    Refuses non-finite gradients rather than corrupting the parameters.
    """
    gs = grads.params()
    for g in gs:
        if not np.all(np.isfinite(g)):
            raise ValueError("adam_step: non-finite gradient, refusing update")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for p, g, m, v in zip(policy.params(), gs, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return policy


def soft_update(target: MlpPolicy, source: MlpPolicy, tau: float) -> MlpPolicy:
    """target <- (1 - tau) * target + tau * source, elementwise, in place."""
    if target.layer_sizes != source.layer_sizes:
        raise ValueError("soft_update: mismatched layer sizes")
    for tp, sp in zip(target.params(), source.params()):
        tp *= 1.0 - tau
        tp += tau * sp
    return target


def clip_grad_norm(grads: GradBundle, max_norm: float) -> float:
    """Scale parameter gradients so the global norm is at most max_norm.

    max_norm <= 0 disables clipping. Returns the pre-clip norm.
    """
    norm = grads.global_norm()
    if max_norm > 0.0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.params():
            g *= scale
    return norm


# -- sampling and losses ---------------------------------------------------


def gumbel_softmax_sample(
    logits: np.ndarray, temperature: float, rng: np.random.Generator
) -> np.ndarray:
    """softmax((logits + g) / temperature) with g drawn from Gumbel(0, 1)."""
    logits = np.asarray(logits, dtype=np.float64)
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    u = rng.random(logits.shape)
    g = -np.log(-np.log(u + _GUMBEL_EPS) + _GUMBEL_EPS)
    return _softmax_rows((logits + g) / temperature)


def softmax_ce_batch(
    out_rows: np.ndarray, head: Head, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row cross-entropy of one softmax head against integer labels.

    Returns (losses, upstream rows over the full output width). The upstream
    is d loss / d output, i.e. -1/p at the label coordinate of the head slice,
    before composition through the softmax Jacobian in mlp_backward.
    """
    if head.kind != "softmax":
        raise ValueError("cross-entropy needs a softmax head")
    labels = np.asarray(labels)
    if labels.ndim != 1 or out_rows.ndim != 2:
        raise ValueError("expected label vector and output rows")
    if np.any(labels < 0) or np.any(labels >= head.length):
        raise ValueError("label outside the head's class range")
    rows = np.arange(out_rows.shape[0])
    p = np.maximum(out_rows[rows, head.offset + labels], _P_FLOOR)
    losses = -np.log(p)
    upstream = np.zeros_like(out_rows)
    upstream[rows, head.offset + labels] = -1.0 / p
    return losses, upstream


def mse_batch(
    out_rows: np.ndarray, target_rows: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Per-row mean squared error over the full output vector."""
    if out_rows.shape != target_rows.shape:
        raise ValueError("mse target shape mismatch")
    diff = out_rows - target_rows
    losses = np.mean(diff * diff, axis=1)
    upstream = 2.0 * diff / out_rows.shape[1]
    return losses, upstream


def loss_and_grad(kind: str, output: np.ndarray, heads, target):
    """Loss value and upstream gradient ready to feed ``mlp_backward``.

    kind "cross_entropy": target is a sequence of class indices aligned with
    the softmax heads in order (entries may be None to leave a head
    unsupervised); the loss sums -log p over supervised heads.

    kind "mse": target is a full output-length vector; the loss is the mean
    squared error over the whole output.
    """
    output = np.asarray(output, dtype=np.float64)
    if output.ndim != 1:
        raise ValueError("loss_and_grad works on a single output vector")
    heads = tuple(heads)
    if kind == "cross_entropy":
        soft = [h for h in heads if h.kind == "softmax"]
        target = list(target)
        if len(target) != len(soft):
            raise ValueError(
                f"expected {len(soft)} labels (one per softmax head), got {len(target)}"
            )
        total = 0.0
        upstream = np.zeros_like(output)
        for h, lab in zip(soft, target):
            if lab is None:
                continue
            losses, up = softmax_ce_batch(output[None, :], h, np.array([lab]))
            total += float(losses[0])
            upstream += up[0]
        return total, upstream
    if kind == "mse":
        target = np.asarray(target, dtype=np.float64)
        if target.shape != output.shape:
            raise ValueError("mse target must match the output length")
        losses, up = mse_batch(output[None, :], target[None, :])
        return float(losses[0]), up[0]
    raise ValueError(f"unknown loss kind {kind!r}")


# -- checkpoint io ---------------------------------------------------------
#
# File layout: one UTF-8 JSON manifest line (layer sizes, head table,
# activation tag, loss kind, plus caller tags), then the six parameter arrays
# in order W1, b1, W2, b2, W3, b3, each as a little-endian uint64 element
# count followed by that many little-endian float64 values. Files may hold
# several records back to back (one per network in a bundle).


def _write_record(fh, policy: MlpPolicy, manifest_extra: dict | None) -> None:
    manifest = {
        "layer_sizes": list(policy.layer_sizes),
        "heads": [[h.offset, h.length, h.kind] for h in policy.heads],
        "activation": policy.activation,
        "loss_kind": None,
    }
    if manifest_extra:
        manifest.update(manifest_extra)
    fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
    for arr in policy.params():
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        fh.write(np.uint64(flat.size).astype("<u8").tobytes())
        fh.write(flat.tobytes())


def _read_record(fh):
    line = fh.readline()
    if not line:
        return None
    manifest = json.loads(line.decode("utf-8"))
    sizes = tuple(manifest["layer_sizes"])
    heads = tuple(Head(o, l, k) for o, l, k in manifest["heads"])
    shapes = []
    for k in range(3):
        shapes.append((sizes[k + 1], sizes[k]))
        shapes.append((sizes[k + 1],))
    arrays = []
    for shape in shapes:
        raw = fh.read(8)
        if len(raw) != 8:
            raise ValueError("truncated checkpoint record")
        count = int(np.frombuffer(raw, dtype="<u8")[0])
        expected = int(np.prod(shape)) if shape else 1
        if count != expected:
            raise ValueError("checkpoint array length does not match manifest")
        buf = fh.read(8 * count)
        if len(buf) != 8 * count:
            raise ValueError("truncated checkpoint record")
        arrays.append(np.frombuffer(buf, dtype="<f8").reshape(shape).copy())
    policy = MlpPolicy(
        sizes,
        [arrays[0], arrays[2], arrays[4]],
        [arrays[1], arrays[3], arrays[5]],
        heads,
        manifest.get("activation", "relu"),
    )
    return policy, manifest


def save_checkpoint(path, items) -> None:
    """Write a list of (policy, manifest_extra) records to one file."""
    with open(path, "wb") as fh:
        for policy, extra in items:
            _write_record(fh, policy, extra)


def load_checkpoint(path) -> list[tuple[MlpPolicy, dict]]:
    records = []
    with open(path, "rb") as fh:
        while True:
            rec = _read_record(fh)
            if rec is None:
                break
            records.append(rec)
    if not records:
        raise ValueError(f"no records in checkpoint {path}")
    return records
