"""DDNE: bidirectional GRU encoder + MLP decoder for next-snapshot link prediction.

A node's history (``N`` adjacency rows) is read forward and backward by two
GRUs. The per-step states ``[forward_k, backward_k]`` are concatenated in
time order into an embedding ``c`` of length ``2 * hidden_dim * N`` that the
decoder maps to ``n`` link probabilities.

Batches are column-major: the input for snapshot ``k`` is an ``(n, B)``
matrix whose columns are the ``k``-th rows of ``B`` histories.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from typing import BinaryIO, Sequence

import numpy as np

from .diffcomp import DimensionError, NonFiniteError, Tape, Value
from .dynnet import DynamicNetwork, NodeHistory, SpecError

log = logging.getLogger(__name__)

GATES = ("z", "r", "h")
CHECKPOINT_MAGIC = b"DDNECKPT"
CHECKPOINT_VERSION = 1


class DivergenceError(RuntimeError):
    def __init__(self, epoch: int, learning_rate: float):
        super().__init__(f"training diverged at epoch {epoch} (learning_rate={learning_rate})")
        self.epoch = epoch
        self.learning_rate = learning_rate


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class DdneHyper:
    history_length: int = 2
    hidden_dim: int = 64
    decoder_hidden: tuple[int, ...] = (128,)
    alpha: float = 2.0
    beta: float = 0.1
    reg_weight: float = 1e-4
    learning_rate: float = 0.01
    epochs: int = 200
    batch_size: int = 32
    rng_seed: int = 0
    optimizer: str = "sgd"
    threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "decoder_hidden", tuple(int(d) for d in self.decoder_hidden))
        if self.history_length < 2:
            raise SpecError("history_length must be >= 2")
        if self.hidden_dim < 1 or any(d < 1 for d in self.decoder_hidden):
            raise SpecError("layer widths must be positive")
        if not self.alpha > 1:
            raise SpecError("alpha must exceed 1")
        if self.beta < 0 or self.reg_weight < 0:
            raise SpecError("beta and reg_weight must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise SpecError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise SpecError(f"unknown optimizer {self.optimizer!r}")
        if not 0 < self.threshold < 1:
            raise SpecError("threshold must lie in (0, 1)")

    def decoder_dims(self, n: int) -> tuple[int, ...]:
        return self.decoder_hidden + (n,)

    @classmethod
    def from_dict(cls, d: dict) -> "DdneHyper":
        d = dict(d)
        if "decoder_hidden" in d:
            d["decoder_hidden"] = tuple(d["decoder_hidden"])
        return cls(**d)


def parameter_shapes(n: int, hyper: DdneHyper) -> dict[str, tuple[int, int]]:
    """Name -> shape for every trainable array, in canonical order."""
    d = hyper.hidden_dim
    shapes: dict[str, tuple[int, int]] = {}
    for direction in ("fwd", "bwd"):
        for g in GATES:
            shapes[f"{direction}.W_{g}"] = (d, n)
            shapes[f"{direction}.U_{g}"] = (d, d)
            shapes[f"{direction}.b_{g}"] = (d, 1)
    width = 2 * d * hyper.history_length
    for m, out in enumerate(hyper.decoder_dims(n)):
        shapes[f"dec{m}.W"] = (out, width)
        shapes[f"dec{m}.b"] = (out, 1)
        width = out
    return shapes


@dataclass
class DdneModel:
    hyper: DdneHyper
    n: int
    params: dict[str, np.ndarray]
    loss_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        expected = parameter_shapes(self.n, self.hyper)
        if list(self.params) != list(expected):
            missing = set(expected) ^ set(self.params)
            if missing:
                raise DimensionError(f"parameter set mismatch: {sorted(missing)}")
            self.params = {k: self.params[k] for k in expected}
        for name, shape in expected.items():
            arr = np.asarray(self.params[name], dtype=np.float64)
            if arr.shape != shape:
                raise DimensionError(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"{name} has non-finite entries")
            self.params[name] = arr

    @property
    def history_length(self) -> int:
        return self.hyper.history_length

    @property
    def embedding_dim(self) -> int:
        return 2 * self.hyper.hidden_dim * self.hyper.history_length

    def copy(self) -> "DdneModel":
        return DdneModel(self.hyper, self.n, {k: v.copy() for k, v in self.params.items()},
                         list(self.loss_history))


def init_model(n: int, hyper: DdneHyper, rng: np.random.Generator | None = None) -> DdneModel:
    """Uniform(-r, r) initialisation with ``r = 1/sqrt(fan_in)`` of each layer."""
    rng = rng if rng is not None else np.random.default_rng(hyper.rng_seed)
    d = hyper.hidden_dim
    params = {}
    for name, shape in parameter_shapes(n, hyper).items():
        if ".W_" in name:
            fan_in = n
        elif ".U_" in name or ".b_" in name:
            fan_in = d
        else:
            layer = name.split(".")[0]
            fan_in = parameter_shapes(n, hyper)[f"{layer}.W"][1]
        r = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-r, r, size=shape)
    return DdneModel(hyper, n, params)


def zero_model(n: int, hyper: DdneHyper) -> DdneModel:
    return DdneModel(hyper, n, {k: np.zeros(s) for k, s in parameter_shapes(n, hyper).items()})


# -- forward pass on a tape ------------------------------------------------

def param_values(tape: Tape, model: DdneModel, requires_grad: bool = False) -> dict[str, Value]:
    return {k: tape.leaf(v, requires_grad=requires_grad) for k, v in model.params.items()}


def _gru_step(tape: Tape, P: dict[str, Value], prefix: str, x: Value, h: Value | None) -> Value:
    def gate(g, hidden):
        pre = tape.matmul(P[f"{prefix}.W_{g}"], x)
        if hidden is not None:
            pre = tape.add(pre, tape.matmul(P[f"{prefix}.U_{g}"], hidden))
        return tape.add(pre, P[f"{prefix}.b_{g}"])

    z = tape.sigmoid(gate("z", h))
    if h is None:
        # zero initial state: recurrent terms vanish
        return tape.hadamard(z, tape.tanh(gate("h", None)))
    r = tape.sigmoid(gate("r", h))
    cand = tape.tanh(gate("h", tape.hadamard(r, h)))
    return tape.add(h, tape.hadamard(z, tape.sub(cand, h)))


def encode_on_tape(tape: Tape, P: dict[str, Value], xs: Sequence[Value]) -> Value:
    """Embedding columns for the snapshot inputs ``xs`` (oldest first)."""
    fwd, h = [], None
    for x in xs:
        h = _gru_step(tape, P, "fwd", x, h)
        fwd.append(h)
    bwd, h = [], None
    for x in reversed(xs):
        h = _gru_step(tape, P, "bwd", x, h)
        bwd.append(h)
    bwd.reverse()  # align backward states with the snapshot they end on
    blocks = []
    for f, b in zip(fwd, bwd):
        blocks += [f, b]
    return tape.concat_rows(blocks)


def decode_on_tape(tape: Tape, P: dict[str, Value], c: Value, layers: int) -> Value:
    y = c
    for m in range(layers):
        y = tape.add(tape.matmul(P[f"dec{m}.W"], y), P[f"dec{m}.b"])
        y = tape.relu(y) if m < layers - 1 else tape.sigmoid(y)
    return y


def _check_rows(model: DdneModel, rows: np.ndarray) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim == 2:
        rows = rows[None]
    N, n = model.history_length, model.n
    if rows.ndim != 3 or rows.shape[1:] != (N, n):
        raise DimensionError(f"history batch must have shape (B, {N}, {n}), got {rows.shape}")
    return rows


def forward_on_tape(tape: Tape, model: DdneModel, rows: np.ndarray, *, input_grad: bool = False,
                    param_grad: bool = False):
    """Build the forward pass for a batch of histories ``rows`` of shape ``(B, N, n)``.

    Returns ``(probabilities, inputs, params)``; probabilities are ``(n, B)``.
    """
    rows = _check_rows(model, rows)
    P = param_values(tape, model, requires_grad=param_grad)
    xs = [tape.leaf(rows[:, k, :].T, requires_grad=input_grad) for k in range(rows.shape[1])]
    c = encode_on_tape(tape, P, xs)
    out = decode_on_tape(tape, P, c, len(model.hyper.decoder_hidden) + 1)
    return out, xs, P


def encode(model: DdneModel, history: NodeHistory | np.ndarray) -> np.ndarray:
    rows = history.rows if isinstance(history, NodeHistory) else history
    rows = _check_rows(model, rows)
    tape = Tape()
    P = param_values(tape, model)
    xs = [tape.constant(rows[:, k, :].T) for k in range(rows.shape[1])]
    c = encode_on_tape(tape, P, xs).data
    return c[:, 0].copy() if c.shape[1] == 1 else c.T.copy()


def decode(model: DdneModel, embedding: np.ndarray) -> np.ndarray:
    emb = np.asarray(embedding, dtype=np.float64)
    single = emb.ndim == 1
    cols = emb.reshape(-1, 1) if single else emb.T
    if cols.shape[0] != model.embedding_dim:
        raise DimensionError(f"embedding length {cols.shape[0]} != {model.embedding_dim}")
    tape = Tape()
    P = param_values(tape, model)
    out = decode_on_tape(tape, P, tape.constant(cols), len(model.hyper.decoder_hidden) + 1).data
    return out[:, 0].copy() if single else out.T.copy()


def predict_proba(model: DdneModel, rows: np.ndarray) -> np.ndarray:
    """Link probabilities ``(B, n)`` for a batch of histories ``(B, N, n)``."""
    out, _, _ = forward_on_tape(Tape(), model, rows)
    return out.data.T.copy()


@dataclass(frozen=True)
class PredictionRow:
    node: int
    probabilities: np.ndarray
    threshold: float = 0.5

    @property
    def predicted_links(self) -> np.ndarray:
        return np.flatnonzero(self.probabilities > self.threshold)


def predict_row(model: DdneModel, history: NodeHistory, threshold: float | None = None) -> PredictionRow:
    p = predict_proba(model, history.rows)[0]
    return PredictionRow(history.node, p, model.hyper.threshold if threshold is None else threshold)


# -- losses ------------------------------------------------------------------

def window_of(network: DynamicNetwork, hyper: DdneHyper, target_index: int | None = None,
              window_start: int | None = None) -> tuple[int, int]:
    """Resolve ``(window_start, target_index)``; defaults use the last snapshot as target."""
    T, N = network.num_snapshots, hyper.history_length
    t = T - 1 if target_index is None else target_index
    s = t - N if window_start is None else window_start
    if not (0 <= s and s + N <= t < T):
        raise SpecError(f"window start {s} (length {N}) and target {t} do not fit {T} snapshots")
    return s, t


def historical_counts(network: DynamicNetwork, hyper: DdneHyper, target_index: int | None = None,
                      window_start: int | None = None) -> np.ndarray:
    s, _ = window_of(network, hyper, target_index, window_start)
    return network.historical_counts(s, s + hyper.history_length)


def _pair_design(batch: np.ndarray, counts: np.ndarray):
    """Difference operator and weights for the embedding-proximity term.

    Each unordered batch pair carries ``N_ij + N_ji``, which matches summing
    ``N_ij * ||c_i - c_j||`` over ordered pairs.
    """
    B = len(batch)
    a, b = np.triu_indices(B, k=1)
    w = counts[batch[a], batch[b]] + counts[batch[b], batch[a]]
    keep = w > 0
    a, b, w = a[keep], b[keep], w[keep]
    D = np.zeros((B, len(a)))
    D[a, np.arange(len(a))] = 1.0
    D[b, np.arange(len(a))] = -1.0
    return D, w.astype(np.float64).reshape(-1, 1)


def _loss_on_tape(tape: Tape, model: DdneModel, batch: np.ndarray, inputs: np.ndarray,
                  target: np.ndarray, counts: np.ndarray, param_grad: bool = True):
    hyper = model.hyper
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0:
        raise ValueError("loss needs a non-empty batch")
    rows = inputs[:, batch, :].transpose(1, 0, 2)
    P = param_values(tape, model, requires_grad=param_grad)
    xs = [tape.constant(rows[:, k, :].T) for k in range(rows.shape[1])]
    c = encode_on_tape(tape, P, xs)
    probs = decode_on_tape(tape, P, c, len(hyper.decoder_hidden) + 1)
    truth = np.asarray(target[batch], dtype=np.float64).T
    Z = np.where(truth > 0, hyper.alpha, 1.0)
    ls = tape.weighted_sum_squares(tape.sub(tape.constant(truth), probs), Z)
    total = ls
    parts = {"ls": ls}
    D, w = _pair_design(batch, counts)
    if len(w):
        diffs = tape.matmul(c, tape.constant(D))
        lc = tape.matmul(tape.column_norms(diffs), tape.constant(w))
    else:
        lc = tape.constant([[0.0]])
    parts["lc"] = lc
    if hyper.beta > 0 and len(w):
        total = tape.add(total, tape.scale(lc, hyper.beta))
    reg = None
    for v in P.values():
        sq = tape.sum_squares(v)
        reg = sq if reg is None else tape.add(reg, sq)
    parts["reg"] = reg
    if hyper.reg_weight > 0:
        total = tape.add(total, tape.scale(reg, hyper.reg_weight))
    parts["total"] = total
    return parts, P, c


def loss_terms(model: DdneModel, batch, network: DynamicNetwork, counts: np.ndarray | None = None,
               target_index: int | None = None, window_start: int | None = None) -> dict[str, float]:
    """``ls``, ``lc``, ``reg`` and ``total`` for one batch of node indices."""
    s, t = window_of(network, model.hyper, target_index, window_start)
    if counts is None:
        counts = network.historical_counts(s, s + model.history_length)
    inputs = network.snapshots[s:s + model.history_length]
    parts, _, _ = _loss_on_tape(Tape(), model, batch, inputs, network.snapshots[t], counts, False)
    return {k: v.item() for k, v in parts.items()}


def loss_all(model: DdneModel, batch, network: DynamicNetwork, counts: np.ndarray | None = None,
             target_index: int | None = None, window_start: int | None = None) -> float:
    return loss_terms(model, batch, network, counts, target_index, window_start)["total"]


def loss_gradients(model: DdneModel, batch, network: DynamicNetwork, counts: np.ndarray | None = None,
                   target_index: int | None = None, window_start: int | None = None):
    """``(loss, {param name: gradient})`` for one batch."""
    s, t = window_of(network, model.hyper, target_index, window_start)
    if counts is None:
        counts = network.historical_counts(s, s + model.history_length)
    tape = Tape()
    parts, P, _ = _loss_on_tape(tape, model, batch, network.snapshots[s:s + model.history_length],
                                network.snapshots[t], counts)
    grads = tape.backward(parts["total"])
    return parts["total"].item(), {k: grads[v.id] for k, v in P.items()}


# -- training ------------------------------------------------------------------

class _Adam:
    def __init__(self, params, lr, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1, c2 = 1 - self.b1 ** self.t, 1 - self.b2 ** self.t
        for k, g in grads.items():
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            params[k] = params[k] - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train(network: DynamicNetwork, hyper: DdneHyper, *, target_index: int | None = None,
          window_start: int | None = None, rng: np.random.Generator | None = None) -> DdneModel:
    """Minibatch gradient descent on the full DDNE loss.

    The input window is the ``history_length`` snapshots starting at
    ``window_start`` and the target is ``target_index`` (by default the last
    snapshot, fed by the window right before it). The per-epoch mean batch
    loss is stored in ``model.loss_history``.
    """
    s, t = window_of(network, hyper, target_index, window_start)
    rng = rng if rng is not None else np.random.default_rng(hyper.rng_seed)
    n = network.n
    model = init_model(n, hyper, rng)
    inputs = network.snapshots[s:s + hyper.history_length]
    target = network.snapshots[t]
    counts = network.historical_counts(s, s + hyper.history_length)
    adam = _Adam(model.params, hyper.learning_rate) if hyper.optimizer == "adam" else None
    for epoch in range(hyper.epochs):
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, hyper.batch_size):
            batch = order[lo:lo + hyper.batch_size]
            tape = Tape()
            try:
                parts, P, _ = _loss_on_tape(tape, model, batch, inputs, target, counts)
                root = parts["total"]
                grads = tape.backward(root)
            except NonFiniteError:
                raise DivergenceError(epoch, hyper.learning_rate) from None
            losses.append(root.item())
            g = {k: grads[v.id] for k, v in P.items()}
            if adam is not None:
                adam.step(model.params, g)
            else:
                for k, gk in g.items():
                    model.params[k] = model.params[k] - hyper.learning_rate * gk
            if not all(np.all(np.isfinite(p)) for p in model.params.values()):
                raise DivergenceError(epoch, hyper.learning_rate)
        model.loss_history.append(float(np.mean(losses)))
        if epoch % 50 == 0:
            log.debug("epoch %d loss %.6f", epoch, model.loss_history[-1])
    return model


def link_auc(model: DdneModel, network: DynamicNetwork, target_index: int | None = None,
             window_start: int | None = None, rng: np.random.Generator | None = None) -> float:
    """AUC of target-snapshot links against an equal number of sampled non-links."""
    s, t = window_of(network, model.hyper, target_index, window_start)
    rng = rng if rng is not None else np.random.default_rng(0)
    rows = network.snapshots[s:s + model.history_length].transpose(1, 0, 2)
    probs = predict_proba(model, rows)
    A = network.snapshots[t]
    pos = np.argwhere(A > 0)
    off = ~np.eye(network.n, dtype=bool) & (A == 0)
    neg_all = np.argwhere(off)
    if len(pos) == 0 or len(neg_all) == 0:
        raise ValueError("AUC needs both links and non-links")
    neg = neg_all[rng.choice(len(neg_all), size=min(len(pos), len(neg_all)), replace=False)]
    sp = probs[pos[:, 0], pos[:, 1]]
    sn = probs[neg[:, 0], neg[:, 1]]
    greater = (sp[:, None] > sn[None, :]).sum() + 0.5 * (sp[:, None] == sn[None, :]).sum()
    return float(greater / (len(sp) * len(sn)))


# -- checkpoints ---------------------------------------------------------------

def save_checkpoint(model: DdneModel, fh: BinaryIO) -> None:
    """Serialise a model. The byte layout is documented in the README."""
    header = {
        "format": "ddne-checkpoint",
        "n": model.n,
        "hyper": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(model.hyper).items()},
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in model.params.items()],
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    fh.write(CHECKPOINT_MAGIC)
    fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
    fh.write(blob)
    for v in model.params.values():
        fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(fh: BinaryIO) -> DdneModel:
    if fh.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a DDNE checkpoint (bad magic)")
    raw = fh.read(8)
    if len(raw) != 8:
        raise CheckpointError("truncated checkpoint header")
    version, hlen = struct.unpack("<II", raw)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(fh.read(hlen).decode("utf-8"))
        hyper = DdneHyper.from_dict(header["hyper"])
        n = int(header["n"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"bad checkpoint header: {exc}") from None
    params = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape))
        data = fh.read(8 * count)
        if len(data) != 8 * count:
            raise CheckpointError(f"truncated data for {spec['name']}")
        params[spec["name"]] = np.frombuffer(data, dtype="<f8").reshape(shape).astype(np.float64)
    return DdneModel(hyper, n, params)
