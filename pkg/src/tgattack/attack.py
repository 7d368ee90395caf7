"""Target-link attacks on a trained DDNE model.

Every attack perturbs the history of the target's source node ``i``: the
cells ``(k, v)`` of ``rows``, meaning "link i -> v in window snapshot k".
Cells are flipped according to their current status (1 -> remove,
0 -> add), never twice in one attack, and the self cell ``(k, i)`` is never
touched. An attack succeeds once ``p_ij <= threshold``.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .diffcomp import Tape
from .ddne import DdneModel, forward_on_tape, predict_proba
from .dynnet import DynamicNetwork, NodeHistory, common_neighbors

__all__ = [
    "AdversarialExample",
    "AttackConfig",
    "AttackExhausted",
    "Candidate",
    "Flip",
    "SearchTooLarge",
    "TargetLink",
    "apply_flips",
    "cna",
    "fga",
    "one_step_attack",
    "ra",
    "target_loss",
    "target_probability",
    "tga_gre",
    "tga_tra",
    "time_aware_gradient",
    "time_aware_gradients",
]

ADD, REMOVE = "add", "remove"


@dataclass(frozen=True)
class TargetLink:
    i: int
    j: int
    horizon: int = 0

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError("target link needs two distinct nodes")


@dataclass(frozen=True, order=True)
class Flip:
    k: int
    v: int
    direction: str

    def __post_init__(self):
        if self.direction not in (ADD, REMOVE):
            raise ValueError(f"direction must be 'add' or 'remove', got {self.direction!r}")


@dataclass(frozen=True)
class AttackConfig:
    budget: int = 10
    candidate_width: int = 5
    add_only: bool = False
    early_stop: bool = True
    threshold: float = 0.5
    rng_seed: int = 0
    random_adds: int | None = None
    max_candidates: int = 200_000
    beam_width: int | None = None

    def __post_init__(self):
        if self.budget < 1 or self.candidate_width < 1:
            raise ValueError("budget and candidate_width must be >= 1")
        if self.random_adds is None:
            object.__setattr__(self, "random_adds", min(5, self.budget))
        if not 0 <= self.random_adds <= self.budget:
            raise ValueError("random_adds must lie in [0, budget]")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.beam_width is not None and self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass
class AdversarialExample:
    """Outcome of one attack.

    ``q`` is the number of flips that hid the link, or the full budget when
    the attack failed.
    """

    method: str
    target: TargetLink
    base: NodeHistory
    flips: list[Flip]
    p_ij: float
    p_before: float
    success: bool
    budget: int
    gradient_evals: int = 0
    elapsed_ms: float = 0.0
    exhausted: bool = False
    trace: list[list[float]] = field(default_factory=list, repr=False)

    @property
    def q(self) -> int:
        return len(self.flips) if self.success else self.budget


class AttackExhausted(RuntimeError):
    """No eligible cell was left; ``example`` holds the best result reached."""

    def __init__(self, example: AdversarialExample):
        super().__init__(f"{example.method}: no eligible cell after {len(example.flips)} flips")
        self.example = example


class SearchTooLarge(RuntimeError):
    pass


@dataclass(frozen=True)
class Candidate:
    """A perturbed history with the flips that produced it."""

    history: NodeHistory
    flips: tuple[Flip, ...] = ()

    @property
    def touched(self) -> frozenset[tuple[int, int]]:
        return frozenset((f.k, f.v) for f in self.flips)


def target_loss(p_ij: float) -> float:
    return -(1.0 - p_ij) ** 2


def apply_flips(history: NodeHistory, flips: Iterable[Flip]) -> NodeHistory:
    """Apply flips in order, checking each direction against the cell's current value."""
    out = history.copy()
    for f in flips:
        current = out.rows[f.k, f.v]
        if f.v == history.node:
            raise ValueError(f"{f} touches the self cell")
        if (f.direction == ADD) != (current == 0):
            raise ValueError(f"{f} does not match cell value {current}")
        out.rows[f.k, f.v] = 1.0 - current
    return out


def _flip_cell(cand: Candidate, k: int, v: int) -> Candidate:
    rows = cand.history.rows.copy()
    direction = ADD if rows[k, v] == 0 else REMOVE
    rows[k, v] = 1.0 - rows[k, v]
    return Candidate(NodeHistory(cand.history.node, rows), cand.flips + (Flip(k, v, direction),))


def target_probability(model: DdneModel, rows: np.ndarray, j: int) -> np.ndarray:
    """``p_ij`` for each history in ``rows`` ``(B, N, n)`` (or a single ``(N, n)``)."""
    p = predict_proba(model, rows)[:, j]
    return p if np.ndim(rows) == 3 else p[0]


def time_aware_gradients(model: DdneModel, rows: np.ndarray, j: int) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of ``-(1 - p_ij)**2`` w.r.t. each history in a batch.

    Columns of the forward pass are independent, so one backward pass over
    the summed losses yields every per-history gradient. Returns
    ``(gradients (B, N, n), p_ij (B,))``.
    """
    rows = np.asarray(rows, dtype=np.float64)
    tape = Tape()
    out, xs, _ = forward_on_tape(tape, model, rows, input_grad=True)
    p = tape.slice_row(out, j)
    one = tape.constant(np.ones(p.shape))
    root = tape.scale(tape.sum_squares(tape.sub(one, p)), -1.0)
    grads = tape.gradient_of_input(root, xs)
    return np.stack([g.T for g in grads], axis=1), p.data[0].copy()


def time_aware_gradient(model: DdneModel, history: NodeHistory, target: TargetLink) -> np.ndarray:
    """``d L_t / d S(i,:)`` as an ``(N, n)`` array."""
    g, _ = time_aware_gradients(model, history.rows[None], target.j)
    return g[0]


def _ranked_cells(rows: np.ndarray, grad_row: np.ndarray, k: int, node: int, add_only: bool,
                  touched: frozenset | set) -> np.ndarray:
    n = rows.shape[1]
    ok = np.ones(n, dtype=bool)
    ok[node] = False
    if add_only:
        ok &= rows[k] == 0
    for (tk, tv) in touched:
        if tk == k:
            ok[tv] = False
    cells = np.flatnonzero(ok)
    # descending |g|; equal magnitudes keep ascending v
    order = np.argsort(-np.abs(grad_row[cells]), kind="stable")
    return cells[order]


def one_step_attack(history: NodeHistory | Candidate, gradient: np.ndarray, k: int, m: int,
                    add_only: bool = False, touched: Iterable[tuple[int, int]] | None = None
                    ) -> list[Candidate]:
    """Flip each of the ``m`` largest-|gradient| eligible cells of snapshot ``k``.

    Returns one candidate per selected cell (fewer when not enough cells are
    eligible).
    """
    cand = history if isinstance(history, Candidate) else Candidate(history)
    rows = cand.history.rows
    if not 0 <= k < rows.shape[0]:
        raise IndexError(f"snapshot {k} outside history of length {rows.shape[0]}")
    used = cand.touched | frozenset(touched or ())
    cells = _ranked_cells(rows, gradient[k], k, cand.history.node, add_only, used)
    return [_flip_cell(cand, k, int(v)) for v in cells[:m]]


def _example(method, target, config, cand, p, p0, evals, t0, exhausted=False, trace=None):
    return AdversarialExample(
        method=method, target=target, base=cand.history, flips=list(cand.flips), p_ij=float(p),
        p_before=float(p0), success=bool(p <= config.threshold), budget=config.budget,
        gradient_evals=evals, elapsed_ms=(time.perf_counter() - t0) * 1e3, exhausted=exhausted,
        trace=trace or [],
    )


def _stack(cands: Sequence[Candidate]) -> np.ndarray:
    return np.stack([c.history.rows for c in cands])


def tga_gre(model: DdneModel, history: NodeHistory, target: TargetLink,
            config: AttackConfig = AttackConfig()) -> AdversarialExample:
    """Greedy time-aware gradient attack.

    Each iteration takes the top-1 cell of every snapshot under the current
    gradient and keeps whichever single flip lowers ``p_ij`` most. The
    gradient depends only on the current example, so it is computed once per
    iteration and shared by the per-snapshot proposals.
    """
    t0 = time.perf_counter()
    N = history.length
    cur = Candidate(history.copy())
    g, p = time_aware_gradients(model, cur.history.rows[None], target.j)
    g, p0 = g[0], float(p[0])
    evals, p_cur, trace = 1, p0, []
    if config.early_stop and p0 <= config.threshold:
        return _example("tga-gre", target, config, cur, p0, p0, evals, t0)
    for it in range(config.budget):
        if it:
            g = time_aware_gradients(model, cur.history.rows[None], target.j)[0][0]
            evals += 1
        cands = []
        for k in range(N):
            cands += one_step_attack(cur, g, k, 1, config.add_only)
        if not cands:
            raise AttackExhausted(_example("tga-gre", target, config, cur, p_cur, p0, evals, t0,
                                           exhausted=True, trace=trace))
        ps = target_probability(model, _stack(cands), target.j)
        trace.append(ps.tolist())
        best = int(np.argmin(ps))
        cur, p_cur = cands[best], float(ps[best])
        if config.early_stop and p_cur <= config.threshold:
            break
    return _example("tga-gre", target, config, cur, p_cur, p0, evals, t0, trace=trace)


def tga_tra(model: DdneModel, history: NodeHistory, target: TargetLink,
            config: AttackConfig = AttackConfig()) -> AdversarialExample:
    """Traversal time-aware gradient attack.

    Every candidate of the current depth is expanded with the top
    ``candidate_width`` cells of every snapshot under its own gradient. After
    ``budget`` levels (or at the first level holding a successful candidate,
    with early stopping) the lowest-``p_ij`` candidate of that level wins.
    """
    t0 = time.perf_counter()
    N, m = history.length, config.candidate_width
    root = Candidate(history.copy())
    p0 = float(target_probability(model, root.history.rows, target.j))
    if config.early_stop and p0 <= config.threshold:
        return _example("tga-tra", target, config, root, p0, p0, 0, t0)
    frontier, ps = [root], np.array([p0])
    evals, trace = 0, []
    for depth in range(config.budget):
        projected = len(frontier) * m * N
        if projected > config.max_candidates:
            raise SearchTooLarge(
                f"depth {depth + 1} would hold up to {projected} candidates "
                f"(cap {config.max_candidates}); lower candidate_width/budget or set beam_width"
            )
        expanded = []
        for lo in range(0, len(frontier), 512):
            chunk = frontier[lo:lo + 512]
            grads, _ = time_aware_gradients(model, _stack(chunk), target.j)
            evals += len(chunk)
            for cand, g in zip(chunk, grads):
                for k in range(N):
                    expanded += one_step_attack(cand, g, k, m, config.add_only)
        if not expanded:
            best = int(np.argmin(ps))
            raise AttackExhausted(_example("tga-tra", target, config, frontier[best], ps[best], p0,
                                           evals, t0, exhausted=True, trace=trace))
        ps = np.concatenate([target_probability(model, _stack(expanded[lo:lo + 4096]), target.j)
                             for lo in range(0, len(expanded), 4096)])
        trace.append([float(ps.min())])
        frontier = expanded
        if config.beam_width is not None and len(frontier) > config.beam_width:
            keep = np.sort(np.argsort(ps, kind="stable")[:config.beam_width])
            frontier, ps = [frontier[i] for i in keep], ps[keep]
        if config.early_stop and ps.min() <= config.threshold:
            break
    best = int(np.argmin(ps))
    return _example("tga-tra", target, config, frontier[best], ps[best], p0, evals, t0, trace=trace)


def fga(model: DdneModel, history: NodeHistory, target: TargetLink,
        config: AttackConfig = AttackConfig()) -> AdversarialExample:
    """Fast gradient attack: flip the globally largest-|gradient| cell each iteration."""
    t0 = time.perf_counter()
    cur = Candidate(history.copy())
    N, n = history.rows.shape
    node = history.node
    evals, trace = 0, []
    p0 = p_cur = None
    for it in range(config.budget):
        grads, p = time_aware_gradients(model, cur.history.rows[None], target.j)
        evals += 1
        if p0 is None:
            p0 = p_cur = float(p[0])
            if p0 <= config.threshold:
                break
        g = np.abs(grads[0])
        ok = np.ones((N, n), dtype=bool)
        ok[:, node] = False
        if config.add_only:
            ok &= cur.history.rows == 0
        for f in cur.flips:
            ok[f.k, f.v] = False
        flat = np.flatnonzero(ok.ravel())
        if flat.size == 0:
            raise AttackExhausted(_example("fga", target, config, cur, p_cur, p0, evals, t0,
                                           exhausted=True, trace=trace))
        # argmax returns the first maximum: ties go to the lowest (k, v)
        cell = flat[int(np.argmax(g.ravel()[flat]))]
        cur = _flip_cell(cur, int(cell // n), int(cell % n))
        p_cur = float(target_probability(model, cur.history.rows, target.j))
        trace.append([p_cur])
        if p_cur <= config.threshold:
            break
    return _example("fga", target, config, cur, p_cur, p0, evals, t0, trace=trace)


def _apply_until_success(method, model, history, target, config, flips, exhausted, t0):
    """Apply ``flips`` one at a time and stop as soon as the target is hidden."""
    root = Candidate(history.copy())
    p0 = float(target_probability(model, root.history.rows, target.j))
    prefixes, cand = [], root
    for f in flips:
        cand = _flip_cell(cand, f.k, f.v)
        prefixes.append(cand)
    if p0 <= config.threshold or not prefixes:
        return _example(method, target, config, root, p0, p0, 0, t0, exhausted=exhausted)
    ps = target_probability(model, _stack(prefixes), target.j)
    hit = np.flatnonzero(ps <= config.threshold)
    stop = int(hit[0]) if hit.size else len(prefixes) - 1
    return _example(method, target, config, prefixes[stop], ps[stop], p0, 0, t0,
                    exhausted=exhausted, trace=[ps[:stop + 1].tolist()])


def _split_budget(config: AttackConfig) -> tuple[int, int]:
    adds = config.budget if config.add_only else config.random_adds
    return adds, config.budget - adds


def cna(model: DdneModel, network: DynamicNetwork, history: NodeHistory, target: TargetLink,
        config: AttackConfig = AttackConfig(), snapshot_index: int | None = None) -> AdversarialExample:
    """Common-neighbour attack on the most recent history snapshot.

    Removes links to the neighbours sharing the most common neighbours with
    ``i`` and adds links to non-neighbours sharing the fewest, alternating
    removal first. Counts come from the unperturbed snapshot
    ``snapshot_index`` (default: the one preceding the last network
    snapshot). Ties go to the lower node index.
    """
    t0 = time.perf_counter()
    i, N = history.node, history.length
    A = network.snapshots[network.num_snapshots - 2 if snapshot_index is None else snapshot_index]
    row = history.rows[N - 1]
    others = [v for v in range(history.width) if v != i]
    cn = {v: common_neighbors(A, i, v) for v in others}
    adds = sorted((v for v in others if row[v] == 0), key=lambda v: (cn[v], v))
    removes = sorted((v for v in others if row[v] == 1), key=lambda v: (-cn[v], v))
    n_add, n_remove = _split_budget(config)
    exhausted = len(adds) < n_add or len(removes) < n_remove
    adds, removes = adds[:n_add], removes[:n_remove]
    order = []
    for r in range(max(len(adds), len(removes))):
        if r < len(removes):
            order.append(Flip(N - 1, removes[r], REMOVE))
        if r < len(adds):
            order.append(Flip(N - 1, adds[r], ADD))
    return _apply_until_success("cna", model, history, target, config, order, exhausted, t0)


def ra(model: DdneModel, network: DynamicNetwork | None, history: NodeHistory, target: TargetLink,
       config: AttackConfig = AttackConfig(), rng: np.random.Generator | None = None) -> AdversarialExample:
    """Random attack over all history snapshots.

    Draws ``random_adds`` absent cells to add and ``budget - random_adds``
    present cells to remove, then applies them in random order.
    """
    t0 = time.perf_counter()
    rng = rng if rng is not None else np.random.default_rng(config.rng_seed)
    rows, i = history.rows, history.node
    mask = np.ones(rows.shape, dtype=bool)
    mask[:, i] = False
    absent = np.argwhere(mask & (rows == 0))
    present = np.argwhere(mask & (rows == 1))
    n_add, n_remove = _split_budget(config)
    exhausted = len(absent) < n_add or len(present) < n_remove
    pick_a = rng.choice(len(absent), size=min(n_add, len(absent)), replace=False)
    pick_r = rng.choice(len(present), size=min(n_remove, len(present)), replace=False)
    flips = [Flip(int(k), int(v), ADD) for k, v in absent[pick_a]]
    flips += [Flip(int(k), int(v), REMOVE) for k, v in present[pick_r]]
    flips = [flips[t] for t in rng.permutation(len(flips))]
    return _apply_until_success("ra", model, history, target, config, flips, exhausted, t0)
