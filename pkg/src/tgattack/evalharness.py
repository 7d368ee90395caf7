"""Target selection, attack metrics, experiment drivers and synthetic networks."""

from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import attack as atk
from .attack import AdversarialExample, AttackConfig, AttackExhausted, TargetLink
from .ddne import DdneHyper, DdneModel, predict_proba, train
from .dynnet import DynamicNetwork, SpecError, edge_betweenness, history, link_degree

log = logging.getLogger(__name__)

METHODS = ("ra", "cna", "fga", "tga-gre", "tga-tra")
STRATEGIES = ("probability", "degree", "betweenness")
GENERATORS = ("periodic-blocks", "persistent-communities")


class NoTargetsError(RuntimeError):
    pass


class ComparisonError(ValueError):
    pass


def stream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for one named purpose (``train``, ``ra``, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode()), *map(int, extra)])


# -- synthetic networks ----------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    generator: str = "periodic-blocks"
    n: int = 60
    num_snapshots: int = 3
    density: float = 0.1
    flip_noise: float = 0.1
    rng_seed: int = 0
    communities: int = 4

    def __post_init__(self):
        if self.generator not in GENERATORS:
            raise SpecError(f"unknown generator {self.generator!r}")
        if not 0 < self.density < 1:
            raise SpecError(f"density must lie in (0, 1), got {self.density}")
        if not 0 <= self.flip_noise <= 1:
            raise SpecError("flip_noise must lie in [0, 1]")
        if self.n < 2 or self.num_snapshots < 2 or not 1 <= self.communities <= self.n:
            raise SpecError("need n >= 2, num_snapshots >= 2 and 1 <= communities <= n")


def generate_synthetic(spec: SyntheticSpec) -> DynamicNetwork:
    """Seeded community-structured dynamic network.

    ``periodic-blocks``: a block-diagonal backbone drawn once; each snapshot
    drops every backbone link with probability ``flip_noise`` and adds
    non-links at the rate that keeps the expected density unchanged.

    ``persistent-communities``: a stochastic block model (within-community
    probability ten times the cross-community one) sampled once as a
    backbone; each snapshot keeps each backbone link with probability
    ``1 - flip_noise`` and redraws the rest of the graph from the block model.
    """
    rng = np.random.default_rng(spec.rng_seed)
    n, d, f = spec.n, spec.density, spec.flip_noise
    comm = np.arange(n) % spec.communities
    same = comm[:, None] == comm[None, :]
    off = ~np.eye(n, dtype=bool)
    cells = n * (n - 1)
    within = int((same & off).sum())
    if spec.generator == "periodic-blocks":
        p_in = d * cells / within if within else np.inf
        if p_in > 1:
            raise SpecError(f"density {d} is unreachable with {spec.communities} blocks")
        prob = np.where(same & off, p_in, 0.0)
    else:
        p_out = d * cells / (10 * within + (cells - within))
        if 10 * p_out > 1:
            raise SpecError(f"density {d} is unreachable with {spec.communities} communities")
        prob = np.where(same, 10 * p_out, p_out) * off
    backbone = rng.random((n, n)) < prob
    snaps = []
    for _ in range(spec.num_snapshots):
        u = rng.random((n, n))
        if spec.generator == "periodic-blocks":
            add_rate = f * d / (1 - d)
            A = np.where(backbone, u >= f, (u < add_rate) & off)
        else:
            keep = backbone & (u >= f)
            fresh = rng.random((n, n)) < prob * f
            A = keep | (fresh & ~backbone)
        snaps.append(A & off)
    return DynamicNetwork(np.array(snaps, dtype=np.uint8))


# -- targets ---------------------------------------------------------------------

@dataclass(frozen=True)
class TargetSelection:
    strategy: str = "probability"
    top_k: int = 100

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")


def select_targets(model: DdneModel, network: DynamicNetwork, selection: TargetSelection, *,
                   window_start: int | None = None, target_index: int | None = None,
                   threshold: float | None = None) -> list[TargetLink]:
    """Top links of the target snapshot that the clean model predicts.

    Ties in the score are broken by ``(i, j)`` ascending. Degree and
    betweenness are measured on the last snapshot of the input window.
    """
    N = model.history_length
    t = network.num_snapshots - 1 if target_index is None else target_index
    s = t - N if window_start is None else window_start
    thr = model.hyper.threshold if threshold is None else threshold
    rows = network.snapshots[s:s + N].transpose(1, 0, 2)
    probs = predict_proba(model, rows)
    truth = network.snapshots[t]
    pool = [(int(i), int(j)) for i, j in np.argwhere((truth > 0) & (probs > thr))]
    if not pool:
        raise NoTargetsError("no true link of the target snapshot is predicted by the model")
    last = network.snapshots[s + N - 1]
    if selection.strategy == "probability":
        score = {e: probs[e] for e in pool}
    elif selection.strategy == "degree":
        score = {e: link_degree(last, *e) for e in pool}
    else:
        eb = edge_betweenness(last)
        score = {e: eb.get(e, 0.0) for e in pool}
    ranked = sorted(pool, key=lambda e: (-score[e], e))
    if len(ranked) < selection.top_k:
        log.warning("only %d candidate targets (top_k=%d)", len(ranked), selection.top_k)
    return [TargetLink(i, j, horizon=t - s - N) for i, j in ranked[:selection.top_k]]


# -- reports ---------------------------------------------------------------------

@dataclass
class TargetRecord:
    i: int
    j: int
    success: bool
    q: int
    gradient_evals: int
    elapsed_ms: float
    p_before: float
    p_after: float
    exhausted: bool = False
    flips: list[list] = field(default_factory=list)

    @classmethod
    def from_example(cls, ex: AdversarialExample, timing: bool = True) -> "TargetRecord":
        return cls(ex.target.i, ex.target.j, ex.success, ex.q, ex.gradient_evals,
                   round(ex.elapsed_ms, 3) if timing else 0.0, ex.p_before, ex.p_ij, ex.exhausted,
                   [[f.k, f.v, f.direction] for f in ex.flips])


@dataclass
class AttackReport:
    method: str
    strategy: str
    budget: int
    history_length: int
    horizon: int = 0
    add_only: bool = False
    dataset: str = "unnamed"
    records: list[TargetRecord] = field(default_factory=list)

    @property
    def targets(self) -> list[tuple[int, int]]:
        return [(r.i, r.j) for r in self.records]

    @property
    def asr(self) -> float:
        return asr(self)

    @property
    def aml(self) -> float:
        return aml(self)

    def mean_gradient_evals(self) -> float:
        return float(np.mean([r.gradient_evals for r in self.records])) if self.records else 0.0

    def mean_ms(self) -> float:
        return float(np.mean([r.elapsed_ms for r in self.records])) if self.records else 0.0

    def summary(self) -> dict:
        return {
            "dataset": self.dataset, "method": self.method, "strategy": self.strategy,
            "horizon": self.horizon, "n_s": self.history_length, "gamma": self.budget,
            "add_only": self.add_only, "asr": self.asr, "aml": self.aml,
            "mean_grad_evals": self.mean_gradient_evals(), "mean_ms": round(self.mean_ms(), 3),
        }

    def to_dict(self) -> dict:
        d = {k: v for k, v in asdict(self).items() if k != "records"}
        d["summary"] = self.summary()
        d["records"] = [asdict(r) for r in self.records]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        records = [TargetRecord(**r) for r in d["records"]]
        fields = {k: d[k] for k in ("method", "strategy", "budget", "history_length", "horizon",
                                    "add_only", "dataset")}
        return cls(records=records, **fields)


def asr(report: AttackReport) -> float:
    if not report.records:
        raise ValueError("ASR of an empty report")
    return sum(r.success for r in report.records) / len(report.records)


def aml(report: AttackReport) -> float:
    """Mean flips per target; failures count the full budget."""
    if not report.records:
        raise ValueError("AML of an empty report")
    return float(np.mean([r.q if r.success else report.budget for r in report.records]))


def gain(report_addonly: AttackReport, report_rewire: AttackReport) -> tuple[float, float]:
    """``(ASR, AML)`` of the first report minus those of the second."""
    if report_addonly.targets != report_rewire.targets:
        raise ComparisonError("reports cover different target lists")
    return (report_addonly.asr - report_rewire.asr, report_addonly.aml - report_rewire.aml)


SUMMARY_FIELDS = ["dataset", "method", "strategy", "horizon", "n_s", "gamma", "asr", "aml",
                  "mean_grad_evals", "mean_ms"]


def summary_csv(reports: Iterable[AttackReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SUMMARY_FIELDS, extrasaction="ignore", lineterminator="\n")
    writer.writeheader()
    for r in reports:
        writer.writerow(r.summary())
    return buf.getvalue()


def flips_csv(report: AttackReport) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["target_i", "target_j", "k", "v", "direction"])
    for r in report.records:
        for k, v, direction in r.flips:
            writer.writerow([r.i, r.j, k, v, direction])
    return buf.getvalue()


def runtime_csv(reports: Iterable[AttackReport]) -> str:
    """Method x budget table of mean wall time and gradient evaluations."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "gamma", "mean_ms", "mean_grad_evals", "asr"])
    for r in sorted(reports, key=lambda r: (r.method, r.budget)):
        writer.writerow([r.method, r.budget, round(r.mean_ms(), 3), r.mean_gradient_evals(), r.asr])
    return buf.getvalue()


def dumps_reports(reports: Sequence[AttackReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n"


def loads_reports(text: str) -> list[AttackReport]:
    data = json.loads(text)
    if isinstance(data, dict):
        data = [data]
    return [AttackReport.from_dict(d) for d in data]


# -- experiments -----------------------------------------------------------------

def run_attack(method: str, model: DdneModel, network: DynamicNetwork, target: TargetLink,
               config: AttackConfig, window_start: int, index: int = 0) -> AdversarialExample:
    """Run one named method on one target; exhaustion returns the partial example."""
    N = model.history_length
    hist = history(network, target.i, window_start, window_start + N)
    try:
        if method == "tga-gre":
            return atk.tga_gre(model, hist, target, config)
        if method == "tga-tra":
            return atk.tga_tra(model, hist, target, config)
        if method == "fga":
            return atk.fga(model, hist, target, config)
        if method == "cna":
            return atk.cna(model, network, hist, target, config, snapshot_index=window_start + N - 1)
        if method == "ra":
            return atk.ra(model, network, hist, target, config, rng=stream(config.rng_seed, "ra", index))
    except AttackExhausted as exc:
        return exc.example
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def attack_targets(method: str, model: DdneModel, network: DynamicNetwork,
                   targets: Sequence[TargetLink], config: AttackConfig, window_start: int, *,
                   strategy: str = "probability", dataset: str = "unnamed", horizon: int = 0,
                   timing: bool = True) -> AttackReport:
    report = AttackReport(method, strategy, config.budget, model.history_length, horizon,
                          config.add_only, dataset)
    for idx, target in enumerate(targets):
        ex = run_attack(method, model, network, target, config, window_start, idx)
        report.records.append(TargetRecord.from_example(ex, timing))
    return report


def run_experiment(network: DynamicNetwork, hyper: DdneHyper, config: AttackConfig,
                   selection: TargetSelection | Sequence[TargetSelection], methods: Sequence[str],
                   horizons: Sequence[int] = (0,), *, seed: int = 0, dataset: str = "unnamed",
                   models: dict[int, DdneModel] | None = None, timing: bool = True,
                   progress: Callable[[str], None] | None = None) -> list[AttackReport]:
    """Train one model per horizon and attack its targets with every method.

    The input window is fixed to the ``history_length`` snapshots ending
    ``max(horizons) + 1`` before the last one; horizon ``h`` predicts the
    snapshot ``h`` steps after the window's successor. Pre-trained models
    can be passed per horizon in ``models``.
    """
    selections = [selection] if isinstance(selection, TargetSelection) else list(selection)
    for m in methods:
        if m not in METHODS:
            raise ValueError(f"unknown method {m!r}; expected one of {METHODS}")
    horizons = list(horizons)
    if not horizons or min(horizons) < 0:
        raise SpecError("horizons must be a non-empty list of non-negative offsets")
    N, T = hyper.history_length, network.num_snapshots
    base = T - 1 - max(horizons)
    if base - N < 0:
        raise SpecError(f"{T} snapshots cannot hold a window of {N} plus horizon {max(horizons)}")
    ws = base - N
    models = dict(models or {})
    reports = []
    for h in horizons:
        model = models.get(h)
        if model is None:
            model = train(network, hyper, target_index=base + h, window_start=ws,
                          rng=stream(seed, "train", h))
            models[h] = model
        if model.n != network.n or model.history_length != N:
            raise SpecError("model dimensions do not match the network and history length")
        for sel in selections:
            targets = select_targets(model, network, sel, window_start=ws, target_index=base + h,
                                     threshold=config.threshold)
            for m in methods:
                if progress:
                    progress(f"horizon {h} {sel.strategy} {m}: {len(targets)} targets")
                reports.append(attack_targets(m, model, network, targets, config, ws,
                                              strategy=sel.strategy, dataset=dataset, horizon=h,
                                              timing=timing))
    return reports


def history_sweep(network: DynamicNetwork, hyper: DdneHyper, config: AttackConfig,
                  selection: TargetSelection, methods: Sequence[str], lengths: Sequence[int] = (2, 3, 4),
                  *, seed: int = 0, dataset: str = "unnamed", timing: bool = True) -> list[AttackReport]:
    """Repeat the base experiment for several history lengths, all targeting the last snapshot."""
    reports = []
    for N in lengths:
        h = DdneHyper.from_dict({**asdict(hyper), "history_length": N})
        reports += run_experiment(network, h, config, selection, methods, (0,), seed=seed,
                                  dataset=dataset, timing=timing)
    return reports
