"""Metrics and the three experiment protocols.

* leave-one-generator-out: train on pooled 80/20 shadow splits, test on every
  pair of the held-out target;
* transferability: 70/20/10 split of one source, diagonal on its 10% in-domain
  split, off-diagonal on all pairs of each other generator;
* training-size ablation: stratified subsamples of the pooled shadow training
  data, k runs per size, fixed validation split.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .auditor import TrainConfig, score_pairs, train
from .errors import ValidationError
from .numerics import make_rng, stream_id

UNDEFINED = "undefined"
DEFAULT_ABLATION_SIZES = (10, 30, 100, 300, 1000)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class Metrics:
    counts: ConfusionCounts
    acc: float
    fpr: float | None  # None when there are no negatives
    fnr: float | None  # None when there are no positives


def compute_metrics(scores, labels, threshold: float = 0.5) -> Metrics:
    """Accuracy, FPR and FNR with members as the positive class.

    A pair is predicted member when its score is >= threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1 or len(scores) == 0:
        raise ValidationError(f"scores and labels must be equal-length 1-d and non-empty, got {scores.shape} / {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise ValidationError("labels must be 0 or 1")
    pred = scores >= threshold
    pos = labels == 1
    c = ConfusionCounts(
        tp=int(np.sum(pred & pos)),
        fp=int(np.sum(pred & ~pos)),
        tn=int(np.sum(~pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )
    fpr = c.fp / (c.fp + c.tn) if c.fp + c.tn else None
    fnr = c.fn / (c.fn + c.tp) if c.fn + c.tp else None
    return Metrics(c, (c.tp + c.tn) / c.total, fpr, fnr)


def fmt_rate(x) -> str:
    return UNDEFINED if x is None else repr(float(x))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


def stratified_split(pairs, fractions, rng: np.random.Generator):
    """Split pairs into len(fractions) parts, class by class.

    Part sizes per class are differences of rounded cumulative fractions, so
    every pair lands in exactly one part.
    """
    if not math.isclose(sum(fractions), 1.0):
        raise ValidationError(f"split fractions must sum to 1, got {fractions}")
    parts = [[] for _ in fractions]
    cum = np.cumsum(fractions)
    for label in (1, 0):
        group = [p for p in pairs if p.label == label]
        order = rng.permutation(len(group))
        bounds = [0] + [int(math.floor(c * len(group) + 0.5)) for c in cum]
        bounds[-1] = len(group)
        for j in range(len(fractions)):
            parts[j].extend(group[i] for i in order[bounds[j] : bounds[j + 1]])
    return parts


def stratified_subsample(pairs, n: int, rng: np.random.Generator):
    """n pairs with both classes present, class sizes proportional to the pool."""
    members = [p for p in pairs if p.label == 1]
    others = [p for p in pairs if p.label == 0]
    if n > len(pairs):
        raise ValidationError(f"subsample size {n} exceeds the pool of {len(pairs)} pairs")
    if n < 2:
        raise ValidationError("subsample size must be >= 2 so both classes are present")
    n_pos = int(math.floor(n * len(members) / len(pairs) + 0.5))
    n_pos = min(max(n_pos, 1), n - 1)
    n_pos = min(n_pos, len(members))
    n_neg = n - n_pos
    pick_pos = rng.permutation(len(members))[:n_pos]
    pick_neg = rng.permutation(len(others))[:n_neg]
    return [members[i] for i in pick_pos] + [others[i] for i in pick_neg]


# ---------------------------------------------------------------------------
# Report cells
# ---------------------------------------------------------------------------


@dataclass
class EvalCell:
    protocol: str
    train_sources: tuple
    test_target: str
    encoder_id: str
    acc: float
    fpr: float | None
    fnr: float | None
    n_test: int
    counts: ConfusionCounts
    best_epoch: int = 0

    @classmethod
    def from_scores(cls, protocol, sources, target, encoder_id, scores, labels, threshold, best_epoch):
        m = compute_metrics(scores, labels, threshold)
        return cls(protocol, tuple(sources), target, encoder_id, m.acc, m.fpr, m.fnr, len(labels), m.counts, best_epoch)


def _check_datasets(datasets: dict, minimum: int):
    if len(datasets) < minimum:
        raise ValidationError(f"protocol needs at least {minimum} generators, got {len(datasets)}")
    shapes = set()
    for gid, pairs in datasets.items():
        if not pairs:
            raise ValidationError(f"generator {gid!r} has no pairs")
        for p in pairs:
            if p.generator_id != gid:
                raise ValidationError(f"pair {p.pair_id} belongs to {p.generator_id!r}, filed under {gid!r}")
        shapes.add(pairs[0].original.values.shape)
    if len(shapes) != 1:
        raise ValidationError(f"generators disagree on embedding shape: {sorted(shapes)}")


def _assert_no_leakage(target: str, *groups):
    for group in groups:
        leaked = [p.pair_id for p in group if p.generator_id == target]
        if leaked:
            raise ValidationError(f"target generator {target!r} leaked into training/validation: {leaked[:5]}")


def split_rng(seed: int, *names):
    return make_rng(seed, "split", *names)


def shadow_pool(datasets: dict, target: str | None, seed: int):
    """Pooled 80% train / 20% validation over every generator except target.

    Each generator's split depends only on (seed, generator_id), so a shadow
    is split identically in every cell that uses it.
    """
    train_pairs, val_pairs = [], []
    for gid in sorted(datasets):
        if gid == target:
            continue
        tr, va = stratified_split(datasets[gid], (0.8, 0.2), split_rng(seed, "shadow", gid))
        train_pairs += tr
        val_pairs += va
    if target is not None:
        _assert_no_leakage(target, train_pairs, val_pairs)
    return train_pairs, val_pairs


def _run_task(task):
    kind = task[0]
    if kind == "loo":
        _, datasets, target, config, encoder_id, threshold = task
        tr, va = shadow_pool(datasets, target, config.seed)
        params, log = train(tr, va, config)
        test = datasets[target]
        labels = [p.label for p in test]
        sources = tuple(g for g in sorted(datasets) if g != target)
        return EvalCell.from_scores(
            "leave_one_out", sources, target, encoder_id, score_pairs(params, test), labels, threshold, log.best_epoch
        )
    if kind == "transfer":
        _, datasets, source, config, encoder_id, threshold = task
        tr, va, te = stratified_split(datasets[source], (0.7, 0.2, 0.1), split_rng(config.seed, "transfer", source))
        params, log = train(tr, va, config)
        cells = []
        for target in sorted(datasets):
            test = te if target == source else datasets[target]
            labels = [p.label for p in test]
            cells.append(
                EvalCell.from_scores(
                    "transfer", (source,), target, encoder_id, score_pairs(params, test), labels, threshold, log.best_epoch
                )
            )
        return cells
    if kind == "ablation":
        _, tr, va, test, n, run_seed, base, threshold = task
        sub = stratified_subsample(tr, n, make_rng(run_seed, "subsample"))
        config = TrainConfig(**{**base.__dict__, "seed": run_seed})
        params, _ = train(sub, va, config)
        return compute_metrics(score_pairs(params, test), [p.label for p in test], threshold).acc
    raise ValueError(kind)


def _map(tasks, jobs: int):
    if jobs <= 1 or len(tasks) <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


def leave_one_out(datasets: dict, config: TrainConfig, encoder_id: str = "unknown", threshold: float = 0.5, jobs: int = 1):
    """One cell per held-out generator (requires three or more generators)."""
    _check_datasets(datasets, 3)
    tasks = [("loo", datasets, t, config, encoder_id, threshold) for t in sorted(datasets)]
    return _map(tasks, jobs)


def transferability_matrix(
    datasets: dict, config: TrainConfig, encoder_id: str = "unknown", threshold: float = 0.5, jobs: int = 1
):
    """Row-major source x target cells."""
    _check_datasets(datasets, 2)
    tasks = [("transfer", datasets, s, config, encoder_id, threshold) for s in sorted(datasets)]
    return [cell for row in _map(tasks, jobs) for cell in row]


@dataclass
class AblationPoint:
    n: int
    mean_acc: float
    accs: list
    seeds: list


@dataclass
class AblationCurve:
    target: str
    encoder_id: str
    points: list = field(default_factory=list)


def ablation_seed(seed: int, n: int, run: int) -> int:
    return stream_id(seed, "ablation", n, run) & 0x7FFFFFFF


def ablation_curve(
    datasets: dict,
    target: str,
    sizes=DEFAULT_ABLATION_SIZES,
    k: int = 3,
    config: TrainConfig | None = None,
    encoder_id: str = "unknown",
    threshold: float = 0.5,
    jobs: int = 1,
) -> AblationCurve:
    """Mean target accuracy over k stratified subsamples per training size."""
    config = config or TrainConfig()
    _check_datasets(datasets, 2)
    if target not in datasets:
        raise ValidationError(f"unknown target generator {target!r}")
    sizes = [int(n) for n in sizes]
    if sizes != sorted(sizes):
        raise ValidationError(f"sizes must be ascending, got {sizes}")
    if k < 1:
        raise ValidationError("k must be >= 1")
    tr, va = shadow_pool(datasets, target, config.seed)
    if sizes and sizes[-1] > len(tr):
        raise ValidationError(f"size {sizes[-1]} exceeds the pooled shadow training set ({len(tr)} pairs)")
    test = datasets[target]
    tasks, index = [], []
    for n in sizes:
        for r in range(k):
            s = ablation_seed(config.seed, n, r)
            tasks.append(("ablation", tr, va, test, n, s, config, threshold))
            index.append((n, s))
    accs = _map(tasks, jobs)
    curve = AblationCurve(target, encoder_id)
    for n in sizes:
        runs = [(s, a) for (m, s), a in zip(index, accs) if m == n]
        values = [a for _, a in runs]
        curve.points.append(AblationPoint(n, float(np.mean(values)), values, [s for s, _ in runs]))
    return curve


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

CELL_COLUMNS = [
    "protocol", "train_sources", "test_target", "encoder_id", "acc", "fpr", "fnr",
    "n_test", "tp", "fp", "tn", "fn", "best_epoch", "config_hash", "seed",
]  # fmt: skip


def cells_to_csv(cells, config_hash: str, seed: int) -> str:
    out = io.StringIO()
    out.write(",".join(CELL_COLUMNS) + "\n")
    for c in cells:
        row = [
            c.protocol, "+".join(c.train_sources), c.test_target, c.encoder_id, repr(float(c.acc)),
            fmt_rate(c.fpr), fmt_rate(c.fnr), str(c.n_test), str(c.counts.tp), str(c.counts.fp),
            str(c.counts.tn), str(c.counts.fn), str(c.best_epoch), config_hash, str(seed),
        ]  # fmt: skip
        out.write(",".join(row) + "\n")
    return out.getvalue()


def _pct(x) -> str:
    return UNDEFINED if x is None else f"{100.0 * x:.1f}"


def cells_to_markdown(cells, config_hash: str, seed: int, title: str = "Evaluation report") -> str:
    lines = [
        f"# {title}",
        "",
        f"config hash `{config_hash}`, seed {seed}",
        "",
        "| train | target | encoder | Acc (%) | FPR (%) | FNR (%) | n |",
        "|---|---|---|---:|---:|---:|---:|",
    ]
    for c in cells:
        lines.append(
            f"| {'+'.join(c.train_sources)} | {c.test_target} | {c.encoder_id} | "
            f"{_pct(c.acc)} | {_pct(c.fpr)} | {_pct(c.fnr)} | {c.n_test} |"
        )
    return "\n".join(lines) + "\n"


def transfer_grid_csv(cells) -> str:
    sources = sorted({c.train_sources[0] for c in cells})
    targets = sorted({c.test_target for c in cells})
    acc = {(c.train_sources[0], c.test_target): c.acc for c in cells}
    lines = ["source\\target," + ",".join(targets)]
    for s in sources:
        lines.append(s + "," + ",".join(repr(float(acc[s, t])) for t in targets))
    return "\n".join(lines) + "\n"


def ablation_to_csv(curve: AblationCurve, config_hash: str, seed: int) -> str:
    lines = ["target,encoder_id,n,mean_acc,k,accs,seeds,config_hash,seed"]
    for p in curve.points:
        lines.append(
            ",".join(
                [
                    curve.target, curve.encoder_id, str(p.n), repr(float(p.mean_acc)), str(len(p.accs)),
                    ";".join(repr(float(a)) for a in p.accs), ";".join(str(s) for s in p.seeds),
                    config_hash, str(seed),
                ]
            )
        )  # fmt: skip
    return "\n".join(lines) + "\n"


def ablation_to_markdown(curve: AblationCurve, config_hash: str, seed: int) -> str:
    lines = [
        f"# Training-size ablation (target {curve.target})",
        "",
        f"config hash `{config_hash}`, seed {seed}",
        "",
        "| n | mean Acc (%) | runs |",
        "|---:|---:|---:|",
    ]
    for p in curve.points:
        lines.append(f"| {p.n} | {100.0 * p.mean_acc:.1f} | {len(p.accs)} |")
    return "\n".join(lines) + "\n"
