"""Correct-detection criteria, detection metrics, split protocols and k-fold CV."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .imagecore import PoreSet


@dataclass(frozen=True)
class MatchResult:
    pairs: tuple[tuple[int, int], ...]
    unmatched_detections: tuple[int, ...]
    unmatched_gt: tuple[int, ...]

    @classmethod
    def from_pairs(cls, pairs, n_det: int, n_gt: int) -> "MatchResult":
        pairs = tuple(sorted((int(d), int(g)) for d, g in pairs))
        used_d = {d for d, _ in pairs}
        used_g = {g for _, g in pairs}
        return cls(pairs,
                   tuple(i for i in range(n_det) if i not in used_d),
                   tuple(i for i in range(n_gt) if i not in used_g))


@dataclass(frozen=True)
class Criterion:
    kind: str = "bidirectional"  # bidirectional | euclidean | manhattan
    tau: float = 0.0

    def __post_init__(self):
        if self.kind not in ("bidirectional", "euclidean", "manhattan"):
            raise ValueError(f"unknown criterion {self.kind!r}")
        if self.kind != "bidirectional" and not self.tau > 0:
            raise ValueError(f"{self.kind} criterion needs tau > 0")

    @classmethod
    def parse(cls, text: str) -> "Criterion":
        """``bidirectional``, ``euclidean:<tau>`` or ``manhattan:<tau>``."""
        kind, _, tau = text.strip().partition(":")
        if kind == "bidirectional":
            if tau:
                raise ValueError("bidirectional criterion takes no threshold")
            return cls()
        try:
            return cls(kind, float(tau))
        except ValueError as exc:
            raise ValueError(f"bad criterion {text!r}: {exc}") from None

    def __str__(self) -> str:
        return self.kind if self.kind == "bidirectional" else f"{self.kind}:{self.tau:g}"

    def match(self, det: PoreSet, gt: PoreSet) -> MatchResult:
        if self.kind == "bidirectional":
            return match_bidirectional(det, gt)
        return match_threshold(det, gt, self.kind, self.tau)


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a[:, None, :].astype(np.int64) - b[None, :, :].astype(np.int64)
    return (d * d).sum(axis=2)


def match_bidirectional(det: PoreSet, gt: PoreSet) -> MatchResult:
    """Mutual nearest neighbours; ties go to the lowest index."""
    nd, ng = len(det), len(gt)
    if nd == 0 or ng == 0:
        return MatchResult.from_pairs((), nd, ng)
    d2 = _sqdist(det.points, gt.points)
    nearest_gt = d2.argmin(axis=1)
    nearest_det = d2.argmin(axis=0)
    di = np.arange(nd)
    ok = nearest_det[nearest_gt] == di
    return MatchResult.from_pairs(zip(di[ok], nearest_gt[ok]), nd, ng)


def match_threshold(det: PoreSet, gt: PoreSet, metric: str = "euclidean", tau: float = 5.0) -> MatchResult:
    """Greedy one-to-one matching in ascending distance among pairs with distance <= tau."""
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    nd, ng = len(det), len(gt)
    if nd == 0 or ng == 0:
        return MatchResult.from_pairs((), nd, ng)
    diff = np.abs(det.points[:, None, :].astype(np.int64) - gt.points[None, :, :].astype(np.int64))
    if metric == "euclidean":
        dist = np.sqrt((diff * diff).sum(axis=2).astype(np.float64))
    elif metric == "manhattan":
        dist = diff.sum(axis=2).astype(np.float64)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    di, gi = np.nonzero(dist <= tau)
    order = np.lexsort((gi, di, dist[di, gi]))
    used_d = np.zeros(nd, dtype=bool)
    used_g = np.zeros(ng, dtype=bool)
    pairs = []
    for k in order:
        d, g = di[k], gi[k]
        if not used_d[d] and not used_g[g]:
            used_d[d] = used_g[g] = True
            pairs.append((d, g))
    return MatchResult.from_pairs(pairs, nd, ng)


# ----------------------------------------------------------------------------- metrics

@dataclass(frozen=True)
class Metrics:
    tdr: float
    fdr: float
    f: float


def f_score(tdr: float, fdr: float) -> float:
    """Harmonic mean of TDR and (100 - FDR), in percent."""
    precision = 100.0 - fdr
    den = tdr + precision
    return 0.0 if den == 0 else 2.0 * tdr * precision / den


def compute_metrics(matched: MatchResult | int, n_det: int, n_gt: int) -> Metrics:
    n_pairs = len(matched.pairs) if isinstance(matched, MatchResult) else int(matched)
    if n_gt <= 0:
        raise ValueError("metrics need at least one ground-truth pore")
    if n_det < 0 or n_pairs > min(n_det, n_gt):
        raise ValueError(f"inconsistent counts: {n_pairs} pairs, {n_det} detections, {n_gt} gt")
    tdr = 100.0 * n_pairs / n_gt
    fdr = 100.0 * (n_det - n_pairs) / max(n_det, 1)
    return Metrics(tdr, fdr, f_score(tdr, fdr))


@dataclass
class ImageScore:
    stem: str
    n_det: int
    n_gt: int
    n_matched: int
    tdr: float
    fdr: float
    f: float


@dataclass
class EvalReport:
    per_image: list[ImageScore]
    aggregate: Metrics
    macro: Metrics
    criterion: str
    parameters: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "per_image": [asdict(s) for s in self.per_image],
            "aggregate": asdict(self.aggregate),
            "macro": asdict(self.macro),
            "criterion": self.criterion,
            "parameters": self.parameters,
        }, indent=2, sort_keys=False)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls([ImageScore(**s) for s in d["per_image"]], Metrics(**d["aggregate"]),
                   Metrics(**d["macro"]), d["criterion"], d.get("parameters", {}))

    def to_text(self) -> str:
        w = max([len("image")] + [len(s.stem) for s in self.per_image])
        head = f"{'image':<{w}}  {'det':>6} {'gt':>6} {'match':>6} {'TDR':>7} {'FDR':>7} {'F':>7}"
        lines = [f"criterion: {self.criterion}", head, "-" * len(head)]
        for s in self.per_image:
            lines.append(f"{s.stem:<{w}}  {s.n_det:>6} {s.n_gt:>6} {s.n_matched:>6} "
                         f"{s.tdr:>7.2f} {s.fdr:>7.2f} {s.f:>7.2f}")
        lines.append("-" * len(head))
        nd = sum(s.n_det for s in self.per_image)
        ng = sum(s.n_gt for s in self.per_image)
        nm = sum(s.n_matched for s in self.per_image)
        a = self.aggregate
        lines.append(f"{'micro':<{w}}  {nd:>6} {ng:>6} {nm:>6} {a.tdr:>7.2f} {a.fdr:>7.2f} {a.f:>7.2f}")
        m = self.macro
        lines.append(f"{'macro':<{w}}  {'':>6} {'':>6} {'':>6} {m.tdr:>7.2f} {m.fdr:>7.2f} {m.f:>7.2f}")
        return "\n".join(lines) + "\n"


def evaluate_dataset(detections: Mapping[str, PoreSet], ground_truth: Mapping[str, PoreSet],
                     criterion: Criterion | str = "bidirectional", parameters: dict | None = None) -> EvalReport:
    """Per-image metrics plus pooled (micro) and averaged (macro) aggregates."""
    if isinstance(criterion, str):
        criterion = Criterion.parse(criterion)
    missing = set(detections) ^ set(ground_truth)
    if missing:
        raise KeyError(f"image keys differ between detections and ground truth: {sorted(missing)}")
    scores = []
    for stem in sorted(ground_truth):
        det, gt = detections[stem], ground_truth[stem]
        m = criterion.match(det, gt)
        if len(gt) == 0:
            met = Metrics(0.0, 100.0 if len(det) else 0.0, 0.0)
        else:
            met = compute_metrics(m, len(det), len(gt))
        scores.append(ImageScore(stem, len(det), len(gt), len(m.pairs), met.tdr, met.fdr, met.f))
    nd = sum(s.n_det for s in scores)
    ng = sum(s.n_gt for s in scores)
    nm = sum(s.n_matched for s in scores)
    if ng == 0:
        raise ValueError("ground truth contains no pores")
    micro = compute_metrics(nm, nd, ng)
    macro = Metrics(*(float(np.mean([getattr(s, k) for s in scores])) for k in ("tdr", "fdr", "f")))
    return EvalReport(scores, micro, macro, str(criterion), dict(parameters or {}))


# ----------------------------------------------------------------------------- protocols

@dataclass(frozen=True)
class Protocol:
    """Split template: each part is a tuple of (subset name, count)."""

    id: str
    train: tuple[tuple[str, int], ...]
    val: tuple[tuple[str, int], ...]
    test: tuple[tuple[str, int], ...]

    def sizes(self) -> tuple[int, int, int]:
        return tuple(sum(n for _, n in part) for part in (self.train, self.val, self.test))


@dataclass(frozen=True)
class SplitLists:
    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise ValueError("train/val/test lists overlap")


_PROTOCOLS = (
    Protocol("I", (), (), (("DBI", 24),)),
    Protocol("II", (), (), (("DBI", 30),)),
    Protocol("III", (("DBI", 20),), (), (("DBI", 10),)),
    Protocol("IV", (("DBI", 18),), (("DBI", 6),), (("DBI", 6),)),
    Protocol("V", (("DBI", 24),), (), (("DBI", 6),)),
    Protocol("VI", (("DBI", 15),), (("DBI", 5),), (("DBI", 10),)),
    Protocol("VII", (("DBII", 70),), (), (("DBI", 30),)),
    Protocol("VIII", (("DBII", 90),), (), (("DBI", 30), ("DBII", 30))),
)


def protocol_registry() -> list[Protocol]:
    """PolyU-HRF split templates I-VIII (subset sizes only)."""
    return list(_PROTOCOLS)


def get_protocol(pid: str) -> Protocol:
    for p in _PROTOCOLS:
        if p.id == pid:
            return p
    raise KeyError(f"unknown protocol {pid!r}; known: {[p.id for p in _PROTOCOLS]}")


def instantiate_protocol(protocol: Protocol, pools: Mapping[str, Sequence[str]], seed: int = 0) -> SplitLists:
    """Draw stems for each part from the named subset pools, without reuse."""
    rng = np.random.default_rng(seed)
    remaining = {k: [v[i] for i in rng.permutation(len(v))] for k, v in sorted(pools.items())}
    parts = []
    for part in (protocol.train, protocol.val, protocol.test):
        chosen = []
        for subset, n in part:
            avail = remaining.get(subset, [])
            if len(avail) < n:
                raise ValueError(f"protocol {protocol.id} needs {n} more {subset} images, only {len(avail)} left")
            chosen += avail[:n]
            remaining[subset] = avail[n:]
        parts.append(tuple(chosen))
    return SplitLists(*parts)


def kfold_assign(stems: Sequence[str], k: int, seed: int = 0) -> list[list[str]]:
    """Seeded permutation cut into k near-equal folds."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if len(stems) < k:
        raise ValueError(f"{len(stems)} images are too few for {k} folds")
    order = np.random.default_rng(seed).permutation(len(stems))
    return [[stems[i] for i in chunk] for chunk in np.array_split(order, k)]


def kfold_splits(stems: Sequence[str], k: int, seed: int = 0) -> list[SplitLists]:
    """Fold i tests on subset i; the first remaining image is held out for validation."""
    folds = kfold_assign(stems, k, seed)
    out = []
    for i, test in enumerate(folds):
        rest = [s for j, f in enumerate(folds) if j != i for s in f]
        if len(rest) < 2:
            raise ValueError("each fold needs at least one training and one validation image")
        out.append(SplitLists(tuple(rest[1:]), (rest[0],), tuple(test)))
    return out


# ----------------------------------------------------------------------------- cross-validation

@dataclass
class CrossValResult:
    reports: list[EvalReport]
    splits: list[SplitLists]

    @property
    def fold_f(self) -> list[float]:
        return [r.aggregate.f for r in self.reports]

    @property
    def mean_f(self) -> float:
        return float(np.mean(self.fold_f))

    @property
    def std_f(self) -> float:
        """Sample standard deviation over folds."""
        return float(np.std(self.fold_f, ddof=1)) if len(self.reports) > 1 else 0.0

    def summary(self) -> str:
        lines = [f"fold {i}: F = {f:.2f}" for i, f in enumerate(self.fold_f)]
        lines.append(f"mean F = {self.mean_f:.2f}  std = {self.std_f:.2f}")
        return "\n".join(lines) + "\n"


def _run_fold(args):
    split, loader, cfg, criterion, fold = args
    from dataclasses import replace
    from .fcn import detect, train
    tr = [loader(s) for s in split.train]
    va = [loader(s) for s in split.val]
    res = train(tr, va, replace(cfg, seed=cfg.seed + fold))
    dets, gts = {}, {}
    for s in split.test:
        img, gt = loader(s)
        dets[s] = detect(res.model, img)
        gts[s] = gt
    return evaluate_dataset(dets, gts, criterion, {"fold": fold, "best_epoch": res.best_epoch})


def crossval(stems: Sequence[str], loader: Callable, k: int, cfg, criterion: Criterion | str = "bidirectional",
             seed: int = 0, jobs: int = 1) -> CrossValResult:
    """k-fold cross-validation of the FCN baseline.

    ``loader(stem)`` returns ``(GrayImage, PoreSet)``. Fold i trains with seed
    ``cfg.seed + i``; ``jobs > 1`` trains folds in worker processes (the loader
    must then be picklable).
    """
    if isinstance(criterion, str):
        criterion = Criterion.parse(criterion)
    splits = kfold_splits(list(stems), k, seed)
    work = [(sp, loader, cfg, criterion, i) for i, sp in enumerate(splits)]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            reports = list(ex.map(_run_fold, work))
    else:
        reports = [_run_fold(w) for w in work]
    return CrossValResult(reports, splits)
