"""Accuracy, rank correlation and multi-classifier significance tests."""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import chi2, norm, rankdata

EXACT_MAX_N = 20
LOW_POWER_N = 6


def accuracy(preds, labels) -> float:
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.size == 0:
        raise ValueError("accuracy of an empty prediction set")
    if preds.shape != labels.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {labels.shape}")
    return float(np.mean(preds == labels))


def spearman_rho(a, b) -> float:
    """Pearson correlation of average ranks."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.size == 0 or a.shape != b.shape:
        raise ValueError("spearman_rho needs two non-empty vectors of equal length")
    ra, rb = rankdata(a) - (a.size + 1) / 2, rankdata(b) - (b.size + 1) / 2
    denom = math.sqrt((ra ** 2).sum() * (rb ** 2).sum())
    if denom == 0:
        raise ValueError("spearman_rho is undefined for a constant vector")
    return float((ra * rb).sum() / denom)


def rank_rows(table: np.ndarray) -> np.ndarray:
    """Per-row ranks with 1 = highest value; ties share their average rank."""
    return np.apply_along_axis(lambda r: rankdata(-r), 1, np.asarray(table, dtype=np.float64))


def average_ranks(table: np.ndarray) -> np.ndarray:
    return rank_rows(table).mean(axis=0)


def friedman_test(table: np.ndarray) -> tuple[float, float]:
    """Tie-corrected Friedman chi-square over rows (datasets) x columns (classifiers)."""
    table = np.asarray(table, dtype=np.float64)
    n, k = table.shape
    if n < 2 or k < 2:
        raise ValueError("friedman_test needs >= 2 datasets and >= 2 classifiers")
    ranks = rank_rows(table)
    rank_sums = ranks.sum(axis=0)
    stat = 12.0 / (n * k * (k + 1)) * (rank_sums ** 2).sum() - 3.0 * n * (k + 1)
    ties = 0.0
    for row in table:
        _, counts = np.unique(row, return_counts=True)
        ties += (counts ** 3 - counts).sum()
    correction = 1.0 - ties / (n * (k ** 3 - k))
    if correction <= 0:  # every row fully tied
        return 0.0, 1.0
    stat = max(stat / correction, 0.0)
    return float(stat), float(chi2.sf(stat, k - 1))


# Wilcoxon signed-rank -------------------------------------------------------------------------

@dataclass
class SignedRankResult:
    statistic: float    # min(W+, W-)
    w_plus: float
    p_value: float
    n: int              # non-zero differences
    exact: bool
    low_power: bool


def _signed_ranks(a, b) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    return rankdata(np.abs(d)), d


def exact_lower_tail(ranks: np.ndarray, w: float) -> float:
    """P(W+ <= w) under the null where every rank's sign is a fair coin.

    Average ranks are multiples of 1/2, so the DP runs over doubled ranks.
    """
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1)
    counts[0] = 1.0
    for r in doubled:
        counts[r:] += counts[:-r].copy()
    target = int(math.floor(2 * w + 1e-9))
    return float(counts[:target + 1].sum() / 2.0 ** len(doubled))


def wilcoxon_signed_rank(a, b) -> SignedRankResult:
    """Two-sided signed-rank test; zero differences are dropped.

    Exact null distribution up to 20 pairs, otherwise a normal
    approximation with continuity and tie correction.
    """
    ranks, d = _signed_ranks(a, b)
    n = len(d)
    if n == 0:
        return SignedRankResult(0.0, 0.0, 1.0, 0, True, True)
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= EXACT_MAX_N:
        p = min(1.0, 2.0 * exact_lower_tail(ranks, w))
        exact = True
    else:
        mean = ranks.sum() / 2.0
        sd = math.sqrt((ranks ** 2).sum() / 4.0)
        z = (w - mean + 0.5) / sd
        p = min(1.0, 2.0 * float(norm.cdf(z)))
        exact = False
    return SignedRankResult(w, w_plus, p, n, exact, n < LOW_POWER_N)


def enumerate_signed_rank_p(a, b) -> float:
    """Brute-force two-sided p-value over all 2^n sign assignments (small n only)."""
    ranks, d = _signed_ranks(a, b)
    n = len(d)
    if n == 0:
        return 1.0
    w = min(ranks[d > 0].sum(), ranks[d < 0].sum())
    hits = sum(1 for signs in itertools.product((0, 1), repeat=n)
               if np.dot(signs, ranks) <= w + 1e-9)
    return min(1.0, 2.0 * hits / 2 ** n)


def holm(p_values, alpha: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Step-down Holm: returns (adjusted p-values, reject flags) in input order."""
    p = np.asarray(p_values, dtype=np.float64)
    m = len(p)
    order = np.argsort(p, kind="stable")
    adjusted = np.empty(m)
    reject = np.zeros(m, dtype=bool)
    running = 0.0
    still = True
    for i, idx in enumerate(order):
        running = max(running, min(1.0, (m - i) * p[idx]))
        adjusted[idx] = running
        still = still and p[idx] <= alpha / (m - i)
        reject[idx] = still
    return adjusted, reject


# comparison report -------------------------------------------------------------------------------

@dataclass
class PairResult:
    a: str
    b: str
    p_value: float
    p_adjusted: float
    significant: bool
    low_power: bool


@dataclass
class ComparisonReport:
    classifiers: list[str]
    average_ranks: dict[str, float]
    friedman_statistic: float
    friedman_p: float
    pairs: list[PairResult] = field(default_factory=list)
    cliques: list[list[str]] = field(default_factory=list)
    alpha: float = 0.05

    def significant(self, a: str, b: str) -> bool:
        for pr in self.pairs:
            if {pr.a, pr.b} == {a, b}:
                return pr.significant
        raise KeyError((a, b))


def _cliques(order: list[str], significant) -> list[list[str]]:
    """Maximal runs of the rank ordering with no significant pair inside."""
    runs = []
    for i in range(len(order)):
        j = i
        while j + 1 < len(order) and not any(significant(order[k], order[j + 1]) for k in range(i, j + 1)):
            j += 1
        if j > i:
            runs.append(order[i:j + 1])
    return [r for r in runs if not any(set(r) < set(o) for o in runs)]


def wilcoxon_holm(table: np.ndarray, names: list[str], alpha: float = 0.05) -> ComparisonReport:
    """Friedman test, pairwise signed-rank tests with Holm correction, and cliques."""
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[1] != len(names):
        raise ValueError("table must have one column per classifier name")
    if np.isnan(table).any():
        raise ValueError("results table has missing cells")
    ranks = average_ranks(table)
    stat, p_f = friedman_test(table) if table.shape[0] >= 2 else (0.0, 1.0)
    pairs = list(itertools.combinations(range(len(names)), 2))
    tests = [wilcoxon_signed_rank(table[:, i], table[:, j]) for i, j in pairs]
    adjusted, reject = holm([t.p_value for t in tests], alpha)
    results = [PairResult(names[i], names[j], t.p_value, float(adj), bool(rej), t.low_power)
               for (i, j), t, adj, rej in zip(pairs, tests, adjusted, reject)]
    report = ComparisonReport(list(names), dict(zip(names, map(float, ranks))), stat, p_f,
                              results, alpha=alpha)
    order = [names[i] for i in np.argsort(ranks, kind="stable")]
    report.cliques = _cliques(order, report.significant)
    return report


# IO ----------------------------------------------------------------------------------------------

def read_results_csv(path) -> tuple[list[str], list[str], np.ndarray]:
    """``dataset,<clf1>,<clf2>,...`` -> (datasets, classifiers, accuracy table)."""
    with open(path, newline="") as f:
        rows = [r for r in csv.reader(f) if r and any(c.strip() for c in r)]
    if not rows or len(rows[0]) < 2:
        raise ValueError(f"{path}: expected a header 'dataset,<classifier>,...'")
    header, body = rows[0], rows[1:]
    names = [h.strip() for h in header[1:]]
    table = np.full((len(body), len(names)), np.nan)
    for i, row in enumerate(body):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i + 2} has {len(row)} cells, header has {len(header)}")
        for j, cell in enumerate(row[1:]):
            try:
                table[i, j] = float(cell)
            except ValueError:
                raise ValueError(f"{path}: row {i + 2}, column {names[j]!r}: bad value {cell!r}") from None
    if np.isnan(table).any():
        raise ValueError(f"{path}: missing accuracy cells")
    if (table < 0).any() or (table > 1).any():
        raise ValueError(f"{path}: accuracies must lie in [0, 1]")
    return [r[0] for r in body], names, table


def format_report(report: ComparisonReport) -> str:
    lines = ["# Friedman (all classifiers)",
             f"statistic = {report.friedman_statistic:.6g}",
             f"p_value = {report.friedman_p:.6g}",
             "", "# average ranks (1 = best)"]
    for name in sorted(report.classifiers, key=report.average_ranks.get):
        lines.append(f"{name} = {report.average_ranks[name]:.4f}")
    lines += ["", f"# pairwise Wilcoxon signed-rank, Holm alpha = {report.alpha:g}"]
    for pr in report.pairs:
        flag = " low-power" if pr.low_power else ""
        lines.append(f"{pr.a} vs {pr.b}: p = {pr.p_value:.6g}, holm p = {pr.p_adjusted:.6g}, "
                     f"{'significant' if pr.significant else 'not significant'}{flag}")
    lines += ["", "# cliques (no significant difference inside)"]
    lines += [" ".join(c) for c in report.cliques] or ["none"]
    return "\n".join(lines) + "\n"


def write_report_csv(report: ComparisonReport, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranks_path, pairs_path = out_dir / "ranks.csv", out_dir / "pairwise.csv"
    with open(ranks_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["classifier", "average_rank"])
        for name in report.classifiers:
            w.writerow([name, repr(report.average_ranks[name])])
    with open(pairs_path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["a", "b", "p_value", "p_holm", "significant", "low_power"])
        for pr in report.pairs:
            w.writerow([pr.a, pr.b, repr(pr.p_value), repr(pr.p_adjusted),
                        int(pr.significant), int(pr.low_power)])
    return ranks_path, pairs_path
