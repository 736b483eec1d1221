"""Evaluation and diagnostics: Rouge-L, exact match, warmup statistics,
and target/non-target probability histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .model import LanguageModel, score_rows


@dataclass(frozen=True)
class RougeScore:
    precision: float
    recall: float
    f: float


def lcs_length(a, b) -> int:
    """Longest common subsequence length via the usual DP table."""
    n, m = len(a), len(b)
    prev = [0] * (m + 1)
    for i in range(1, n + 1):
        cur = [0] * (m + 1)
        ai = a[i - 1]
        for j in range(1, m + 1):
            if ai == b[j - 1]:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = cur[j - 1] if cur[j - 1] >= prev[j] else prev[j]
        prev = cur
    return prev[m]


def rouge_l(candidate, reference) -> RougeScore:
    """LCS-based Rouge-L with F1. Accepts token lists or whitespace strings."""
    if isinstance(candidate, str):
        candidate = candidate.split()
    if isinstance(reference, str):
        reference = reference.split()
    if not candidate or not reference:
        return RougeScore(0.0, 0.0, 0.0)
    lcs = lcs_length(candidate, reference)
    p = lcs / len(candidate)
    r = lcs / len(reference)
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    return RougeScore(p, r, f)


def extract_answer(text: str, delimiter: str = "=") -> str | None:
    """Answer span after the delimiter, whitespace-normalized; None if absent."""
    if delimiter not in text:
        return None
    return " ".join(text.split(delimiter, 1)[1].split())


def exact_match(candidate: str, reference: str, delimiter: str = "=") -> int:
    """1 iff both answers (after the delimiter) normalize to the same string.

    A candidate without the delimiter scores 0; count such cases upstream
    via extract_answer when a missing-delimiter tally is wanted.
    """
    ref = extract_answer(reference, delimiter)
    if ref is None:
        raise ValueError("reference lacks the answer delimiter")
    cand = extract_answer(candidate, delimiter)
    return int(cand is not None and cand == ref)


# ---------------------------------------------------------------------------
# warmup diagnostics
# ---------------------------------------------------------------------------


@dataclass
class WarmupStats:
    """Mismatch diagnostics over probed sequences.

    R    mean over sequences of the fraction of tokens passing detection
    All  fraction of sequences whose every token passes
    Len  mean sampled-sequence token count
    Good fraction of refined-and-scored sequences strictly better than
         their originals under the task reward
    """

    R: float
    All: float
    Len: float
    Good: float
    n_sequences: int = 0
    n_detected: int = 0
    n_refined_scored: int = 0
    n_accepted: int = 0
    prompts_total: int = 0
    prompts_without_detection: int = 0
    prompts_without_accepted_pair: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def token_pass_fraction(trace, mode: str, eta: float) -> float:
    """Fraction of tokens in a probe trace passing the detection rule."""
    if mode == "prob_margin":
        values = np.asarray(trace.margins)
    elif mode == "teacher_rank":
        values = np.asarray(trace.teacher_ranks)
    else:
        raise ValueError(f"unknown detection mode {mode!r}")
    return float((values <= eta).mean())


def warmup_stats(traces, outcomes, config) -> WarmupStats:
    """Aggregate R/All/Len/Good from probe traces and refinement outcomes.

    `outcomes` carries one record per refined-and-scored sequence with an
    `accepted` flag; undetected sequences never enter Good's denominator.
    """
    if not traces:
        raise ValueError("no probe traces to aggregate")
    fractions = [token_pass_fraction(t, config.mode, config.eta) for t in traces]
    lens = [len(t.y) for t in traces]
    scored = [o for o in outcomes if o.scored]
    good = (sum(1 for o in scored if o.accepted) / len(scored)) if scored else 0.0
    return WarmupStats(
        R=float(np.mean(fractions)),
        All=float(np.mean([f == 1.0 for f in fractions])),
        Len=float(np.mean(lens)),
        Good=float(good),
        n_sequences=len(traces),
        n_detected=sum(1 for f in fractions if f < 1.0),
        n_refined_scored=len(scored),
        n_accepted=sum(1 for o in scored if o.accepted),
    )


# ---------------------------------------------------------------------------
# distribution histograms
# ---------------------------------------------------------------------------

N_BINS = 50


@dataclass
class DistHistogram:
    """Histograms of q(target token) and the spread of the other tokens.

    Target probabilities are binned uniformly on [0, 1]; the population
    standard deviation of the remaining V-1 probabilities is bounded by
    0.5, so its bins cover [0, 0.5].
    """

    target_prob_hist: np.ndarray
    target_prob_edges: np.ndarray
    nontarget_std_hist: np.ndarray
    nontarget_std_edges: np.ndarray
    target_prob_mean: float
    nontarget_std_mean: float
    n_positions: int


def dist_histograms(model: LanguageModel, examples) -> DistHistogram:
    """Teacher-forced statistics of `model` on (prompt_ids, reference_ids) pairs."""
    t_probs: list[float] = []
    nt_stds: list[float] = []
    for prompt_ids, ref_ids in examples:
        rows = np.exp(score_rows(model, prompt_ids, [list(ref_ids)])[0])
        for i, tok in enumerate(ref_ids):
            row = rows[i]
            t_probs.append(float(row[tok]))
            rest = np.delete(row, tok)
            nt_stds.append(float(rest.std()))
    if not t_probs:
        raise ValueError("no scored positions")
    ph, pe = np.histogram(t_probs, bins=N_BINS, range=(0.0, 1.0))
    sh, se = np.histogram(nt_stds, bins=N_BINS, range=(0.0, 0.5))
    return DistHistogram(ph, pe, sh, se, float(np.mean(t_probs)), float(np.mean(nt_stds)),
                         len(t_probs))


def write_histogram_csv(hist: DistHistogram, path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "bin_left", "count"])
        for left, c in zip(hist.target_prob_edges[:-1], hist.target_prob_hist):
            w.writerow(["target_prob", f"{left:.6f}", int(c)])
        for left, c in zip(hist.nontarget_std_edges[:-1], hist.nontarget_std_hist):
            w.writerow(["nontarget_std", f"{left:.6f}", int(c)])
        w.writerow(["target_prob_mean", "", f"{hist.target_prob_mean:.6f}"])
        w.writerow(["nontarget_std_mean", "", f"{hist.nontarget_std_mean:.6f}"])


def write_metrics_csv(rows, path):
    """rows: iterable of (model_role, task, metric, value)."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["model", "task", "metric", "value"])
        for role, task, metric, value in rows:
            w.writerow([role, task, metric, f"{value:.4f}"])
