"""Mismatch detection and repair on student-sampled sequences.

The student samples continuations; both models score every sampled token
in a teacher-forced pass. A sequence is flagged at the first token whose
per-token score violates the configured rule, the teacher regenerates
everything from that point, and a task reward keeps only repairs that
strictly beat the original. Survivors become preference pairs.

Two detection rules are provided. `teacher_rank` (the default) flags the
first token whose rank under the teacher's distribution exceeds eta and
needs only the teacher's scores. `prob_margin` flags the first token
whose student-minus-teacher probability margin exceeds eta.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .model import EOS_ID, LanguageModel, Vocab, continue_from, sample, score_rows
from .training import derive_seed

MODES = ("teacher_rank", "prob_margin")


@dataclass(frozen=True)
class WarmupConfig:
    eta: float = 4.0
    mode: str = "teacher_rank"
    samples_per_prompt: int = 8
    temperature: float = 1.0
    top_p: float = 1.0
    max_new: int = 32
    greedy_continuation: bool = True
    max_prompts: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown detection mode {self.mode!r}")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.mode == "prob_margin" and self.eta > 1.0:
            raise ValueError("prob_margin eta must lie in (0, 1]")
        if self.samples_per_prompt < 1:
            raise ValueError("samples_per_prompt must be at least 1")


@dataclass
class ProbeTrace:
    prompt: list[int]
    y: list[int]
    p_probs: np.ndarray      # teacher probability of each sampled token
    q_probs: np.ndarray      # student probability of each sampled token
    margins: np.ndarray      # q - p per token
    teacher_ranks: np.ndarray  # 1-based rank of each token under the teacher


@dataclass(frozen=True)
class MismatchReport:
    detect_index: int | None
    mode: str
    eta: float


@dataclass
class PreferencePair:
    prompt: str
    chosen: str
    rejected: str
    meta: dict


@dataclass
class RefineOutcome:
    scored: bool
    accepted: bool
    detect_index: int | None = None
    reward_plus: float = 0.0
    reward_minus: float = 0.0


def _ranks_of(rows: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """1-based rank of tokens[i] in probability row i; ties go to lower ids."""
    picked = rows[np.arange(len(tokens)), tokens]
    higher = (rows > picked[:, None]).sum(axis=1)
    tied_lower = ((rows == picked[:, None]) & (np.arange(rows.shape[1]) < tokens[:, None])).sum(axis=1)
    return (higher + tied_lower + 1).astype(np.int64)


def probe_many(teacher: LanguageModel, student: LanguageModel, prompt: list[int],
               ys: list[list[int]]) -> list[ProbeTrace]:
    """Teacher-forced probes for several samples of one prompt (no RNG)."""
    if any(len(y) == 0 for y in ys):
        raise ValueError("cannot probe an empty sample")
    t_rows = score_rows(teacher, prompt, ys)
    q_rows = score_rows(student, prompt, ys)
    traces = []
    for y, tr, qr in zip(ys, t_rows, q_rows):
        toks = np.asarray(y, dtype=np.int64)
        p_rows = np.exp(tr)
        p = p_rows[np.arange(len(y)), toks]
        q = np.exp(qr[np.arange(len(y)), toks])
        traces.append(ProbeTrace(
            prompt=list(prompt), y=list(y),
            p_probs=p, q_probs=q, margins=q - p,
            teacher_ranks=_ranks_of(p_rows, toks),
        ))
    return traces


def probe(teacher: LanguageModel, student: LanguageModel, prompt: list[int],
          y: list[int]) -> ProbeTrace:
    return probe_many(teacher, student, prompt, [y])[0]


def detect(trace: ProbeTrace, config: WarmupConfig) -> MismatchReport:
    """First token violating the configured rule, or none."""
    if config.mode == "prob_margin":
        bad = np.flatnonzero(np.asarray(trace.margins) > config.eta)
    else:
        bad = np.flatnonzero(np.asarray(trace.teacher_ranks) > config.eta)
    idx = int(bad[0]) if bad.size else None
    return MismatchReport(detect_index=idx, mode=config.mode, eta=config.eta)


def refine(teacher: LanguageModel, prompt: list[int], y: list[int],
           report: MismatchReport, config: WarmupConfig,
           rng: np.random.Generator | None = None) -> list[int]:
    """Keep the pre-detection prefix; let the teacher regenerate the rest."""
    if report.detect_index is None:
        raise ValueError("refine requires a detected mismatch")
    prefix = list(y[:report.detect_index])
    budget = config.max_new + len(y) - len(prefix)
    return continue_from(teacher, prompt, prefix, max_new=budget,
                         greedy=config.greedy_continuation,
                         temperature=config.temperature, top_p=config.top_p, rng=rng)


def reward_accept(y_plus: str, y_minus: str, reference: str, task: str
                  ) -> tuple[bool, float, float]:
    """Strict-improvement filter under the task reward.

    instruction_proxy scores Rouge-L F against the reference; math_proxy
    scores exact-match of the delimited answer.
    """
    if task == "instruction_proxy":
        r_plus = metrics.rouge_l(y_plus, reference).f
        r_minus = metrics.rouge_l(y_minus, reference).f
    elif task == "math_proxy":
        r_plus = float(metrics.exact_match(y_plus, reference))
        r_minus = float(metrics.exact_match(y_minus, reference))
    else:
        raise ValueError(f"unknown task {task!r}")
    return r_plus > r_minus, r_plus, r_minus


def build_pairs(teacher: LanguageModel, student: LanguageModel, corpus,
                config: WarmupConfig, task: str, seed: int = 0,
                ) -> tuple[list[PreferencePair], metrics.WarmupStats]:
    """Sample, probe, detect, repair and filter over a corpus.

    corpus: iterable with .id/.prompt/.reference records. Deterministic in
    `seed` via per-prompt RNG streams. Prompts where nothing is detected,
    or where no repair survives the reward filter, are tallied in the
    returned stats rather than dropped silently.
    """
    vocab = student.vocab or teacher.vocab
    if vocab is None:
        raise ValueError("models carry no vocab; cannot build pairs")
    examples = list(corpus)
    if config.max_prompts is not None:
        examples = examples[:config.max_prompts]
    if not examples:
        raise ValueError("empty corpus")

    pairs: list[PreferencePair] = []
    traces_all: list[ProbeTrace] = []
    outcomes: list[RefineOutcome] = []
    prompts_no_detect = 0
    prompts_no_accept = 0
    for ex in examples:
        rng = np.random.default_rng(derive_seed(seed, "warmup", ex.id))
        prompt_ids = vocab.encode(ex.prompt)
        ys = sample(student, prompt_ids, n=config.samples_per_prompt,
                    max_new=config.max_new, temperature=config.temperature,
                    top_p=config.top_p, rng=rng)
        ys = [y for y in ys if y]
        if not ys:
            prompts_no_detect += 1
            continue
        traces = probe_many(teacher, student, prompt_ids, ys)
        traces_all.extend(traces)
        any_detect = False
        any_accept = False
        for trace in traces:
            report = detect(trace, config)
            if report.detect_index is None:
                continue
            any_detect = True
            y_plus_ids = refine(teacher, prompt_ids, trace.y, report, config, rng=rng)
            accept, r_plus, r_minus = reward_accept(
                vocab.decode(y_plus_ids), vocab.decode(trace.y), ex.reference, task)
            outcomes.append(RefineOutcome(True, accept, report.detect_index, r_plus, r_minus))
            if not accept:
                continue
            any_accept = True
            pairs.append(PreferencePair(
                prompt=ex.prompt,
                chosen=vocab.decode(y_plus_ids),
                rejected=vocab.decode(trace.y),
                meta={"detect_index": report.detect_index, "mode": config.mode,
                      "eta": config.eta, "reward_plus": r_plus, "reward_minus": r_minus,
                      "example_id": ex.id},
            ))
        if not any_detect:
            prompts_no_detect += 1
        elif not any_accept:
            prompts_no_accept += 1

    stats = metrics.warmup_stats(traces_all, outcomes, config)
    stats.prompts_total = len(examples)
    stats.prompts_without_detection = prompts_no_detect
    stats.prompts_without_accepted_pair = prompts_no_accept
    return pairs, stats


def skd_refine(teacher: LanguageModel, student: LanguageModel, prompt: list[int],
               rank_cap: int, max_new: int = 32) -> tuple[list[int], int]:
    """Interleaved decoding: the student proposes greedily, and proposals
    whose teacher rank exceeds rank_cap are replaced by the teacher's
    greedy token. Returns (sequence, replacement count)."""
    from .model import BOS_ID, DecodeState

    if rank_cap < 1:
        raise ValueError("rank_cap must be at least 1")
    st_s = DecodeState(student, 1)
    st_t = DecodeState(teacher, 1)
    s_logits = st_s.feed([BOS_ID] + list(prompt))
    t_logits = st_t.feed([BOS_ID] + list(prompt))
    out: list[int] = []
    replaced = 0
    budget = min(max_new,
                 student.config.context_len - 1 - len(prompt),
                 teacher.config.context_len - 1 - len(prompt))
    for _ in range(budget):
        proposal = int(s_logits.argmax(axis=-1)[0])
        t_row = np.exp(t_logits.astype(np.float64)
                       - t_logits.max(axis=-1, keepdims=True))
        t_row /= t_row.sum(axis=-1, keepdims=True)
        rank = int(_ranks_of(t_row, np.array([proposal]))[0])
        if rank > rank_cap:
            token = int(t_logits.argmax(axis=-1)[0])
            replaced += 1
        else:
            token = proposal
        out.append(token)
        if token == EOS_ID:
            break
        arr = np.array([token])
        s_logits = st_s.step(arr)
        t_logits = st_t.step(arr)
    return out, replaced


# ---------------------------------------------------------------------------
# pair files
# ---------------------------------------------------------------------------


def write_pairs(pairs: list[PreferencePair], path):
    with open(path, "w") as f:
        for p in pairs:
            f.write(json.dumps({"prompt": p.prompt, "chosen": p.chosen,
                                "rejected": p.rejected, "meta": p.meta},
                               sort_keys=True) + "\n")


def read_pairs(path) -> list[PreferencePair]:
    pairs = []
    with open(path) as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                pairs.append(PreferencePair(d["prompt"], d["chosen"], d["rejected"],
                                            d.get("meta", {})))
    return pairs
