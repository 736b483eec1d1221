"""Experiment orchestration.

A run executes the enabled stages in order for every seed:

  corpus -> teacher -> student -> warmup -> align -> stats -> distill
         -> eval -> plot

Each stage reads only prior-stage artifacts from the run directory and
derives its RNG stream from (seed, stage), so deleting a later stage's
outputs and resuming reproduces them bit-identically. The distill stage
optionally trains a comparison arm from the vanilla student so reports
can show warmup-vs-vanilla deltas per loss kind.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import losses, metrics
from .align import AlignConfig, warmup_align
from .corpus import CorpusExample, encode_example, gen_corpus, read_split, write_corpus
from .model import (BOS_ID, EOS_ID, LanguageModel, LmConfig, Vocab,
                    generate_batch, init_model, load_checkpoint, logits_batch,
                    save_checkpoint)
from .tensor import Tensor, constant
from .training import OptConfig, derive_seed, fit
from .warmup import WarmupConfig, build_pairs, read_pairs, write_pairs

TOOL_VERSION = "0.1.0"

STAGE_ORDER = ("corpus", "teacher", "student", "warmup", "align", "stats",
               "distill", "eval", "plot")

SEEDS_ENV = "KDLAB_SEEDS"


@dataclass(frozen=True)
class ModelSpec:
    n_layers: int
    n_heads: int
    d_model: int
    d_ff: int
    context_len: int
    steps: int
    lr: float = 3e-4
    batch_size: int = 16

    def lm_config(self, vocab_size: int, seed: int) -> LmConfig:
        return LmConfig(vocab_size=vocab_size, context_len=self.context_len,
                        n_layers=self.n_layers, n_heads=self.n_heads,
                        d_model=self.d_model, d_ff=self.d_ff, seed=seed)


@dataclass(frozen=True)
class DistillSpec:
    kinds: tuple = ("seqkd_ce",)
    temperature: float = 2.0
    mix: float = 0.5
    skew_lambda: float = 0.1
    steps: int = 150
    lr: float = 3e-4
    batch_size: int = 16
    compare_vanilla: bool = True

    def config_for(self, kind: str) -> losses.DistillConfig:
        lam = self.skew_lambda if kind == "skew_fkl" else None
        return losses.DistillConfig(kind=kind, temperature=self.temperature,
                                    skew_lambda=lam, mix=self.mix)


@dataclass(frozen=True)
class ExperimentConfig:
    task: str
    outdir: str
    seeds: tuple = (0, 42, 123)
    corpus_size: int = 600
    corpus_seed: int = 7
    teacher: ModelSpec = field(default_factory=lambda: ModelSpec(4, 4, 128, 256, 48, 900))
    student: ModelSpec = field(default_factory=lambda: ModelSpec(2, 4, 64, 128, 48, 600))
    warmup: WarmupConfig = field(default_factory=WarmupConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    distill: DistillSpec = field(default_factory=DistillSpec)
    eval_max_new: int = 24
    stages: tuple = STAGE_ORDER

    def __post_init__(self):
        if self.task not in corpus_mod.TASKS:
            raise ValueError(f"unknown task {self.task!r}")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        bad = set(self.stages) - set(STAGE_ORDER)
        if bad:
            raise ValueError(f"unknown stages {sorted(bad)}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["stages"] = list(self.stages)
        d["distill"]["kinds"] = list(self.distill.kinds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        for key, typ in (("teacher", ModelSpec), ("student", ModelSpec),
                         ("warmup", WarmupConfig), ("align", AlignConfig),
                         ("distill", DistillSpec)):
            if key in d and isinstance(d[key], dict):
                sub = dict(d[key])
                if key == "distill" and "kinds" in sub:
                    sub["kinds"] = tuple(sub["kinds"])
                d[key] = typ(**sub)
        if "seeds" in d:
            d["seeds"] = tuple(d["seeds"])
        if "stages" in d:
            d["stages"] = tuple(d["stages"])
        return cls(**d)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            d = json.load(f)
        env = os.environ.get(SEEDS_ENV)
        if env:
            d["seeds"] = [int(s) for s in env.replace(",", " ").split()]
        return cls.from_dict(d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# stage helpers
# ---------------------------------------------------------------------------


def _pad_batch(encoded_batch, vocab_size):
    """[BOS]+prompt+ref rows -> (input ids, targets, completion mask)."""
    rows = [[BOS_ID] + p + r for p, r in encoded_batch]
    L = max(len(r) for r in rows)
    ids = np.zeros((len(rows), L), dtype=np.int64)
    mask = np.zeros((len(rows), L - 1), dtype=np.float32)
    for i, ((p, r), row) in enumerate(zip(encoded_batch, rows)):
        ids[i, :len(row)] = row
        mask[i, len(p):len(p) + len(r)] = 1.0
    return ids[:, :-1], ids[:, 1:], mask


def ce_loss_fn(model, batch):
    ids, targets, mask = _pad_batch(batch, model.config.vocab_size)
    return losses.ce_loss(logits_batch(model, ids), targets, "mean", mask=mask)


def make_distill_loss_fn(teacher_rows: dict, dconfig: losses.DistillConfig):
    """Combined CE/KD objective; teacher logits come from a per-example cache."""

    def loss_fn(model, batch):
        encoded = [(p, r) for _, p, r in batch]
        ids, targets, mask = _pad_batch(encoded, model.config.vocab_size)
        t_logits = np.zeros(ids.shape + (model.config.vocab_size,), dtype=np.float32)
        for i, (ex_id, p, r) in enumerate(batch):
            rows = teacher_rows[ex_id]
            t_logits[i, :rows.shape[0]] = rows
        student_logits = logits_batch(model, ids)
        ce = losses.ce_loss(student_logits, targets, "mean", mask=mask)
        kd = losses.kd_loss(t_logits, student_logits, dconfig, mask=mask)
        return losses.combined_loss(ce, kd, dconfig.mix)

    return loss_fn


def precompute_teacher_rows(teacher: LanguageModel, encoded, chunk: int = 32) -> dict:
    """Teacher logits over each training row, keyed by example id."""
    out = {}
    items = list(encoded)
    for lo in range(0, len(items), chunk):
        part = items[lo:lo + chunk]
        ids, _, _ = _pad_batch([(p, r) for _, p, r in part], teacher.config.vocab_size)
        rows = logits_batch(teacher, ids).data
        for (ex_id, p, r), row in zip(part, rows):
            out[ex_id] = row[:len(p) + len(r)].astype(np.float32)
    return out


def greedy_outputs(model: LanguageModel, examples, vocab: Vocab, max_new: int
                   ) -> dict[str, str]:
    """Greedy completion per example id, batched over equal-length prompts."""
    buckets: dict[int, list] = {}
    for ex in examples:
        ids = vocab.encode(ex.prompt)
        buckets.setdefault(len(ids), []).append((ex.id, ids))
    outputs = {}
    for length in sorted(buckets):
        group = buckets[length]
        seqs = generate_batch(model, [ids for _, ids in group], max_new=max_new)
        for (ex_id, _), seq in zip(group, seqs):
            outputs[ex_id] = vocab.decode(seq)
    return outputs


def evaluate_model(model: LanguageModel, examples, task: str, vocab: Vocab,
                   max_new: int) -> float:
    """Greedy-decode mean task metric (Rouge-L F or exact-match accuracy)."""
    outs = greedy_outputs(model, examples, vocab, max_new)
    scores = []
    for ex in examples:
        cand = outs[ex.id]
        if task == "instruction_proxy":
            scores.append(metrics.rouge_l(cand, ex.reference).f)
        else:
            scores.append(float(metrics.exact_match(cand, ex.reference)))
    return float(np.mean(scores))


# ---------------------------------------------------------------------------
# the run
# ---------------------------------------------------------------------------


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    task: str
    tool_version: str
    stages: dict = field(default_factory=dict)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.__dict__, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path) -> "RunManifest":
        with open(path) as f:
            d = json.load(f)
        return cls(**d)


def _train_lm(role, spec: ModelSpec, vocab, train_enc, seed, task):
    cfg = spec.lm_config(len(vocab), derive_seed(seed, role, "init"))
    model = init_model(cfg, role=role, vocab=vocab)
    report = fit(model, train_enc, ce_loss_fn,
                 OptConfig(lr=spec.lr, steps=spec.steps, batch_size=spec.batch_size,
                           seed=derive_seed(seed, role, "fit")))
    return model, report


def run_seed(config: ExperimentConfig, seed: int, resume: bool = False) -> RunManifest:
    """Execute the enabled stages for one seed."""
    root = Path(config.outdir)
    rundir = root / f"seed{seed}"
    rundir.mkdir(parents=True, exist_ok=True)
    vocab = corpus_mod.vocab_for_task(config.task)
    manifest = RunManifest(config.config_hash(), seed, config.task, TOOL_VERSION)
    enabled = [s for s in STAGE_ORDER if s in config.stages]

    corpus_dir = root / "corpus"
    splits: dict[str, list[CorpusExample]] = {}

    def load_splits():
        if not splits:
            for name in ("train", "valid", "test"):
                splits[name] = read_split(corpus_dir / f"{name}.jsonl")
        return splits

    def encode_all(examples):
        return [encode_example(ex, vocab) for ex in examples]

    models: dict[str, LanguageModel] = {}

    def get_model(role, path):
        if role not in models:
            models[role] = load_checkpoint(path)
        return models[role]

    stage = "?"
    try:
        for stage in enabled:
            if stage == "corpus":
                paths = {n: str(corpus_dir / f"{n}.jsonl") for n in ("train", "valid", "test")}
                if not (resume and all(Path(p).exists() for p in paths.values())):
                    write_corpus(gen_corpus(config.task, config.corpus_size,
                                            config.corpus_seed), corpus_dir)
                manifest.stages["corpus"] = paths

            elif stage in ("teacher", "student"):
                path = rundir / f"{stage}.ckpt"
                spec = config.teacher if stage == "teacher" else config.student
                if resume and path.exists():
                    models[stage] = load_checkpoint(path)
                else:
                    train_enc = encode_all(load_splits()["train"])
                    model, report = _train_lm(stage, spec, vocab, train_enc, seed, config.task)
                    save_checkpoint(model, path)
                    with open(rundir / f"{stage}_train.json", "w") as f:
                        json.dump({"losses": report.losses[-20:], "steps": report.steps,
                                   "final_loss": report.final_loss}, f)
                    models[stage] = model
                manifest.stages[stage] = {"checkpoint": str(path)}

            elif stage == "warmup":
                pairs_path = rundir / "pairs.jsonl"
                stats_path = rundir / "warmup_stats_student.json"
                if not (resume and pairs_path.exists() and stats_path.exists()):
                    teacher = get_model("teacher", rundir / "teacher.ckpt")
                    student = get_model("student", rundir / "student.ckpt")
                    pairs, stats = build_pairs(teacher, student, load_splits()["train"],
                                               config.warmup, config.task,
                                               seed=derive_seed(seed, "warmup"))
                    write_pairs(pairs, pairs_path)
                    with open(stats_path, "w") as f:
                        json.dump(stats.as_dict(), f, indent=2, sort_keys=True)
                manifest.stages["warmup"] = {"pairs": str(pairs_path),
                                             "stats": str(stats_path)}

            elif stage == "align":
                path = rundir / "student_warmup.ckpt"
                report_path = rundir / "align_report.json"
                if not (resume and path.exists()):
                    student = get_model("student", rundir / "student.ckpt")
                    pairs = read_pairs(rundir / "pairs.jsonl")
                    if pairs:
                        aligned, report = warmup_align(student, pairs, config.align,
                                                       seed=derive_seed(seed, "align"))
                    else:
                        # nothing detected or nothing survived the reward
                        # filter: alignment degenerates to the identity
                        aligned = student.copy(role="student_warmup")
                        report = {"variant": config.align.variant, "beta": config.align.beta,
                                  "steps": 0, "final_loss": float("nan"),
                                  "implicit_accuracy": float("nan"), "losses": []}
                    save_checkpoint(aligned, path)
                    report["losses"] = report["losses"][-20:]
                    with open(report_path, "w") as f:
                        json.dump(report, f, indent=2, sort_keys=True)
                    models["student_warmup"] = aligned
                manifest.stages["align"] = {"checkpoint": str(path),
                                            "report": str(report_path)}

            elif stage == "stats":
                path = rundir / "warmup_stats_student_warmup.json"
                if not (resume and path.exists()):
                    teacher = get_model("teacher", rundir / "teacher.ckpt")
                    warm = get_model("student_warmup", rundir / "student_warmup.ckpt")
                    _, stats = build_pairs(teacher, warm, load_splits()["train"],
                                           config.warmup, config.task,
                                           seed=derive_seed(seed, "stats"))
                    with open(path, "w") as f:
                        json.dump(stats.as_dict(), f, indent=2, sort_keys=True)
                manifest.stages["stats"] = {"stats": str(path)}

            elif stage == "distill":
                teacher = get_model("teacher", rundir / "teacher.ckpt")
                train = load_splits()["train"]
                arms = {}
                warm_path = rundir / "student_warmup.ckpt"
                if warm_path.exists():
                    arms["warmup"] = str(warm_path)
                    if config.distill.compare_vanilla:
                        arms["vanilla"] = str(rundir / "student.ckpt")
                else:
                    arms["vanilla"] = str(rundir / "student.ckpt")

                # SeqKD data: the teacher's own greedy outputs on train prompts
                seqkd_path = rundir / "teacher_data.jsonl"
                need_seqkd = "seqkd_ce" in config.distill.kinds
                if need_seqkd and not (resume and seqkd_path.exists()):
                    outs = greedy_outputs(teacher, train, vocab, config.eval_max_new)
                    corpus_mod.write_split(
                        [CorpusExample(ex.id, ex.prompt, outs[ex.id]) for ex in train],
                        seqkd_path)
                teacher_rows = None
                entry = {}
                for kind in config.distill.kinds:
                    dconfig = config.distill.config_for(kind)
                    for arm, base_path in sorted(arms.items()):
                        out_path = rundir / f"distill_{kind}_{arm}.ckpt"
                        entry[f"{kind}/{arm}"] = str(out_path)
                        if resume and out_path.exists():
                            continue
                        base = load_checkpoint(base_path)
                        base.role = f"distill_{kind}_{arm}"
                        opt = OptConfig(lr=config.distill.lr, steps=config.distill.steps,
                                        batch_size=config.distill.batch_size,
                                        seed=derive_seed(seed, "distill", kind, arm))
                        if kind == "seqkd_ce":
                            data = [(p, r) for p, r in
                                    (encode_example(ex, vocab)
                                     for ex in read_split(seqkd_path)
                                     if ex.reference)]
                            fit(base, data, ce_loss_fn, opt)
                        else:
                            if teacher_rows is None:
                                enc = [(ex.id, *encode_example(ex, vocab)) for ex in train]
                                teacher_rows = precompute_teacher_rows(teacher, enc)
                            data = [(ex.id, *encode_example(ex, vocab)) for ex in train]
                            fit(base, data, make_distill_loss_fn(teacher_rows, dconfig), opt)
                        save_checkpoint(base, out_path)
                manifest.stages["distill"] = entry

            elif stage == "eval":
                path = rundir / "metrics.csv"
                metric_name = ("rouge_l_f" if config.task == "instruction_proxy"
                               else "accuracy")
                candidates = [("teacher", rundir / "teacher.ckpt"),
                              ("student", rundir / "student.ckpt"),
                              ("student_warmup", rundir / "student_warmup.ckpt")]
                for key, p in sorted(manifest.stages.get("distill", {}).items()):
                    candidates.append((f"distill_{key.replace('/', '_')}", Path(p)))
                rows = []
                for role, ckpt in candidates:
                    if not ckpt.exists():
                        continue
                    model = load_checkpoint(ckpt)
                    for split in ("valid", "test"):
                        score = evaluate_model(model, load_splits()[split], config.task,
                                               vocab, config.eval_max_new)
                        rows.append((role, config.task, f"{metric_name}/{split}", score))
                metrics.write_metrics_csv(rows, path)
                manifest.stages["eval"] = {"metrics": str(path)}

            elif stage == "plot":
                teacher = get_model("teacher", rundir / "teacher.ckpt")
                valid = load_splits()["valid"]
                outs = greedy_outputs(teacher, valid, vocab, config.eval_max_new)
                refs = []
                for ex in valid:
                    text = outs[ex.id]
                    if text:
                        refs.append((vocab.encode(ex.prompt), vocab.encode(text) + [EOS_ID]))
                entry = {}
                for role, ckpt in (("teacher", rundir / "teacher.ckpt"),
                                   ("student", rundir / "student.ckpt"),
                                   ("student_warmup", rundir / "student_warmup.ckpt")):
                    if not ckpt.exists():
                        continue
                    hist = metrics.dist_histograms(load_checkpoint(ckpt), refs)
                    csv_path = rundir / f"hist_{role}.csv"
                    metrics.write_histogram_csv(hist, csv_path)
                    entry[role] = str(csv_path)
                svg = rundir / "distributions.svg"
                plot_histograms({r: p for r, p in entry.items()}, svg)
                entry["svg"] = str(svg)
                manifest.stages["plot"] = entry
    except Exception as e:
        raise RuntimeError(f"stage {stage!r} failed for seed {seed}: {e}") from e

    manifest.save(rundir / "manifest.json")
    return manifest


def run(config: ExperimentConfig, resume: bool = False) -> list[RunManifest]:
    return [run_seed(config, seed, resume=resume) for seed in config.seeds]


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def _read_metrics(path) -> dict[tuple[str, str], float]:
    out = {}
    with open(path) as f:
        for row in csv.DictReader(f):
            out[(row["model"], row["metric"])] = float(row["value"])
    return out


def report(manifests: list[RunManifest], out_csv=None) -> dict:
    """Seed-averaged comparison with warmup-minus-vanilla deltas per kind.

    All manifests must share a task and carry distinct seeds. Raises when
    a requested delta has no vanilla arm to compare against.
    """
    if not manifests:
        raise ValueError("no manifests to report on")
    tasks = {m.task for m in manifests}
    if len(tasks) != 1:
        raise ValueError(f"manifests mix tasks {sorted(tasks)}")
    seeds = [m.seed for m in manifests]
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds in manifest set: {seeds}")
    per_seed = []
    for m in manifests:
        if "eval" not in m.stages:
            raise ValueError(f"manifest for seed {m.seed} has no eval stage")
        per_seed.append(_read_metrics(m.stages["eval"]["metrics"]))

    roles = sorted({r for d in per_seed for r, _ in d})
    metric_names = sorted({n for d in per_seed for _, n in d})
    table: dict[str, dict[str, float]] = {}
    for role in roles:
        table[role] = {}
        for name in metric_names:
            vals = [d[(role, name)] for d in per_seed if (role, name) in d]
            if len(vals) == len(per_seed):
                table[role][name] = float(np.mean(vals))

    deltas: dict[str, dict[str, float]] = {}
    for role in roles:
        if role.startswith("distill_") and role.endswith("_warmup"):
            kind = role[len("distill_"):-len("_warmup")]
            vanilla = f"distill_{kind}_vanilla"
            if vanilla not in table:
                raise ValueError(f"missing vanilla arm for kind {kind!r}")
            deltas[kind] = {n: table[role][n] - table[vanilla][n]
                            for n in table[role] if n in table[vanilla]}
    if "student_warmup" in table and "student" in table:
        deltas["student"] = {n: table["student_warmup"][n] - table["student"][n]
                             for n in table["student_warmup"] if n in table["student"]}

    result = {"task": tasks.pop(), "seeds": sorted(seeds), "means": table,
              "deltas": deltas}
    if out_csv:
        with open(out_csv, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["row", "metric", "mean", "delta_vs_vanilla"])
            for role in sorted(table):
                kind = (role[len("distill_"):-len("_warmup")]
                        if role.startswith("distill_") and role.endswith("_warmup") else
                        ("student" if role == "student_warmup" else None))
                for name in sorted(table[role]):
                    d = deltas.get(kind, {}).get(name, "") if kind else ""
                    w.writerow([role, name, f"{table[role][name]:.4f}",
                                f"{d:.4f}" if d != "" else ""])
    return result


def format_report(result: dict) -> str:
    lines = [f"task={result['task']} seeds={result['seeds']}"]
    width = max(len(r) for r in result["means"]) + 2
    for role in sorted(result["means"]):
        for name, v in sorted(result["means"][role].items()):
            lines.append(f"{role:<{width}} {name:<22} {v:8.4f}")
    if result["deltas"]:
        lines.append("-- deltas (warmup arm minus vanilla arm) --")
        for kind in sorted(result["deltas"]):
            for name, v in sorted(result["deltas"][kind].items()):
                lines.append(f"{kind:<{width}} {name:<22} {v:+8.4f}")
    return "\n".join(lines)


def plot_histograms(csv_paths: dict[str, str], out_svg):
    """Render target-prob / non-target-std histograms for several models."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    roles = sorted(csv_paths)
    fig, axes = plt.subplots(len(roles), 2, figsize=(9, 2.6 * max(len(roles), 1)),
                             squeeze=False)
    for i, role in enumerate(roles):
        data = {"target_prob": [], "nontarget_std": []}
        means = {}
        with open(csv_paths[role]) as f:
            for row in csv.DictReader(f):
                if row["metric"] in data:
                    data[row["metric"]].append((float(row["bin_left"]), int(row["count"])))
                elif row["metric"].endswith("_mean"):
                    means[row["metric"]] = float(row["count"])
        for j, key in enumerate(("target_prob", "nontarget_std")):
            xs = [b for b, _ in data[key]]
            ys = [c for _, c in data[key]]
            width = xs[1] - xs[0] if len(xs) > 1 else 0.02
            axes[i][j].bar(xs, ys, width=width, align="edge")
            mean = means.get(f"{key}_mean")
            if mean is not None:
                axes[i][j].axvline(mean, linestyle="--", color="k")
            axes[i][j].set_title(f"{role}: {key}", fontsize=9)
    fig.tight_layout()
    fig.savefig(out_svg, format="svg")
    plt.close(fig)
