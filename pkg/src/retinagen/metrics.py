"""Caption evaluation suite: BLEU-1..4, B-avg, ROUGE-L, CIDEr-D, METEOR-lite.

Conventions (fixed here because the source experiments never state theirs):

* BLEU is corpus level, with clipped modified n-gram precision, closest
  reference length for the brevity penalty, and "epsilon" smoothing that
  substitutes 1e-9 for a zero precision (mode "none" returns 0 instead).
* ROUGE is ROUGE-L with the weighted F-measure, beta = 1.2, max over
  references, mean over pairs.
* CIDEr-D uses TF-IDF n-gram vectors for n = 1..4 with
  idf = max(0, ln(N / (1 + df))) over the reference corpus, a numerator that
  clips candidate counts against each reference, *unclipped* vector norms in
  the denominator, and a Gaussian length penalty with sigma = 6; the pair
  score is 10 times the mean over n and references.
* METEOR-lite is METEOR without synonym or paraphrase tables: exact-match
  then Porter-stem unigram alignment, F_mean = 10PR/(R+9P), chunk penalty
  0.5*(chunks/m)^3.  This diverges from official METEOR and is labelled
  "METEOR-lite" in every report header.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

from .errors import DataError
from .stemmer import stem
from .text import tokenize

__all__ = [
    "EvalPair",
    "MetricReport",
    "bleu_corpus",
    "bleu_avg",
    "rouge_l",
    "cider_d",
    "meteor_lite",
    "compute_metric_report",
    "evaluate_run",
    "read_prediction_file",
    "write_prediction_file",
    "format_table_row",
]

BLEU_EPSILON = 1e-9
ROUGE_BETA = 1.2
CIDER_SIGMA = 6.0
CIDER_N = 4
METEOR_GAMMA = 0.5
METEOR_BETA_EXP = 3


@dataclass(frozen=True)
class EvalPair:
    """One candidate token list against one or more reference token lists."""

    candidate: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.references or all(len(r) == 0 for r in self.references):
            raise DataError("EvalPair needs at least one non-empty reference")


def make_pair(candidate, references) -> EvalPair:
    return EvalPair(tuple(candidate), tuple(tuple(r) for r in references))


def _ngrams(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU ---------------------------------------------------------------------


def bleu_corpus(pairs, n_max: int = 4, smoothing: str = "epsilon") -> list[float]:
    """Corpus BLEU-1..BLEU-n_max.

    Modified precision clips each candidate n-gram count at the maximum count
    observed in any single reference; the brevity penalty uses the reference
    whose length is closest to the candidate (shorter wins ties).
    """
    pairs = list(pairs)
    if not pairs:
        raise DataError("bleu_corpus given an empty candidate set")
    if n_max < 1:
        raise DataError(f"n_max must be >= 1, got {n_max}")
    if smoothing not in ("epsilon", "none"):
        raise DataError(f"unknown BLEU smoothing mode: {smoothing!r}")

    matched = [0] * n_max
    total = [0] * n_max
    cand_len = 0
    closest_ref_len = 0
    for pair in pairs:
        cand = pair.candidate
        cand_len += len(cand)
        closest_ref_len += min(
            (abs(len(r) - len(cand)), len(r)) for r in pair.references
        )[1]
        for n in range(1, n_max + 1):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            max_ref = Counter()
            for ref in pair.references:
                for gram, c in _ngrams(ref, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            total[n - 1] += sum(counts.values())
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())

    if cand_len == 0:
        return [0.0] * n_max
    bp = 1.0 if cand_len >= closest_ref_len else math.exp(1.0 - closest_ref_len / cand_len)

    scores = []
    log_precisions = []
    degenerate = False
    for n in range(n_max):
        if total[n] == 0:
            p = 0.0
        else:
            p = matched[n] / total[n]
        if p == 0.0:
            if smoothing == "epsilon":
                p = BLEU_EPSILON
            else:
                degenerate = True
        log_precisions.append(math.log(p) if p > 0.0 else float("-inf"))
        if degenerate:
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(log_precisions[: n + 1]) / (n + 1)))
    return scores


def bleu_avg(scores) -> float:
    """Arithmetic mean of the four BLEU scores (the headline B-avg column)."""
    scores = list(scores)
    if len(scores) != 4:
        raise DataError(f"bleu_avg expects exactly 4 scores, got {len(scores)}")
    return sum(scores) / 4.0


# -- ROUGE-L ------------------------------------------------------------------


def _lcs_length(a, b) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0]
        for j, y in enumerate(b, start=1):
            if x == y:
                curr.append(prev[j - 1] + 1)
            else:
                curr.append(max(prev[j], curr[-1]))
        prev = curr
    return prev[-1]


def _rouge_l_pair(cand, ref, beta: float) -> float:
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p = lcs / len(cand)
    r = lcs / len(ref)
    return ((1.0 + beta * beta) * p * r) / (r + beta * beta * p)


def rouge_l(pairs, beta: float = ROUGE_BETA) -> float:
    """Mean over pairs of the max-over-references LCS F-measure."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("rouge_l given an empty candidate set")
    total = 0.0
    for pair in pairs:
        total += max(_rouge_l_pair(pair.candidate, ref, beta) for ref in pair.references)
    return total / len(pairs)


# -- CIDEr-D ------------------------------------------------------------------


def cider_d(pairs, sigma: float = CIDER_SIGMA) -> float:
    """Consensus TF-IDF n-gram similarity, scaled by 10.

    Document frequency df(g) counts the pairs whose reference set contains
    n-gram g; idf(g) = max(0, ln(N / (1 + df(g)))).  For each reference the
    per-n similarity is

        sum_g min(c_cand(g), c_ref(g)) * idf(g)^2 * c_ref(g)
        --------------------------------------------------- * length penalty
                     ||cand_vec|| * ||ref_vec||

    with unclipped norms and penalty exp(-(l_c - l_r)^2 / (2 sigma^2)).
    """
    pairs = list(pairs)
    if len(pairs) < 2:
        raise DataError("cider_d needs a corpus of >= 2 pairs for IDF")
    n_images = len(pairs)

    df = [Counter() for _ in range(CIDER_N)]
    for pair in pairs:
        for n in range(1, CIDER_N + 1):
            seen = set()
            for ref in pair.references:
                seen.update(_ngrams(ref, n).keys())
            for gram in seen:
                df[n - 1][gram] += 1

    def idf(n: int, gram) -> float:
        return max(0.0, math.log(n_images / (1.0 + df[n - 1][gram])))

    corpus_total = 0.0
    for pair in pairs:
        cand = pair.candidate
        cand_counts = [_ngrams(cand, n) for n in range(1, CIDER_N + 1)]
        cand_norm = [
            math.sqrt(sum((c * idf(n + 1, g)) ** 2 for g, c in cand_counts[n].items()))
            for n in range(CIDER_N)
        ]
        ref_total = 0.0
        for ref in pair.references:
            penalty = math.exp(-((len(cand) - len(ref)) ** 2) / (2.0 * sigma * sigma))
            sim_sum = 0.0
            for n in range(CIDER_N):
                ref_counts = _ngrams(ref, n + 1)
                ref_norm = math.sqrt(
                    sum((c * idf(n + 1, g)) ** 2 for g, c in ref_counts.items())
                )
                if cand_norm[n] == 0.0 or ref_norm == 0.0:
                    continue
                num = sum(
                    min(c, ref_counts[g]) * ref_counts[g] * idf(n + 1, g) ** 2
                    for g, c in cand_counts[n].items()
                    if g in ref_counts
                )
                sim_sum += penalty * num / (cand_norm[n] * ref_norm)
            ref_total += sim_sum / CIDER_N
        corpus_total += 10.0 * ref_total / len(pair.references)
    return corpus_total / n_images


# -- METEOR-lite ----------------------------------------------------------------


def _align_stage(cand_keys, ref_keys, cand_free, ref_free, prev_ref_of):
    """Greedy unigram alignment for one match stage.

    Matches every candidate position whose key appears unmatched in the
    reference (maximal for a single-key stage); ties between reference slots
    prefer the position right after the previous match so chunks stay few.
    """
    ref_slots: dict[str, list[int]] = {}
    for j in sorted(ref_free):
        ref_slots.setdefault(ref_keys[j], []).append(j)
    for i in sorted(cand_free):
        slots = ref_slots.get(cand_keys[i])
        if not slots:
            continue
        want = prev_ref_of.get(i - 1)
        pick = None
        if want is not None and (want + 1) in slots:
            pick = want + 1
        else:
            pick = slots[0]
        slots.remove(pick)
        ref_free.discard(pick)
        cand_free.discard(i)
        prev_ref_of[i] = pick


def _meteor_pair(cand, ref) -> float:
    if not cand or not ref:
        return 0.0
    cand_free = set(range(len(cand)))
    ref_free = set(range(len(ref)))
    alignment: dict[int, int] = {}
    _align_stage(list(cand), list(ref), cand_free, ref_free, alignment)
    cand_stems = [stem(w) for w in cand]
    ref_stems = [stem(w) for w in ref]
    _align_stage(cand_stems, ref_stems, cand_free, ref_free, alignment)

    m = len(alignment)
    if m == 0:
        return 0.0
    p = m / len(cand)
    r = m / len(ref)
    f_mean = 10.0 * p * r / (r + 9.0 * p)

    matched = sorted(alignment.items())
    chunks = 1
    for (ci, ri), (cj, rj) in zip(matched, matched[1:]):
        if cj != ci + 1 or rj != ri + 1:
            chunks += 1
    penalty = METEOR_GAMMA * (chunks / m) ** METEOR_BETA_EXP
    return f_mean * (1.0 - penalty)


def meteor_lite(pairs) -> float:
    """Mean over pairs of the max-over-references METEOR-lite score."""
    pairs = list(pairs)
    if not pairs:
        raise DataError("meteor_lite given an empty candidate set")
    total = 0.0
    for pair in pairs:
        total += max(_meteor_pair(pair.candidate, ref) for ref in pair.references)
    return total / len(pairs)


# -- report assembly -------------------------------------------------------------


@dataclass
class MetricReport:
    """Named scores for one evaluation run, Table-style column order."""

    bleu: list[float]
    bleu_avg: float
    rouge_l: float
    cider_d: float
    meteor: float
    per_sample: list[dict] = field(default_factory=list)

    def scores(self) -> dict[str, float]:
        return {
            "bleu_1": self.bleu[0],
            "bleu_2": self.bleu[1],
            "bleu_3": self.bleu[2],
            "bleu_4": self.bleu[3],
            "bleu_avg": self.bleu_avg,
            "rouge_l": self.rouge_l,
            "cider_d": self.cider_d,
            "meteor_lite": self.meteor,
        }


def compute_metric_report(pairs, sample_ids=None) -> MetricReport:
    """Score a corpus of EvalPairs with the full suite."""
    pairs = list(pairs)
    bleu = bleu_corpus(pairs)
    per_sample = []
    if sample_ids is not None:
        for sid, pair in zip(sample_ids, pairs):
            single = [pair]
            sample_bleu = bleu_corpus(single)
            per_sample.append(
                {
                    "sample_id": sid,
                    "bleu_1": sample_bleu[0],
                    "bleu_4": sample_bleu[3],
                    "rouge_l": rouge_l(single),
                    "meteor_lite": meteor_lite(single),
                }
            )
    return MetricReport(
        bleu=bleu,
        bleu_avg=bleu_avg(bleu),
        rouge_l=rouge_l(pairs),
        cider_d=cider_d(pairs) if len(pairs) >= 2 else 0.0,
        meteor=meteor_lite(pairs),
        per_sample=per_sample,
    )


# -- prediction / reference files -------------------------------------------------
#
# One record per line: sample_id TAB text.  Tab, newline, and backslash in the
# text are escaped as \t, \n, \\.  Repeated sample_ids in a references file
# supply multiple references for that sample.


def _escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(text: str) -> str:
    out = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text):
            nxt = text[i + 1]
            out.append({"t": "\t", "n": "\n", "\\": "\\"}.get(nxt, nxt))
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


def write_prediction_file(path, records: dict[str, str] | list[tuple[str, str]]) -> None:
    items = records.items() if isinstance(records, dict) else records
    with open(path, "w", encoding="utf-8") as fh:
        for sid, text in items:
            fh.write(f"{sid}\t{_escape(text)}\n")


def read_prediction_file(path) -> list[tuple[str, str]]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected 'sample_id<TAB>text'")
            sid, text = line.split("\t", 1)
            out.append((sid, _unescape(text)))
    return out


def evaluate_run(predictions_file, references_file) -> MetricReport:
    """Score a predictions file against a references file by sample_id."""
    preds = read_prediction_file(predictions_file)
    refs = read_prediction_file(references_file)
    pred_map: dict[str, str] = {}
    for sid, text in preds:
        if sid in pred_map:
            raise DataError(f"duplicate prediction for sample_id {sid!r}")
        pred_map[sid] = text
    ref_map: dict[str, list[str]] = {}
    for sid, text in refs:
        ref_map.setdefault(sid, []).append(text)
    missing = sorted(set(ref_map) - set(pred_map))
    extra = sorted(set(pred_map) - set(ref_map))
    if missing or extra:
        raise DataError(
            "sample_id mismatch between predictions and references; "
            f"missing predictions: {missing}; extra predictions: {extra}"
        )
    sample_ids = sorted(pred_map)
    pairs = [
        make_pair(tokenize(pred_map[sid]), [tokenize(t) for t in ref_map[sid]])
        for sid in sample_ids
    ]
    return compute_metric_report(pairs, sample_ids=sample_ids)


# -- text rendering ---------------------------------------------------------------

_COLUMNS = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "B-avg", "ROUGE-L", "CIDEr-D", "METEOR-lite")


def format_table_row(report: MetricReport, label: str = "run") -> str:
    """Two-line table: metric names over their values."""
    header = f"{'Model':<16}" + "".join(f"{c:>12}" for c in _COLUMNS)
    values = (
        report.bleu[0], report.bleu[1], report.bleu[2], report.bleu[3],
        report.bleu_avg, report.rouge_l, report.cider_d, report.meteor,
    )
    row = f"{label:<16}" + "".join(f"{v:>12.4f}" for v in values)
    return header + "\n" + row


def write_metric_report(path, report: MetricReport, label: str = "run") -> None:
    """Human table plus a machine-readable key=value block."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# retinagen metric report\n")
        fh.write("report_version = 1\n\n")
        fh.write(format_table_row(report, label) + "\n\n")
        fh.write("[scores]\n")
        for key, val in report.scores().items():
            fh.write(f"{key} = {val!r}\n")
        if report.per_sample:
            fh.write("\n[per_sample]\n")
            for entry in report.per_sample:
                parts = [f"sample_id={entry['sample_id']}"] + [
                    f"{k}={entry[k]!r}" for k in sorted(entry) if k != "sample_id"
                ]
                fh.write(" ".join(parts) + "\n")


def read_metric_report(path) -> MetricReport:
    """Parse the key=value block back into a MetricReport (per-sample included)."""
    scores: dict[str, float] = {}
    per_sample: list[dict] = []
    section = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("["):
                section = line.strip("[]")
                continue
            if section == "scores" and "=" in line:
                key, _, val = line.partition("=")
                scores[key.strip()] = float(val.strip())
            elif section == "per_sample":
                entry: dict = {}
                for part in line.split():
                    key, _, val = part.partition("=")
                    entry[key] = val if key == "sample_id" else float(val)
                per_sample.append(entry)
    required = {"bleu_1", "bleu_2", "bleu_3", "bleu_4", "bleu_avg", "rouge_l", "cider_d", "meteor_lite"}
    if not required <= set(scores):
        raise DataError(f"{path}: metric report missing keys {sorted(required - set(scores))}")
    return MetricReport(
        bleu=[scores["bleu_1"], scores["bleu_2"], scores["bleu_3"], scores["bleu_4"]],
        bleu_avg=scores["bleu_avg"],
        rouge_l=scores["rouge_l"],
        cider_d=scores["cider_d"],
        meteor=scores["meteor_lite"],
        per_sample=per_sample,
    )
