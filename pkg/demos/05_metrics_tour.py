"""
Scoring generated reports
=========================

Runs the full caption metric suite over a toy corpus and shows how each
metric reacts to a paraphrase, a truncation, and a word-salad candidate.
"""

from retinagen.metrics import compute_metric_report, make_pair
from retinagen.text import tokenize

references = [
    "mild macular edema is present in the left eye .",
    "scattered drusen are noted across the posterior pole .",
    "no diabetic retinopathy is seen .",
]

candidates = {
    "verbatim": [
        "mild macular edema is present in the left eye .",
        "scattered drusen are noted across the posterior pole .",
        "no diabetic retinopathy is seen .",
    ],
    "paraphrase": [
        "the left eye shows mild macular edema .",
        "drusen are scattered across the posterior pole .",
        "there is no diabetic retinopathy .",
    ],
    "truncated": [
        "mild macular edema",
        "scattered drusen",
        "no diabetic",
    ],
    "word salad": [
        "pole eye the drusen macular no .",
        "seen are is in noted left .",
        "edema retinopathy scattered mild .",
    ],
}

header = f"{'system':12s} {'B-1':>6s} {'B-2':>6s} {'B-3':>6s} {'B-4':>6s} " \
         f"{'B-avg':>6s} {'ROUGE':>6s} {'CIDEr':>6s} {'METEOR':>6s}"
print(header)
print("-" * len(header))

for name, hyps in candidates.items():
    pairs = [make_pair(tokenize(h), [tokenize(r)])
             for h, r in zip(hyps, references)]
    report = compute_metric_report(pairs)
    s = report.scores()
    print(f"{name:12s} {s['bleu_1']:6.3f} {s['bleu_2']:6.3f} {s['bleu_3']:6.3f} "
          f"{s['bleu_4']:6.3f} {s['bleu_avg']:6.3f} {s['rouge_l']:6.3f} "
          f"{s['cider_d']:6.3f} {s['meteor_lite']:6.3f}")

print()
print("verbatim maxes everything; the paraphrase keeps ROUGE-L and METEOR")
print("respectable while 4-gram BLEU collapses; word salad only scores where")
print("unigram overlap alone can carry a metric.")
