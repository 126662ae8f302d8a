"""Independent brute-force CIDEr-D evaluator for cross-checking.

Direct transcription of the documented formula with plain dicts and loops.
Shares no code with retinagen.metrics (no imports from it); kept deliberately
naive so a disagreement points at the production implementation.
"""

import math


def ngram_list(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def count_map(grams):
    out = {}
    for g in grams:
        out[g] = out.get(g, 0) + 1
    return out


def cider_d_bruteforce(candidates, references_per_candidate, sigma=6.0, n_max=4):
    """candidates: list of token lists; references_per_candidate: list of
    lists of token lists.  Returns the corpus score."""
    num_images = len(candidates)
    assert num_images >= 2

    # document frequency: number of images whose reference set contains g
    df = {}
    for refs in references_per_candidate:
        seen = set()
        for ref in refs:
            for n in range(1, n_max + 1):
                for g in ngram_list(ref, n):
                    seen.add(g)
        for g in seen:
            df[g] = df.get(g, 0) + 1

    def idf(g):
        return max(0.0, math.log(num_images / (1.0 + df.get(g, 0))))

    corpus = 0.0
    for cand, refs in zip(candidates, references_per_candidate):
        per_ref_total = 0.0
        for ref in refs:
            delta = len(cand) - len(ref)
            penalty = math.exp(-(delta * delta) / (2.0 * sigma * sigma))
            sim_over_n = 0.0
            for n in range(1, n_max + 1):
                c_counts = count_map(ngram_list(cand, n))
                r_counts = count_map(ngram_list(ref, n))
                cand_norm_sq = 0.0
                for g, c in c_counts.items():
                    cand_norm_sq += (c * idf(g)) ** 2
                ref_norm_sq = 0.0
                for g, c in r_counts.items():
                    ref_norm_sq += (c * idf(g)) ** 2
                if cand_norm_sq == 0.0 or ref_norm_sq == 0.0:
                    continue
                numerator = 0.0
                for g, c in c_counts.items():
                    if g in r_counts:
                        clipped = c if c < r_counts[g] else r_counts[g]
                        numerator += clipped * r_counts[g] * idf(g) * idf(g)
                sim_over_n += penalty * numerator / (
                    math.sqrt(cand_norm_sq) * math.sqrt(ref_norm_sq)
                )
            per_ref_total += sim_over_n / n_max
        corpus += 10.0 * per_ref_total / len(refs)
    return corpus / num_images
