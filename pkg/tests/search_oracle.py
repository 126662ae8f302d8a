"""Brute-force decoding oracle.

Enumerates every token sequence a stepwise scorer can produce (eos is
terminal, everything else may continue up to the step cap) and returns the
best one under length-normalized log probability.  Shares no code with the
beam search it cross-checks.
"""

EOS = 2


def best_sequence_bruteforce(scorer, vocab_size, max_steps, alpha=0.7):
    """Returns (token_ids tuple, normalized score) of the global optimum.

    Ties break toward the lexicographically smallest sequence, matching the
    documented beam semantics.
    """
    results = []

    def walk(state, logprobs, ids, cum):
        for token in range(vocab_size):
            lp = cum + float(logprobs[token])
            seq = ids + (token,)
            if token == EOS or len(seq) >= max_steps:
                results.append((lp / len(seq) ** alpha, seq))
            else:
                state2, logprobs2, _ = scorer.advance(state, token)
                walk(state2, logprobs2, seq, lp)

    state, logprobs, _ = scorer.start()
    walk(state, logprobs, (), 0.0)
    best = min(results, key=lambda r: (-r[0], r[1]))
    return best[1], best[0]
