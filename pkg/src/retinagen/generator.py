"""Report generation: conditioning encoder stack plus two decoders.

A ReportGenerator owns every parameter needed to turn (patch features,
keyword ids) into token ids: image encoder, keyword encoder (bag or
contextual), fusion (average or transfuser), and one of

* "recurrent": a single-layer LSTM whose input at each step is the previous
  token embedding concatenated with an attention readout over the fused
  memory, queried by the previous hidden state;
* "masked": a transformer decoder over the emitted prefix with causal
  self-attention and cross-attention into the fused memory.

Decoding is greedy or length-normalized beam search.  Both run through one
incremental scorer interface, and beam search with width 1 follows exactly
the greedy path (argmax with ties to the lowest token id).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat,
    cross_entropy,
    dropout,
    embedding_lookup,
    log_softmax,
    matmul,
    mul,
    no_grad,
    sigmoid,
    softmax,
    tanh,
)
from .data import ImageConfig
from .encoders import (
    KEYWORD_ENCODERS,
    canonical_keyword_ids,
    encode_image,
    encode_keywords_bag,
    encode_keywords_contextual,
    init_bag_encoder,
    init_contextual_encoder,
    init_image_encoder,
    keyword_word_groups,
)
from .errors import ConfigError, ShapeError
from .fusion import FUSION_MODES, FusedContext, fuse, init_fusion
from .layers import (
    causal_mask,
    decoder_layer,
    init_decoder_layer,
    init_linear,
    linear,
    sinusoid_table,
    xavier_uniform,
)
from .text import BOS_ID, EOS_ID, Vocabulary, decode_ids

__all__ = ["GeneratorSpec", "DecodeResult", "ReportGenerator", "DECODER_KINDS", "LENGTH_ALPHA"]

DECODER_KINDS = ("recurrent", "masked")
LENGTH_ALPHA = 0.7
_LSTM_GATES = ("i", "f", "o", "g")


@dataclass(frozen=True)
class GeneratorSpec:
    """Architecture switches; everything else is data-dependent."""

    hidden: int = 64
    n_heads: int = 4
    kw_layers: int = 2
    dec_layers: int = 2
    ffn_dim: int = 128
    keyword_encoder: str = "contextual"
    fusion: str = "transfuser"
    decoder: str = "masked"
    max_len: int = 60
    dropout: float = 0.0
    reinforce_bag: bool = True

    def __post_init__(self):
        if self.keyword_encoder not in KEYWORD_ENCODERS:
            raise ConfigError(f"unknown keyword encoder {self.keyword_encoder!r}")
        if self.fusion not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        if self.decoder not in DECODER_KINDS:
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.max_len < 3:
            raise ConfigError(f"max_len must be >= 3, got {self.max_len}")

    def to_dict(self) -> dict:
        return {
            "hidden": self.hidden,
            "n_heads": self.n_heads,
            "kw_layers": self.kw_layers,
            "dec_layers": self.dec_layers,
            "ffn_dim": self.ffn_dim,
            "keyword_encoder": self.keyword_encoder,
            "fusion": self.fusion,
            "decoder": self.decoder,
            "max_len": self.max_len,
            "dropout": self.dropout,
            "reinforce_bag": self.reinforce_bag,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        return cls(**d)


@dataclass
class DecodeResult:
    """One decoded report with its per-step evidence."""

    token_ids: tuple[int, ...]      # emitted ids; includes the <eos> if reached
    log_probs: tuple[float, ...]
    attention: np.ndarray           # [steps, memory rows], rows sum to 1
    num_image_rows: int
    num_keyword_rows: int
    score: float = 0.0              # length-normalized log probability

    @property
    def body(self) -> tuple[int, ...]:
        if self.token_ids and self.token_ids[-1] == EOS_ID:
            return self.token_ids[:-1]
        return self.token_ids

    def text(self, vocab: Vocabulary) -> str:
        return decode_ids(list(self.token_ids), vocab)


def _normalized(cum_logprob: float, length: int, alpha: float = LENGTH_ALPHA) -> float:
    return cum_logprob / (length ** alpha)


class ReportGenerator:
    """Keyword-conditioned report generator over patch features."""

    def __init__(
        self,
        spec: GeneratorSpec,
        vocab: Vocabulary,
        kw_vocab: Vocabulary,
        kw_word_vocab: Vocabulary,
        image_config: ImageConfig,
        seed: int = 0,
    ):
        self.spec = spec
        self.vocab = vocab
        self.kw_vocab = kw_vocab
        self.kw_word_vocab = kw_word_vocab
        self.image_config = image_config
        self.params: dict[str, Tensor] = {}
        self._positions = sinusoid_table(spec.max_len + 1, spec.hidden)
        self._init_params(np.random.default_rng(seed))

    def _init_params(self, rng) -> None:
        spec, params = self.spec, self.params
        h = spec.hidden
        init_image_encoder(rng, params, "img", self.image_config.region_dim, h)
        init_bag_encoder(rng, params, "kw_bag", len(self.kw_vocab), h)
        if spec.keyword_encoder == "contextual":
            init_contextual_encoder(
                rng, params, "kw_ctx", len(self.kw_word_vocab), h,
                spec.n_heads, spec.kw_layers, spec.ffn_dim,
            )
        init_fusion(rng, params, "fuse", spec.fusion, h, spec.n_heads)
        vocab_size = len(self.vocab)
        params["dec.embed"] = Tensor(xavier_uniform(rng, vocab_size, h), requires_grad=True)
        if spec.decoder == "recurrent":
            init_linear(rng, params, "dec.h0", h, h)
            params["dec.att_q"] = Tensor(xavier_uniform(rng, h, h), requires_grad=True)
            params["dec.att_k"] = Tensor(xavier_uniform(rng, h, h), requires_grad=True)
            for gate in _LSTM_GATES:
                params[f"dec.w_u{gate}"] = Tensor(xavier_uniform(rng, 2 * h, h), requires_grad=True)
                params[f"dec.w_h{gate}"] = Tensor(xavier_uniform(rng, h, h), requires_grad=True)
                bias = np.ones(h) if gate == "f" else np.zeros(h)
                params[f"dec.b_{gate}"] = Tensor(bias, requires_grad=True)
        else:
            for i in range(spec.dec_layers):
                init_decoder_layer(rng, params, f"dec.layer{i}", h, spec.n_heads, spec.ffn_dim)
        init_linear(rng, params, "dec.out", h, vocab_size)

    # -- conditioning ----------------------------------------------------------

    def encode(self, features: np.ndarray, keyword_ids) -> FusedContext:
        """Fuse one image's patch features with one keyword set."""
        if features.shape != (self.image_config.regions, self.image_config.region_dim):
            raise ShapeError(
                f"features shape {features.shape} does not match image config "
                f"({self.image_config.regions}, {self.image_config.region_dim})"
            )
        spec = self.spec
        image_rows = encode_image(self.params, "img", features)
        ids = canonical_keyword_ids(keyword_ids)
        bag_rows = encode_keywords_bag(self.params, "kw_bag", ids)
        if spec.keyword_encoder == "contextual":
            groups = keyword_word_groups(ids, self.kw_vocab, self.kw_word_vocab)
            keyword_rows = encode_keywords_contextual(
                self.params, "kw_ctx", groups, spec.n_heads, spec.kw_layers,
                bag_rows, reinforce_bag=spec.reinforce_bag,
            )
        else:
            keyword_rows = bag_rows
        return fuse(self.params, "fuse", spec.fusion, image_rows, keyword_rows, spec.n_heads)

    # -- teacher forcing --------------------------------------------------------

    def teacher_forcing_loss(self, batch, train: bool = True, rng=None) -> tuple[Tensor, int]:
        """Mean next-token cross entropy over a batch.

        ``batch`` items provide .features, .keywords.ids, .report_ids (a
        Sample works); padding is trimmed so no <pad> step enters the loss.
        Returns (loss, number of scored tokens).
        """
        logit_blocks = []
        targets: list[int] = []
        for sample in batch:
            ids = list(sample.report_ids)
            eos_pos = ids.index(EOS_ID)
            inputs = ids[:eos_pos]
            targets.extend(ids[1 : eos_pos + 1])
            fused = self.encode(sample.features, sample.keywords.ids)
            logits = self._sequence_logits(fused, inputs, train=train, rng=rng)
            logit_blocks.append(logits)
        all_logits = logit_blocks[0] if len(logit_blocks) == 1 else concat(logit_blocks, axis=0)
        return cross_entropy(all_logits, targets), len(targets)

    def _sequence_logits(self, fused, input_ids, train: bool, rng) -> Tensor:
        if self.spec.decoder == "masked":
            logits, _ = self._masked_forward(fused, input_ids, train, rng)
            return logits
        return self._recurrent_forward(fused, input_ids, train, rng)

    # -- masked (transformer) decoder ---------------------------------------------

    def _masked_forward(self, fused, input_ids, train: bool = False, rng=None):
        """Logits [T, vocab] plus final-layer cross-attention weights."""
        spec = self.spec
        n = len(input_ids)
        if n > spec.max_len:
            raise ShapeError(f"sequence length {n} exceeds max_len {spec.max_len}")
        x = add(
            embedding_lookup(self.params["dec.embed"], list(input_ids)),
            Tensor(self._positions[:n]),
        )
        mask = causal_mask(n)
        cross_weights = None
        for i in range(spec.dec_layers):
            x, _, cross_weights = decoder_layer(
                self.params, f"dec.layer{i}", x, fused.fused_memory, spec.n_heads,
                mask, dropout_rate=spec.dropout, train=train, rng=rng,
            )
        return linear(self.params, "dec.out", x), cross_weights

    # -- recurrent (attention LSTM) decoder -----------------------------------------

    def _recurrent_init(self, fused):
        h = tanh(linear(self.params, "dec.h0", fused.fused_global))
        cell = Tensor(np.zeros((1, self.spec.hidden)))
        mem_keys = matmul(fused.fused_memory, self.params["dec.att_k"])
        return h, cell, mem_keys

    def _recurrent_step(self, fused, mem_keys, h, cell, token_id: int,
                        train: bool = False, rng=None):
        params = self.params
        x = embedding_lookup(params["dec.embed"], [int(token_id)])
        query = matmul(h, params["dec.att_q"])
        scores = matmul(query, mem_keys.T) * (1.0 / math.sqrt(self.spec.hidden))
        alpha = softmax(scores, axis=-1)
        context = matmul(alpha, fused.fused_memory)
        u = concat([x, context], axis=1)
        if self.spec.dropout > 0.0 and train:
            u = dropout(u, self.spec.dropout, train=True, rng=rng)
        gates = {}
        for gate in _LSTM_GATES:
            pre = add(
                add(matmul(u, params[f"dec.w_u{gate}"]), matmul(h, params[f"dec.w_h{gate}"])),
                params[f"dec.b_{gate}"],
            )
            gates[gate] = tanh(pre) if gate == "g" else sigmoid(pre)
        cell = add(mul(gates["f"], cell), mul(gates["i"], gates["g"]))
        h = mul(gates["o"], tanh(cell))
        return h, cell, alpha

    def _recurrent_forward(self, fused, input_ids, train: bool, rng) -> Tensor:
        h, cell, mem_keys = self._recurrent_init(fused)
        states = []
        for token_id in input_ids:
            h, cell, _ = self._recurrent_step(fused, mem_keys, h, cell, token_id, train, rng)
            states.append(h)
        stacked = states[0] if len(states) == 1 else concat(states, axis=0)
        return linear(self.params, "dec.out", stacked)

    # -- incremental scoring ------------------------------------------------------

    def make_scorer(self, features: np.ndarray, keyword_ids):
        """Stepwise next-token scorer shared by greedy, beam, and oracles.

        start() consumes <bos> and returns (state, logprobs, attention_row);
        advance(state, token) consumes one more emitted token.  Attention rows
        are mean-over-heads for the masked decoder and the single attention
        readout for the recurrent one; either way they sum to 1.
        """
        fused = self.encode(features, keyword_ids)
        if self.spec.decoder == "recurrent":
            return _RecurrentScorer(self, fused)
        return _MaskedScorer(self, fused)

    # -- decoding -----------------------------------------------------------------

    def greedy_decode(self, features: np.ndarray, keyword_ids) -> DecodeResult:
        spec = self.spec
        with no_grad():
            scorer = self.make_scorer(features, keyword_ids)
            state, logprobs, att = scorer.start()
            ids: list[int] = []
            lps: list[float] = []
            rows: list[np.ndarray] = []
            for _ in range(spec.max_len - 1):
                token = int(np.argmax(logprobs))
                ids.append(token)
                lps.append(float(logprobs[token]))
                rows.append(att)
                if token == EOS_ID:
                    break
                state, logprobs, att = scorer.advance(state, token)
        cum = float(sum(lps))
        return DecodeResult(
            token_ids=tuple(ids),
            log_probs=tuple(lps),
            attention=np.array(rows),
            num_image_rows=scorer.fused.num_image_rows,
            num_keyword_rows=scorer.fused.num_keyword_rows,
            score=_normalized(cum, len(ids)),
        )

    def beam_decode(
        self, features: np.ndarray, keyword_ids, beam_width: int, alpha: float = LENGTH_ALPHA
    ) -> DecodeResult:
        """Length-normalized beam search.

        Every live hypothesis is expanded over the full vocabulary; the best
        ``beam_width`` continuations (by summed log probability, ties to the
        lexicographically smallest token sequence) survive.  Finishing with
        <eos> moves a hypothesis into the candidate pool; at the step cap the
        surviving unfinished hypotheses join it.  The winner maximizes
        cum_logprob / length**alpha, ties again to the smallest sequence.
        """
        if beam_width < 1:
            raise ConfigError(f"beam width must be >= 1, got {beam_width}")
        spec = self.spec
        max_steps = spec.max_len - 1
        with no_grad():
            scorer = self.make_scorer(features, keyword_ids)
            state, logprobs, att = scorer.start()
            live = [_Hypothesis(0.0, (), state, (), (), logprobs, att)]
            pool: list[_Hypothesis] = []
            for _ in range(max_steps):
                if not live:
                    break
                candidates = []
                for hyp in live:
                    for token in range(len(self.vocab)):
                        candidates.append((hyp.cum_lp + float(hyp.next_logprobs[token]), hyp, token))
                candidates.sort(key=lambda c: (-c[0], c[1].ids + (c[2],)))
                next_live = []
                for cum_lp, hyp, token in candidates[:beam_width]:
                    extended = _Hypothesis(
                        cum_lp,
                        hyp.ids + (token,),
                        hyp.state,
                        hyp.lps + (float(hyp.next_logprobs[token]),),
                        hyp.rows + (hyp.next_att,),
                        None,
                        None,
                    )
                    if token == EOS_ID or len(extended.ids) >= max_steps:
                        pool.append(extended)
                    else:
                        new_state, new_logprobs, new_att = scorer.advance(hyp.state, token)
                        extended.state = new_state
                        extended.next_logprobs = new_logprobs
                        extended.next_att = new_att
                        next_live.append(extended)
                live = next_live
            pool.extend(live)
        best = min(pool, key=lambda h: (-_normalized(h.cum_lp, len(h.ids), alpha), h.ids))
        return DecodeResult(
            token_ids=best.ids,
            log_probs=best.lps,
            attention=np.array(best.rows),
            num_image_rows=scorer.fused.num_image_rows,
            num_keyword_rows=scorer.fused.num_keyword_rows,
            score=_normalized(best.cum_lp, len(best.ids), alpha),
        )


@dataclass
class _Hypothesis:
    cum_lp: float
    ids: tuple[int, ...]
    state: object
    lps: tuple[float, ...]
    rows: tuple
    next_logprobs: np.ndarray | None
    next_att: np.ndarray | None


class _RecurrentScorer:
    def __init__(self, model: ReportGenerator, fused):
        self.model = model
        self.fused = fused
        self._h0, self._cell0, self._mem_keys = model._recurrent_init(fused)

    def _emit(self, h):
        logits = linear(self.model.params, "dec.out", h)
        return log_softmax(logits, axis=-1).data[0]

    def start(self):
        return self.advance((self._h0, self._cell0), BOS_ID)

    def advance(self, state, token: int):
        h, cell = state
        h, cell, alpha = self.model._recurrent_step(
            self.fused, self._mem_keys, h, cell, token
        )
        return (h, cell), self._emit(h), alpha.data[0].copy()


class _MaskedScorer:
    def __init__(self, model: ReportGenerator, fused):
        self.model = model
        self.fused = fused

    def _score_prefix(self, prefix: tuple[int, ...]):
        logits, cross_weights = self.model._masked_forward(self.fused, list(prefix))
        logprobs = log_softmax(logits, axis=-1).data[-1]
        att = np.mean([w.data[-1] for w in cross_weights], axis=0)
        return logprobs, att

    def start(self):
        prefix = (BOS_ID,)
        logprobs, att = self._score_prefix(prefix)
        return prefix, logprobs, att

    def advance(self, state, token: int):
        prefix = tuple(state) + (int(token),)
        logprobs, att = self._score_prefix(prefix)
        return prefix, logprobs, att
