"""Byte-level causal language model used as the frozen text backbone.

The model is intentionally small. It can be stub-pretrained on a tiny
text corpus so that instruction tuning only has to steer it, after which
every one of its parameter paths is frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor

PAD, BOS, EOS, SEP = 256, 257, 258, 259
VOCAB_SIZE = 260


class LengthError(ValueError):
    """Sequence does not fit the model's context window."""


class ByteTokenizer:
    """Raw bytes as tokens plus four special ids; round-trips any byte string."""

    vocab_size = VOCAB_SIZE

    def tokenize(self, text) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(data)

    def detokenize_bytes(self, ids) -> bytes:
        return bytes(i for i in ids if 0 <= i < 256)

    def detokenize(self, ids) -> str:
        return self.detokenize_bytes(ids).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class LMConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq: int = 256
    vocab_size: int = VOCAB_SIZE

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise nn.ContractError("d_model must be divisible by n_heads")

    def to_dict(self):
        return {"d_model": self.d_model, "n_layers": self.n_layers,
                "n_heads": self.n_heads, "max_seq": self.max_seq,
                "vocab_size": self.vocab_size}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


# desk-scale stand-ins for the published model-size ladder
LM_PRESETS = {
    "tiny": LMConfig(d_model=64, n_layers=2, n_heads=4),
    "small": LMConfig(d_model=128, n_layers=4, n_heads=4),
    "medium": LMConfig(d_model=256, n_layers=6, n_heads=8),
}


class CausalLM:
    """Decoder-only transformer over bytes with learned absolute positions.

    Output projection is tied to the token embedding. All parameters live
    in the shared ParamSet under the ``lm.`` prefix.
    """

    def __init__(self, config: LMConfig, params: nn.ParamSet):
        self.config = config
        self.params = params

    @classmethod
    def build(cls, config: LMConfig, params: nn.ParamSet, seed: int) -> "CausalLM":
        rng = np.random.default_rng(seed)
        d = config.d_model
        params.add("lm.tok_emb", nn.normal_param(rng, (config.vocab_size, d)))
        params.add("lm.pos_emb", nn.normal_param(rng, (config.max_seq, d)))
        for i in range(config.n_layers):
            nn.init_transformer_block(params, f"lm.block{i}", d, rng)
        params.add("lm.lnf.gain", Tensor(np.ones(d, dtype=np.float32), requires_grad=True))
        params.add("lm.lnf.bias", nn.zeros_param(d))
        return cls(config, params)

    def lm_paths(self) -> list[str]:
        return [p for p in self.params.paths() if p.startswith("lm.")]

    def forward(self, prefix_embeddings, token_ids, per_layer_additions=None):
        """Run causal attention over [prefix tokens; text tokens].

        Prefix rows take positional ids 0..p-1 and text continues at p.
        Returns (post-final-norm hidden states [(p+t) x d], logits for the
        text rows or None when there is no text).

        ``per_layer_additions`` maps layer index -> [p x d] tensor added to
        the prefix rows at that layer's input.
        """
        cfg = self.config
        token_ids = [int(i) for i in token_ids]
        p = 0 if prefix_embeddings is None else prefix_embeddings.shape[0]
        t = len(token_ids)
        total = p + t
        if total == 0:
            raise LengthError("empty sequence")
        if total > cfg.max_seq:
            raise LengthError(f"sequence of {total} exceeds context {cfg.max_seq}")
        tok_emb = self.params["lm.tok_emb"]
        parts = []
        if p:
            parts.append(prefix_embeddings)
        if t:
            parts.append(ad.gather_rows(tok_emb, token_ids))
        x = parts[0] if len(parts) == 1 else ad.concat_tokens(parts)
        pos = ad.gather_rows(self.params["lm.pos_emb"], range(total))
        x = ad.add(x, pos)
        for i in range(cfg.n_layers):
            if per_layer_additions and i in per_layer_additions and p:
                addition = per_layer_additions[i]
                padded = ad.concat_tokens([addition, ad.zeros((t, cfg.d_model))]) if t else addition
                x = ad.add(x, padded)
            x = nn.transformer_block_apply(self.params, f"lm.block{i}", x, cfg.n_heads)
        hidden = ad.layer_norm(x, self.params["lm.lnf.gain"], self.params["lm.lnf.bias"])
        logits = None
        if t:
            text_h = ad.slice_rows(hidden, p, total) if p else hidden
            logits = ad.matmul(text_h, ad.transpose(tok_emb))
        return hidden, logits


def lm_next_token_loss(lm: CausalLM, token_ids, prefix_embeddings=None) -> Tensor:
    """Shift-by-one cross entropy of next-token prediction over the text
    positions (an optional prefix is context only)."""
    ids = [int(i) for i in token_ids]
    if len(ids) < 2:
        raise nn.ContractError("need at least 2 tokens for next-token loss")
    _, logits = lm.forward(prefix_embeddings, ids)
    pred = ad.slice_rows(logits, 0, len(ids) - 1)
    return nn.cross_entropy(pred, ids[1:])


def generate_greedy(lm: CausalLM, prefix_embeddings, prompt_ids, max_new: int,
                    stop_id: int = EOS) -> list[int]:
    """Deterministic argmax decoding; ties resolve to the lowest token id."""
    ids = [int(i) for i in prompt_ids]
    p = 0 if prefix_embeddings is None else prefix_embeddings.shape[0]
    if p + len(ids) + max_new > lm.config.max_seq:
        raise LengthError("generation budget exceeds context window")
    out = []
    with ad.no_grad():
        for _ in range(max_new):
            _, logits = lm.forward(prefix_embeddings, ids + out)
            nxt = int(np.argmax(logits.data[-1]))
            if nxt == stop_id:
                break
            out.append(nxt)
    return out


def default_stub_corpus() -> str:
    """Tiny deterministic corpus for stub pretraining (built lazily from
    the task registry's instruction templates)."""
    from .data import build_template_corpus
    return build_template_corpus()


def stub_pretrain(lm: CausalLM, corpus: str, steps: int = 600, lr: float = 1e-3,
                  seed: int = 0, text_offset: int = 0) -> list[float]:
    """Train the LM on corpus lines, one [BOS] line [EOS] sequence per step
    (so generation learns where answers end); returns the loss trace.

    ``text_offset`` pretrains with a zero prefix of that length, putting
    the text at the same positions it will occupy under a sensor prefix.
    """
    tok = ByteTokenizer()
    budget = lm.config.max_seq - 2 - text_offset
    lines = [ln for ln in corpus.splitlines() if ln.strip()]
    if not lines:
        raise nn.ContractError("corpus too short to pretrain on")
    seqs = [[BOS] + tok.tokenize(ln)[:budget] + [EOS] for ln in lines]
    prefix = None
    if text_offset:
        prefix = Tensor(np.zeros((text_offset, lm.config.d_model), dtype=np.float32))
    rng = np.random.default_rng(seed)
    view = lm.params.subset(lm.lm_paths())
    state = nn.AdamState(lr=lr)
    losses = []
    for _ in range(steps):
        ids = seqs[int(rng.integers(0, len(seqs)))]
        loss = lm_next_token_loss(lm, ids, prefix_embeddings=prefix)
        ad.backward(loss)
        nn.adam_update(view, state, view.collect_grads())
        view.zero_grads()
        losses.append(loss.item())
    return losses


_FROZEN_LM_CACHE: dict = {}


def _cache_key(config: LMConfig, corpus, seed, steps, lr, text_offset) -> tuple:
    from .data import fnv1a64
    digest = fnv1a64(corpus.encode("utf-8")) if corpus else ""
    return (tuple(sorted(config.to_dict().items())), digest, seed, steps, lr, text_offset)


def build_frozen_lm(config: LMConfig, corpus=None, seed: int = 0,
                    pretrain_steps: int = 600, pretrain_lr: float = 1e-3,
                    params: nn.ParamSet | None = None, text_offset: int = 0) -> CausalLM:
    """Initialize (and optionally stub-pretrain) the LM, then freeze every
    one of its parameter paths. Identical (config, corpus, seed) builds are
    served from an in-process cache of the serialized weights."""
    params = params if params is not None else nn.ParamSet()
    key = _cache_key(config, corpus, seed, pretrain_steps, pretrain_lr, text_offset)
    cached = _FROZEN_LM_CACHE.get(key)
    if cached is not None:
        lm = CausalLM(config, params)
        for path, arr in nn.read_array_table(cached, 0)[0]:
            params.add(path, Tensor(arr))
    else:
        lm = CausalLM.build(config, params, seed)
        if corpus:
            stub_pretrain(lm, corpus, steps=pretrain_steps, lr=pretrain_lr, seed=seed,
                          text_offset=text_offset)
        view = params.subset(lm.lm_paths())
        _FROZEN_LM_CACHE[key] = nn.params_serialize(view)
    params.freeze_prefix("lm.")
    for path in lm.lm_paths():
        params[path].requires_grad = False
        params[path].grad = None
    return lm
