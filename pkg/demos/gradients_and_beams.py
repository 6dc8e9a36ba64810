"""Checking the autodiff engine and watching beam search on a tiny decoder."""

# %%
import numpy as np

from unisem.autodiff import Tensor, gradient_check
from unisem.model import ModelConfig, Seq2Seq, build_parser
from unisem.training import supervised_loss

rng = np.random.default_rng(0)
a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
err = gradient_check(lambda g: g.sum(g.tanh(g.matmul(a, b))), [a, b])
print("tanh(AB) relative error %.2e" % err)

# %% [markdown]
# The same check runs through a whole two-layer attention model.

# %%
words = [["how", "many", "red", "things"], ["biggest", "thing"]]
progs = [["count", "filter", "t", "c", "=", "r"], ["argmax", "t", "s"]]
parser = build_parser(words, sorted({t for p in progs for t in p}), num_layers=2, hidden_size=8, embed_size=6)
src = [parser.encode_utterance(w) for w in words]
tgt = [parser.encode_program(p) for p in progs]
params = [t for _, t in parser.model.params.items()]
print("model parameters:", parser.model.num_params())
print("end-to-end relative error %.2e" % gradient_check(lambda g: supervised_loss(g, parser, src, tgt), params))

# %% [markdown]
# A decoder that can emit only {</s>, a, b} for at most two steps has seven possible
# outputs. A beam of width 10 holds all of them, ranked by log-probability; open
# hypotheses that hit the length limit stay in the beam.

# %%
model = Seq2Seq(ModelConfig(src_vocab_size=4, tgt_vocab_size=5, hidden_size=6, embed_size=5, max_tgt_len=2,
                            init_scale=1.5), seed=1)
names = {2: "</s>", 3: "a", 4: "b"}
for h in model.beam_search([2, 3], 10).items:
    print("%-10s %8.4f %s" % (" ".join(names[t] for t in h.tokens), h.log_prob, "" if h.finished else "(open)"))
print("greedy:", " ".join(names[t] for t in model.greedy([2, 3]).tokens))
