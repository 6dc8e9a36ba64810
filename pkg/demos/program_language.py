"""A tour of the program language: knowledge bases, execution, metrics, normalization."""

# %%
from unisem.datagen import default_bundle, denormalize, generate_corpus, normalize_external
from unisem.lang import Denotation, execute, hard_match, parse_program, soft_f1

corpus = generate_corpus(default_bundle(), 300, 17)
kb = corpus.kb("recipes")
print(kb.entity_type, "with properties", kb.properties)
print(len(kb.entities), "entities")

# %% [markdown]
# Programs are prefix token sequences. Parsing gives a tree, executing it against a
# knowledge base gives a denotation: a set of entities, a set of values, or a count.

# %%
inst = next(i for i in corpus.split("train", ["recipes"]) if i.program[0] == "filter")
print(" ".join(inst.utterance))
print(" ".join(inst.program), inst.entity_map)
expr = parse_program(inst.program)
den = execute(expr, kb, inst.entity_map)
print(den.kind, sorted(den.items)[:5])

# %% [markdown]
# Hard accuracy asks for the exact answer set; the soft score is the F1 overlap and is
# what the weakly supervised parsers are rewarded with.

# %%
everything = execute(parse_program([kb.entity_type]), kb)
print("hard", hard_match(everything, den), "soft %.3f" % soft_f1(everything, den))
print("counts compare as singletons:", soft_f1(Denotation.count(3), Denotation.count(4)))

# %% [markdown]
# Original-form parses are long. The normalizer strips wrappers that carry no
# information and masks entity names, and the rewrite inverts exactly.

# %%
original = ("(call SW.listValue (call SW.filter (call SW.getProperty (call SW.singleton en.recipe) "
            "(string ! type)) (call SW.ensureNumericProperty (string posting_date)) (string >=) "
            "(call SW.ensureNumericEntity (call SW.getProperty en.recipe.rice_pudding "
            "(string posting_date)))))")
tokens, emap = normalize_external(original)
print(len(original.replace("(", " ( ").replace(")", " ) ").split()), "->", len(tokens), "tokens")
print(" ".join(tokens), emap)
assert denormalize(tokens, emap) == original
