"""Teachers from denotations, one distilled student, and a supervised skyline.

Uses the single-core desk settings with one seed, so it finishes in a few minutes
and the numbers are noisy; the acceptance suite runs three seeds.
"""

# %%
import tempfile

from unisem.datagen import default_bundle, generate_corpus
from unisem.harness import compactness, desk_config, report, run_experiment, run_matrix

corpus = generate_corpus(default_bundle(), 300, 17)
out = tempfile.mkdtemp()
cfg = desk_config(seeds=[0], out=out)

# %% [markdown]
# run_matrix trains the per-domain teachers first, because distillation reads
# their checkpoints.

# %%
outcomes = run_matrix(cfg, ["supervised", "weak-independent", "weak-combined", "distill-combined"], corpus)
text, _ = report([o.table for o in outcomes.values()])
print(text)

# %%
student, teachers = compactness(outcomes, 0)
print(f"student {student} parameters, teachers {teachers} together")

# %% [markdown]
# From random initialisation the weak systems settle on a few programs that
# ignore the utterance, and the student inherits that from its teachers.
# Pretraining on a slice of gold programs before REINFORCE gives the beam
# something to start from.

# %%
for fraction in (0.1, 0.3):
    table = run_experiment(desk_config(system="weak-independent", seeds=[0], parallel_fraction=fraction,
                                       out=f"{out}/pretrain{fraction}"), corpus).table
    print(fraction, {d: round(v, 1) for d, v in table.median().items()})
