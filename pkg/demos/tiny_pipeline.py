"""End to end in about a minute: train a tiny target and draft head, then decode.

The target is a small byte-level transformer trained on the toy corpus.  The draft
head is trained first on the early-stage objective and then on the simulated
multi-step objective.  Greedy speculative decoding must reproduce the target's own
greedy output exactly; the interesting number is how many tokens each target pass
emits (tau).
"""

import numpy as np

from beagle.data import chunk_documents, decode, encode, make_toy_corpus, split_documents, build_state_cache
from beagle.models import DraftHead, ModelConfig, TargetModel
from beagle.specdec import SDSession, measure_alpha_profile, sd_generate, target_generate
from beagle.train import TargetTrainConfig, TrainConfig, run_training, train_target

docs = split_documents(make_toy_corpus(200_000, seed=1))
train_chunks = chunk_documents(docs[:-10], 64)
val_chunks = chunk_documents(docs[-10:], 64)

target = TargetModel(ModelConfig(d_model=64, n_heads=4, n_layers=2, t_max=256), seed=0)
history = train_target(target, TargetTrainConfig(epochs=1, lr=3e-3, warmup_steps=30, max_steps_per_epoch=300),
                       train_chunks, val_chunks)
print("target validation CE (nats/byte):", round(history[-1]["val_ce"], 3))

states = build_state_cache(target, train_chunks).states
val_states = build_state_cache(target, val_chunks).states
head = DraftHead.for_target(target, seed=0)
random_head = DraftHead.for_target(target, seed=1)
cfg = TrainConfig(k=3, s=3, epochs_early=2, epochs_late=2, lr=2e-3, max_steps_per_epoch=120)
result = run_training(cfg, head, target, train_chunks, states, val_chunks=val_chunks, val_states=val_states)
for row in result.val_rows:
    print(f"epoch {row['epoch']} ({row['stage']}): teacher-forced acceptance",
          " ".join(f"{row[f'alpha_{i}']:.2f}" for i in (1, 2, 3)))

t64 = target.astype(np.float64)
prompt = encode("the ", add_bos=True)
base = target_generate(t64, prompt, 80, "greedy", 0)
print("\ntarget greedy:", repr(decode(base.tokens).decode("utf-8", "replace")))
for name, h in (("trained head", head), ("random head", random_head)):
    res = sd_generate(SDSession(t64, h, prompt, gamma=3), 80)
    alpha = measure_alpha_profile(res.metrics, 3).alpha
    print(f"{name}: identical={res.tokens == base.tokens}  mean tau {res.metrics.mean_tau:.2f}  "
          f"alpha {np.round(alpha, 2)}")
