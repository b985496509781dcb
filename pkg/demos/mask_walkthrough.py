"""How the training masks change during a simulated multi-step draft.

'x' marks a key position a query may attend to.  The early-stage mask hides every
query's own window, so position q only sees states up to its window start.  Each
simulation step then reveals one more slot per window, which is the state the draft
head would have produced itself at that point of a real drafting run.
"""

from beagle.masks import inverse_block_mask, render, simulation_mask_step, strict_causal_mask, window_plan

T, k, offset = 10, 3, 1

print("strict causal (plain next-token training):")
print(render(strict_causal_mask(T)))

plan = window_plan(T, k, offset)
print(f"\nwindows for T={T}, k={k}, offset={offset}:", [list(w.queries) for w in plan.windows])

mask = inverse_block_mask(plan)
print("\nstep 1, inverse block mask:")
print(render(mask))

for step in range(2, k + 1):
    before = mask.sum()
    simulation_mask_step(mask, plan, step)  # in place; no new buffer
    print(f"\nstep {step} (+{int(mask.sum() - before)} visible keys):")
    print(render(mask))

print("\nafter the last step the mask is strictly causal again:", bool((mask == strict_causal_mask(T)).all()))
