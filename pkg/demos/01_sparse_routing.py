#!/usr/bin/env python3
"""Walk through one sparse routed run: adaptive agent counts, top-k
selection, weighted context aggregation, and summarizer termination."""

import numpy as np

from agentroute import (MockPoolBackend, MockSummarizer, RouterConfig, Runtime,
                        adaptive_k, infer, init_params, keep_top_k)
from agentroute.embed import HashEmbedder
from agentroute.synthetic import make_tagged_pool

# ------------------------------------------------------------------
# 1. The selection rule on hand-picked logits
# ------------------------------------------------------------------
# The routed count k is how many temperature-softmax entries clear the
# uniform level 1/N, capped at K. Sharp logits route one agent, flat
# logits route the cap.

for label, z in [("flat", np.zeros(5)),
                 ("one dominant", np.array([1.0, 0.0, 0.0, 0.0, 0.0])),
                 ("two strong", np.array([0.8, 0.75, 0.0, -0.2, -0.4]))]:
    k = adaptive_k(z, temperature=0.1, max_route=3, pool_size=5)
    print(f"{label:>12}: z={np.round(z, 2)}  ->  k={k}, agents {keep_top_k(z, k)}")

# ------------------------------------------------------------------
# 2. A full trajectory over a mock pool
# ------------------------------------------------------------------
# Eight mock agents; two of them (#2 and #5) answer tag-alpha queries
# confidently. The router is untrained here, so selection is arbitrary;
# what matters is the mechanics: only selected agents execute, and each
# step's context is the weighted sum of the previous step's responses.

config = RouterConfig(pool_size=8, max_route=4, temperature=0.1, embed_dim=64,
                      max_steps=4, train_steps=3, seed=11)
specs, profiles = make_tagged_pool(8, {"alpha": (2, 5)})
runtime = Runtime(pool=MockPoolBackend(specs, profiles),
                  summarizer=MockSummarizer(final_at_step=3),
                  embed=HashEmbedder(config.embed_dim))

trajectory = infer(runtime, "[tag:alpha] estimate the odds for case 42",
                   init_params(config), config)

print()
print(f"query: {trajectory.query}")
for record in trajectory.steps:
    weights = ", ".join(f"{a}:{w:.2f}"
                        for a, w in zip(record.selected_ids, record.alpha))
    print(f"step {record.step_index}: k={record.k}  weights {{{weights}}}")
print(f"terminated by: {trajectory.terminated_by}")
print(f"answer: {trajectory.final_answer}")
print(f"agent calls: {trajectory.total_agent_calls} "
      f"(dense would be {config.pool_size * len(trajectory.steps)})")
