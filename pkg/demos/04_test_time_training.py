#!/usr/bin/env python3
"""Adapt the router on an unlabeled query stream: the first 20 queries run
densely to collect entropy supervision, the router updates, and the rest of
the stream runs sparsely with the adapted parameters."""

from agentroute import (MockPoolBackend, MockSummarizer, RouterConfig, Runtime,
                        TrainingSettings, init_params, test_time_train)
from agentroute.embed import HashEmbedder
from agentroute.synthetic import (entropy_argmin_agreement, make_queries,
                                  make_tagged_pool)

# A task family this router has never seen: agents 0 and 3 are the
# confident ones. The small spread makes every agent's entropy distinct so
# "selected agents are among the k most confident" is unambiguous.
config = RouterConfig(pool_size=8, max_route=4, temperature=0.1, embed_dim=64,
                      max_steps=3, train_steps=3, seed=7)
specs, profiles = make_tagged_pool(8, {"gamma": (0, 3)}, low=0.2, high=2.0,
                                   spread=0.02)
runtime = Runtime(pool=MockPoolBackend(specs, profiles),
                  summarizer=MockSummarizer(final_at_step=0),
                  embed=HashEmbedder(config.embed_dim))

stream = make_queries(["gamma"], 30, seed=7, salt="stream")
holdout = make_queries(["gamma"], 25, seed=7, salt="holdout")
params = init_params(config)

before = entropy_argmin_agreement(runtime, holdout, params, config)
print(f"pre-adaptation agreement with the confidence ordering: {before:.1%}")

# One pass over the dense phase; a handful of aggressive optimizer steps is
# all the budget the protocol allows.
settings = TrainingSettings(lr=5e-2, batch_size=4, epochs=1,
                            loss_kind="ranking", clip_norm=1.0)
adapted, trajectories = test_time_train(runtime, stream, params, config,
                                        settings, t_dense=20)

dense = [t for t in trajectories if t.steps[0].entropy_E is not None]
sparse = [t for t in trajectories if t.steps[0].entropy_E is None]
print(f"stream served: {len(dense)} dense + {len(sparse)} sparse queries,"
      " every one answered")
dense_calls = sum(t.total_agent_calls for t in dense) / len(dense)
sparse_calls = sum(t.total_agent_calls for t in sparse) / len(sparse)
print(f"mean agent calls per query: dense {dense_calls:.1f},"
      f" sparse {sparse_calls:.1f}")

after = entropy_argmin_agreement(runtime, holdout, adapted, config)
print(f"post-adaptation agreement: {after:.1%} ({(after - before) * 100:+.0f}pp)")
