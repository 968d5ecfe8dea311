#!/usr/bin/env python3
"""Train the router on a synthetic pool where two designated agents answer
confidently, then check that held-out routing recovers exactly that pair.

Runs a couple of minutes' worth of mock executions in ~15 seconds.
"""

from agentroute import (MockPoolBackend, MockSummarizer, RouterConfig, Runtime,
                        TrainingSettings, init_params, train)
from agentroute.embed import HashEmbedder
from agentroute.synthetic import make_queries, make_tagged_pool, top_pair_match_rate

EXPERTS = {"alpha": (2, 5)}  # agents 2 and 5 answer tag-alpha with entropy 0.2

config = RouterConfig(pool_size=8, max_route=4, temperature=0.1, embed_dim=64,
                      max_steps=3, train_steps=3, seed=42)
specs, profiles = make_tagged_pool(8, EXPERTS, low=0.2, high=2.0)
runtime = Runtime(pool=MockPoolBackend(specs, profiles),
                  summarizer=MockSummarizer(final_at_step=0),
                  embed=HashEmbedder(config.embed_dim))

train_queries = make_queries(["alpha"], 200, seed=42, salt="train")
holdout = make_queries(["alpha"], 40, seed=42, salt="holdout")
params = init_params(config)

before = top_pair_match_rate(runtime, holdout, params, config, EXPERTS)
print(f"untrained held-out top-2 match: {before:.1%} (chance is ~3.6%)")

settings = TrainingSettings(lr=1e-3, batch_size=8, epochs=3,
                            loss_kind="ranking", clip_norm=1.0)
report = train(runtime, train_queries, params, config, settings)

print("\nepoch mean losses:")
for epoch, loss in enumerate(report.epoch_losses, start=1):
    print(f"  epoch {epoch}: {loss:.4f}")
print(f"routing agreement during final epoch: {report.routing_agreement:.1%}")

after = top_pair_match_rate(runtime, holdout, report.params, config, EXPERTS)
print(f"\ntrained held-out top-2 match: {after:.1%}")
print(f"designated experts recovered: {sorted(EXPERTS['alpha'])}")
