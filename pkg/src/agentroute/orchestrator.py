"""Top-level loops: dense entropy-supervised training, sparse inference
with summarizer termination, and test-time adaptation.

Training runs every pool agent at every step to collect the entropy
supervision, but the next context aggregates only the routed agents'
responses (on-policy context). Inference executes only the routed agents
and lets the summarizer terminate early, with the step limit as backstop.
Test-time adaptation runs the first queries of a stream densely, updates
the router from their entropy signal exactly as training does, then serves
the rest sparsely with the adapted parameters.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .agents import Final, TransportError, assemble_prompt, \
    summarize_final, summarizer_decide
from .core import ConfigError, RouterConfig, StepRecord, STEP_LIMIT, SUMMARIZER, \
    Trajectory, derive_seed, new_trajectory, validate_config
from .learning import AdamWHyper, adamw_step, clip_gradients, confidence, \
    get_loss, init_optimizer, total_loss
from .numerics import combine_arrays, map_arrays, softmax, softmax_vjp
from .router import ForwardPass, RouterParams, attach_responses, \
    backward_trajectory, init_state, override_logits, route_step, \
    zeros_like_params


class OrchestrationError(RuntimeError):
    """A run could not proceed (for example, every routed agent failed)."""


@dataclass
class Runtime:
    """The pieces a run needs besides parameters: an agent pool backend, a
    summarizer backend, an embedding function, and the fan-out width for
    per-step agent execution."""

    pool: object
    summarizer: object
    embed: object
    max_workers: int = 1


@dataclass(frozen=True)
class TrainingSettings:
    """Optimization hyperparameters plus loop shape."""

    lr: float = 1e-3
    batch_size: int = 8
    epochs: int = 3
    loss_kind: str = "ranking"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    triplet_margin: float = 0.1

    def adamw(self) -> AdamWHyper:
        return AdamWHyper(lr=self.lr, beta1=self.beta1, beta2=self.beta2,
                          epsilon=self.epsilon, weight_decay=self.weight_decay,
                          clip_norm=self.clip_norm)


@dataclass
class TrainReport:
    """Loss curves plus the trained parameters and a routing-quality
    summary: the fraction of final-epoch steps whose selected agents all
    sat among the k lowest-entropy agents of that step."""

    epoch_losses: list = field(default_factory=list)
    loss_rows: list = field(default_factory=list)  # (epoch, batch, mean loss)
    routing_agreement: float = 0.0
    params: RouterParams | None = None


def _execute_many(runtime: Runtime, agent_ids, prompts, step_index, seeds,
                  tolerate_failures: bool):
    """Run a set of agents, optionally concurrently. Results come back in
    the order of agent_ids regardless of completion order; failed agents
    are None when failures are tolerated."""

    def run_one(args):
        agent_id, prompt, seed = args
        try:
            return runtime.pool.execute(agent_id, prompt, step_index, seed)
        except TransportError:
            if tolerate_failures:
                return None
            raise

    tasks = list(zip(agent_ids, prompts, seeds))
    if runtime.max_workers <= 1 or len(tasks) <= 1:
        return [run_one(t) for t in tasks]
    with ThreadPoolExecutor(max_workers=min(runtime.max_workers, len(tasks))) as pool:
        return list(pool.map(run_one, tasks))


def _exec_seed(config: RouterConfig, label: str, step_index: int, agent_id: int) -> int:
    return derive_seed(config.seed, f"exec:{label}:s{step_index}:a{agent_id}")


def infer(runtime: Runtime, query: str, params: RouterParams,
          config: RouterConfig, *, query_index: int = 0,
          logit_override=None, max_route_override: int | None = None) -> Trajectory:
    """Sparse inference: route, execute only the selected agents, aggregate,
    then ask the summarizer whether to stop. If a routed agent fails in
    transport, its weight is renormalized over the survivors; if every
    routed agent fails the run aborts. Reaching the step limit forces one
    summarizer call whose reply becomes the answer.

    `logit_override` (step_index -> logits) replaces the router's logits,
    which is how scripted topology schedules are produced.
    """
    validate_config(config)
    if runtime.pool.size != config.pool_size:
        raise ConfigError("pool size does not match config.pool_size")
    eff_config = config if max_route_override is None else \
        replace(config, max_route=max_route_override)
    traj = new_trajectory(query)
    x = np.asarray(runtime.embed(query), dtype=np.float64)
    h = init_state(config.embed_dim)
    prev_responses: list = []
    label = f"q{query_index}"
    for step_index in range(1, config.max_steps + 1):
        step = route_step(x, h, params, eff_config)
        if logit_override is not None:
            step = override_logits(step, logit_override(step_index), eff_config)
        prompts = [assemble_prompt(runtime.pool.spec(a), query, prev_responses)
                   for a in step.selected_ids]
        seeds = [_exec_seed(config, label, step_index, a) for a in step.selected_ids]
        results = _execute_many(runtime, step.selected_ids, prompts, step_index,
                                seeds, tolerate_failures=True)
        survivors = [(a, resp) for a, resp in zip(step.selected_ids, results)
                     if resp is not None]
        if not survivors:
            raise OrchestrationError(f"all routed agents failed at step {step_index}")
        if len(survivors) < step.k:
            keep = [pos for pos, resp in enumerate(results) if resp is not None]
            alpha = step.alpha[keep]
            alpha = alpha / alpha.sum()
            selected = tuple(a for a, _ in survivors)
        else:
            alpha = step.alpha
            selected = step.selected_ids
        responses = [resp for _, resp in survivors]
        embeddings = np.stack([runtime.embed(r.text) for r in responses])
        x_next = alpha @ embeddings
        record = StepRecord(step_index=step_index, logits_z=step.z,
                            count_probs=step.count_probs, k=len(selected),
                            selected_ids=selected, alpha=alpha, context_X=x,
                            entropy_E=None)
        traj.append_step(record, responses, eff_config)
        decision = summarizer_decide(query, responses, runtime.summarizer)
        if isinstance(decision, Final):
            traj.final_answer = decision.answer
            traj.terminated_by = SUMMARIZER
            return traj
        prev_responses = responses
        x = x_next
        h = step.h
    traj.final_answer = summarize_final(query, prev_responses, runtime.summarizer)
    traj.terminated_by = STEP_LIMIT
    return traj


def _dense_pass(runtime: Runtime, query: str, params: RouterParams,
                config: RouterConfig, label: str, loss_fn, grad_fn,
                make_trajectory: bool):
    """One dense query: run config.train_steps steps executing all agents,
    accumulate the per-step ranking losses, and backpropagate through time.

    Returns (mean loss, parameter gradients, per-step (selected, entropies),
    trajectory or None). Any agent failure aborts the query: the entropy
    targets would be incomplete.
    """
    n = config.pool_size
    x = np.asarray(runtime.embed(query), dtype=np.float64)
    h = init_state(config.embed_dim)
    traj = new_trajectory(query) if make_trajectory else None
    prev_routed: list = []
    steps = []
    dz_list = []
    losses = []
    infos = []
    agent_ids = list(range(n))
    for step_index in range(1, config.train_steps + 1):
        step = route_step(x, h, params, config)
        prompts = [assemble_prompt(runtime.pool.spec(a), query, prev_routed)
                   for a in agent_ids]
        seeds = [_exec_seed(config, label, step_index, a) for a in agent_ids]
        responses = _execute_many(runtime, agent_ids, prompts, step_index, seeds,
                                  tolerate_failures=False)
        entropies = []
        for resp in responses:
            if resp.predictive_entropy is None:
                raise OrchestrationError(
                    f"agent {resp.agent_id} returned no entropy; cannot supervise")
            entropies.append(resp.predictive_entropy)
        entropy_vec = np.asarray(entropies, dtype=np.float64)
        conf = confidence(entropy_vec)
        probs = softmax(step.z)
        losses.append(loss_fn(probs, conf))
        dz_list.append(softmax_vjp(probs, grad_fn(probs, conf)))
        routed = [responses[a] for a in step.selected_ids]
        embeddings = np.stack([runtime.embed(r.text) for r in routed])
        x_next = attach_responses(step, embeddings)
        if traj is not None:
            record = StepRecord(step_index=step_index, logits_z=step.z,
                                count_probs=step.count_probs, k=step.k,
                                selected_ids=step.selected_ids, alpha=step.alpha,
                                context_X=x, entropy_E=entropy_vec)
            traj.append_step(record, responses, config)
        infos.append((step.selected_ids, entropy_vec))
        steps.append(step)
        prev_routed = routed
        x = x_next
        h = step.h
    mean_loss = total_loss(losses)
    scale = 1.0 / len(steps)
    forward = ForwardPass(steps=steps, params=params, config=config)
    grads = backward_trajectory(forward, [dz * scale for dz in dz_list])
    if traj is not None:
        traj.final_answer = summarize_final(query, prev_routed, runtime.summarizer)
        traj.terminated_by = STEP_LIMIT
    return mean_loss, grads, infos, traj


def _batches(items, size):
    for start in range(0, len(items), size):
        yield items[start: start + size]


def _agreement(selected_ids, entropy_vec) -> bool:
    k = len(selected_ids)
    lowest = sorted(range(entropy_vec.size), key=lambda a: (entropy_vec[a], a))[:k]
    return set(selected_ids) <= set(lowest)


def train(runtime: Runtime, queries, params: RouterParams, config: RouterConfig,
          settings: TrainingSettings) -> TrainReport:
    """Dense entropy-supervised training.

    Per query: embed it, unroll config.train_steps routing steps executing
    all pool agents, score each step's routing probabilities against the
    confidence ordering, and average the step losses. Per batch: average
    the per-query gradients, clip to the global-norm budget, and take one
    AdamW step. The summarizer never runs here; the loss needs no answers.
    """
    validate_config(config)
    queries = list(queries)
    if not queries:
        raise ValueError("at least one training query is required")
    if runtime.pool.size != config.pool_size:
        raise ConfigError("pool size does not match config.pool_size")
    loss_fn, grad_fn = get_loss(settings.loss_kind, settings.triplet_margin)
    state = init_optimizer(params, settings.adamw())
    report = TrainReport()
    hits = 0
    total_steps = 0
    for epoch in range(1, settings.epochs + 1):
        epoch_batch_losses = []
        for batch_index, batch in enumerate(_batches(queries, settings.batch_size),
                                            start=1):
            grad_sum = zeros_like_params(params)
            loss_sum = 0.0
            for offset, query in enumerate(batch):
                query_index = (batch_index - 1) * settings.batch_size + offset
                label = f"e{epoch}:q{query_index}"
                try:
                    loss, grads, infos, _ = _dense_pass(
                        runtime, query, params, config, label, loss_fn, grad_fn,
                        make_trajectory=False)
                except (TransportError, OrchestrationError, ValueError) as exc:
                    raise OrchestrationError(
                        f"training query {query_index} failed: {exc}") from exc
                loss_sum += loss
                grad_sum = combine_arrays(np.add, grad_sum, grads)
                if epoch == settings.epochs:
                    for selected, entropy_vec in infos:
                        hits += _agreement(selected, entropy_vec)
                        total_steps += 1
            mean_loss = loss_sum / len(batch)
            mean_grads = map_arrays(lambda arr: arr / len(batch), grad_sum)
            clipped = clip_gradients(mean_grads, settings.clip_norm)
            params = adamw_step(params, clipped, state)
            report.loss_rows.append((epoch, batch_index, mean_loss))
            epoch_batch_losses.append(mean_loss)
        report.epoch_losses.append(float(np.mean(epoch_batch_losses)))
    report.routing_agreement = hits / total_steps if total_steps else 0.0
    report.params = params
    return report


def test_time_train(runtime: Runtime, queries, params: RouterParams,
                    config: RouterConfig, settings: TrainingSettings,
                    t_dense: int):
    """Adapt on a query stream without labels.

    The first t_dense queries run densely (train_steps steps, all agents,
    the summarizer still produces each answer); their entropy losses update
    the router in one pass of batch-sized optimizer steps. Every remaining
    query then runs sparse inference with the adapted parameters.

    Returns (adapted params, trajectories for the whole stream). Dense-phase
    trajectories carry entropy_E on every step; sparse-phase ones carry none.
    """
    validate_config(config)
    if not isinstance(t_dense, int) or not 1 <= t_dense <= 30:
        raise ConfigError("t_dense must be an integer in 1..30")
    if t_dense < 10:
        warnings.warn("t_dense below 10 is outside the recommended 10..30 range",
                      stacklevel=2)
    queries = list(queries)
    if len(queries) < t_dense:
        raise ValueError(f"stream must yield at least t_dense={t_dense} queries")
    if runtime.pool.size != config.pool_size:
        raise ConfigError("pool size does not match config.pool_size")
    loss_fn, grad_fn = get_loss(settings.loss_kind, settings.triplet_margin)
    state = init_optimizer(params, settings.adamw())
    trajectories: list[Trajectory] = []
    dense, sparse = queries[:t_dense], queries[t_dense:]
    for batch_index, batch in enumerate(_batches(dense, settings.batch_size), start=1):
        grad_sum = zeros_like_params(params)
        for offset, query in enumerate(batch):
            query_index = (batch_index - 1) * settings.batch_size + offset
            label = f"ttt:q{query_index}"
            loss, grads, _, traj = _dense_pass(runtime, query, params, config,
                                               label, loss_fn, grad_fn,
                                               make_trajectory=True)
            grad_sum = combine_arrays(np.add, grad_sum, grads)
            trajectories.append(traj)
        mean_grads = map_arrays(lambda arr: arr / len(batch), grad_sum)
        params = adamw_step(params, clip_gradients(mean_grads, settings.clip_norm),
                            state)
    for offset, query in enumerate(sparse):
        trajectories.append(infer(runtime, query, params, config,
                                  query_index=t_dense + offset))
    return params, trajectories


# the name begins with "test_", which test collectors would otherwise pick up
test_time_train.__test__ = False
