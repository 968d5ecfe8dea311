"""The differentiable routing core.

A GRU cell consumes the current context vector and feeds a linear head that
emits one logit per pool agent. Selection is sparse: the per-step count k
adapts to how much temperature-softmax mass clears the uniform level, the
top-k agents by raw logit are kept, and their response embeddings are
combined under plain softmax weights to form the next context vector.

Forward passes cache every activation needed for exact backpropagation
through time. Gradients flow through the head, the recurrence, and the
aggregation weights; the discrete selection itself carries no gradient,
and response embeddings are constants (the encoder is frozen).

Conventions, pinned so the finite-difference oracle is unambiguous:
  r  = sigmoid(w_r x + u_r h + b_r)
  u  = sigmoid(w_u x + u_u h + b_u)
  c  = tanh(w_n x + b_in + r * (u_n h + b_hn))
  h' = (1 - u) * c + u * h
The cell output equals the new hidden state. Ties in top-k selection break
by ascending agent index.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .core import RouterConfig, derive_seed, validate_config
from .numerics import iter_arrays, sigmoid, softmax, softmax_vjp

_SNAPSHOT_MAGIC = b"ARPS"
_SNAPSHOT_VERSION = 1

# Field order is load-bearing: initialization draws and snapshot files both
# follow it.
PARAM_FIELDS = ("w_r", "w_u", "w_n", "u_r", "u_u", "u_n",
                "b_r", "b_u", "b_in", "b_hn", "w_out", "b_out")


@dataclass
class RouterParams:
    """All trainable tensors: GRU input/recurrent weights and biases plus
    the linear head. Shapes are (d, d) for weights, (d,) for biases,
    (n, d) and (n,) for the head."""

    w_r: np.ndarray
    w_u: np.ndarray
    w_n: np.ndarray
    u_r: np.ndarray
    u_u: np.ndarray
    u_n: np.ndarray
    b_r: np.ndarray
    b_u: np.ndarray
    b_in: np.ndarray
    b_hn: np.ndarray
    w_out: np.ndarray
    b_out: np.ndarray

    @property
    def embed_dim(self) -> int:
        return self.w_r.shape[0]

    @property
    def pool_size(self) -> int:
        return self.b_out.shape[0]


def init_params(config: RouterConfig) -> RouterParams:
    """Seeded uniform(-1/sqrt(d), 1/sqrt(d)) init for every tensor, biases
    included; keeps early logits near-uniform so early k starts wide."""
    validate_config(config)
    d, n = config.embed_dim, config.pool_size
    rng = np.random.default_rng(derive_seed(config.seed, "router-init"))
    bound = 1.0 / np.sqrt(d)
    shapes = {"w_r": (d, d), "w_u": (d, d), "w_n": (d, d),
              "u_r": (d, d), "u_u": (d, d), "u_n": (d, d),
              "b_r": (d,), "b_u": (d,), "b_in": (d,), "b_hn": (d,),
              "w_out": (n, d), "b_out": (n,)}
    tensors = {name: rng.uniform(-bound, bound, size=shapes[name])
               for name in PARAM_FIELDS}
    return RouterParams(**tensors)


def zeros_like_params(params: RouterParams) -> RouterParams:
    return RouterParams(**{name: np.zeros_like(arr)
                           for name, arr in iter_arrays(params)})


def params_to_flat(params: RouterParams) -> np.ndarray:
    return np.concatenate([getattr(params, name).ravel() for name in PARAM_FIELDS])


def flat_to_params(flat: np.ndarray, like: RouterParams) -> RouterParams:
    out = {}
    offset = 0
    for name in PARAM_FIELDS:
        arr = getattr(like, name)
        out[name] = flat[offset: offset + arr.size].reshape(arr.shape).copy()
        offset += arr.size
    if offset != flat.size:
        raise ValueError("flat vector size does not match the parameter shapes")
    return RouterParams(**out)


def init_state(dim: int) -> np.ndarray:
    """Initial hidden state: the all-zero vector."""
    return np.zeros(dim, dtype=np.float64)


def _gru_forward(x, h_prev, params):
    r = sigmoid(params.w_r @ x + params.u_r @ h_prev + params.b_r)
    u = sigmoid(params.w_u @ x + params.u_u @ h_prev + params.b_u)
    rec = params.u_n @ h_prev + params.b_hn
    c = np.tanh(params.w_n @ x + params.b_in + r * rec)
    h = (1.0 - u) * c + u * h_prev
    return r, u, rec, c, h


def gru_step(x: np.ndarray, h: np.ndarray, params: RouterParams):
    """One GRU cell update; returns (h_next, output), output == h_next."""
    x = np.asarray(x, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    d = params.embed_dim
    if x.shape != (d,) or h.shape != (d,):
        raise ValueError(f"expected vectors of length {d}")
    r, u, _, c, h_next = _gru_forward(x, h, params)
    for name, arr in (("reset", r), ("update", u), ("candidate", c), ("hidden", h_next)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} gate produced non-finite values")
    return h_next, h_next


def head(o: np.ndarray, params: RouterParams) -> np.ndarray:
    """Linear head: logits over the agent pool."""
    o = np.asarray(o, dtype=np.float64)
    if o.shape != (params.embed_dim,):
        raise ValueError(f"expected a vector of length {params.embed_dim}")
    return params.w_out @ o + params.b_out


def adaptive_k(z: np.ndarray, temperature: float, max_route: int, pool_size: int) -> int:
    """Per-step routed-agent count: how many temperature-softmax entries
    reach the uniform level 1/pool_size, capped at max_route."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape != (pool_size,):
        raise ValueError(f"expected {pool_size} logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("logits contain non-finite values")
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    if max_route < 1:
        raise ValueError("max_route must be >= 1")
    probs = softmax(z / temperature)
    count = int(np.count_nonzero(probs >= 1.0 / pool_size))
    # The softmax maximum is always >= 1/pool_size, so count >= 1.
    assert count >= 1
    return min(max_route, count)


def keep_top_k(z: np.ndarray, k: int) -> tuple[int, ...]:
    """Indices of the k largest logits, ordered by descending logit then
    ascending index; ties break by ascending index."""
    z = np.asarray(z, dtype=np.float64)
    if not 1 <= k <= z.size:
        raise ValueError("k out of range")
    order = sorted(range(z.size), key=lambda i: (-z[i], i))
    return tuple(order[:k])


def aggregate_context(kept_logits: np.ndarray, response_embeddings: np.ndarray):
    """Softmax-weight the kept logits (no temperature here) and take the
    weighted sum of the matching response embeddings."""
    kept = np.asarray(kept_logits, dtype=np.float64)
    emb = np.asarray(response_embeddings, dtype=np.float64)
    if kept.ndim != 1 or kept.size < 1:
        raise ValueError("kept_logits must be a non-empty vector")
    if emb.ndim != 2 or emb.shape[0] != kept.size:
        raise ValueError("one embedding row per kept logit required")
    alpha = softmax(kept)
    return alpha, alpha @ emb


@dataclass
class RoutingDecision:
    logits_z: np.ndarray
    k: int
    selected_ids: tuple[int, ...]
    alpha: np.ndarray


@dataclass
class StepCache:
    """Everything the backward pass needs from one forward step."""

    x: np.ndarray
    h_prev: np.ndarray
    r: np.ndarray
    u: np.ndarray
    rec: np.ndarray          # u_n h_prev + b_hn, reused by the reset-gate grad
    c: np.ndarray
    h: np.ndarray
    z: np.ndarray
    count_probs: np.ndarray
    k: int
    selected_ids: tuple[int, ...]
    alpha: np.ndarray
    kept_embeddings: np.ndarray | None = None

    def decision(self) -> RoutingDecision:
        return RoutingDecision(self.z, self.k, self.selected_ids, self.alpha)


def route_step(x: np.ndarray, h_prev: np.ndarray, params: RouterParams,
               config: RouterConfig) -> StepCache:
    """One routing step: recurrence, head, adaptive count, top-k selection,
    and the aggregation weights over the kept logits."""
    x = np.asarray(x, dtype=np.float64)
    h_prev = np.asarray(h_prev, dtype=np.float64)
    r, u, rec, c, h = _gru_forward(x, h_prev, params)
    for name, arr in (("reset", r), ("update", u), ("candidate", c), ("hidden", h)):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} gate produced non-finite values")
    z = head(h, params)
    k = adaptive_k(z, config.temperature, config.max_route, config.pool_size)
    selected = keep_top_k(z, k)
    alpha = softmax(z[list(selected)])
    count_probs = softmax(z / config.temperature)
    return StepCache(x=x, h_prev=h_prev, r=r, u=u, rec=rec, c=c, h=h, z=z,
                     count_probs=count_probs, k=k, selected_ids=selected,
                     alpha=alpha)


def override_logits(step: StepCache, z: np.ndarray, config: RouterConfig) -> StepCache:
    """Replace a step's logits with a scripted vector and redo the
    selection arithmetic; used by topology simulation."""
    z = np.asarray(z, dtype=np.float64)
    k = adaptive_k(z, config.temperature, config.max_route, config.pool_size)
    selected = keep_top_k(z, k)
    step.z = z
    step.count_probs = softmax(z / config.temperature)
    step.k = k
    step.selected_ids = selected
    step.alpha = softmax(z[list(selected)])
    return step


def attach_responses(step: StepCache, response_embeddings: np.ndarray) -> np.ndarray:
    """Record the routed agents' response embeddings on the cache and
    return the aggregated next context vector."""
    emb = np.asarray(response_embeddings, dtype=np.float64)
    if emb.shape[0] != step.k:
        raise ValueError("one embedding row per selected agent required")
    step.kept_embeddings = emb
    return step.alpha @ emb


@dataclass
class ForwardPass:
    """Cached activations for a whole trajectory, in step order."""

    steps: list[StepCache]
    params: RouterParams
    config: RouterConfig

    def decisions(self) -> list[RoutingDecision]:
        return [s.decision() for s in self.steps]


def forward_trajectory(query_embedding: np.ndarray, step_response_embeddings,
                       params: RouterParams, config: RouterConfig) -> ForwardPass:
    """Replay routing over a full trajectory.

    `step_response_embeddings[i]` is a (pool_size, embed_dim) matrix whose
    row a holds agent a's step-(i+1) response embedding; only the rows of
    agents the router actually selects feed the next context, so dense
    matrices keep the replay well defined even if a perturbation flips the
    selection.
    """
    validate_config(config)
    x = np.asarray(query_embedding, dtype=np.float64)
    if x.shape != (config.embed_dim,):
        raise ValueError(f"query embedding must have length {config.embed_dim}")
    h = init_state(config.embed_dim)
    steps: list[StepCache] = []
    for index, responses in enumerate(step_response_embeddings, start=1):
        responses = np.asarray(responses, dtype=np.float64)
        if responses.shape != (config.pool_size, config.embed_dim):
            raise ValueError(
                f"step {index}: expected a ({config.pool_size}, {config.embed_dim})"
                " response-embedding matrix")
        try:
            step = route_step(x, h, params, config)
        except ValueError as exc:
            raise ValueError(f"step {index}: {exc}") from exc
        x = attach_responses(step, responses[list(step.selected_ids)])
        h = step.h
        steps.append(step)
    return ForwardPass(steps=steps, params=params, config=config)


def backward_trajectory(forward: ForwardPass, per_step_dz) -> RouterParams:
    """Backpropagation through time.

    `per_step_dz[i]` is the loss gradient with respect to the raw step
    logits. Three paths are accumulated: the head and GRU parameters at
    each step, the hidden-state recurrence, and the aggregation weights of
    the previous step (whose softmax feeds the current context vector).
    """
    params = forward.params
    steps = forward.steps
    if len(per_step_dz) != len(steps):
        raise ValueError("one logit gradient per cached step required")
    n, d = params.pool_size, params.embed_dim
    grads = zeros_like_params(params)
    dh_carry = np.zeros(d)
    dz_from_alpha = [np.zeros(n) for _ in steps]
    for i in reversed(range(len(steps))):
        st = steps[i]
        dz = np.asarray(per_step_dz[i], dtype=np.float64) + dz_from_alpha[i]
        if dz.shape != (n,):
            raise ValueError(f"step {i + 1}: logit gradient must have length {n}")
        # Head: z = w_out h + b_out, and the cell output is h itself.
        grads.w_out += np.outer(dz, st.h)
        grads.b_out += dz
        dh = params.w_out.T @ dz + dh_carry
        # GRU cell backward.
        dc = dh * (1.0 - st.u)
        du = dh * (st.h_prev - st.c)
        dh_prev = dh * st.u
        da_c = dc * (1.0 - st.c ** 2)
        grads.w_n += np.outer(da_c, st.x)
        grads.b_in += da_c
        dr = da_c * st.rec
        d_rec = da_c * st.r
        grads.u_n += np.outer(d_rec, st.h_prev)
        grads.b_hn += d_rec
        dh_prev = dh_prev + params.u_n.T @ d_rec
        da_u = du * st.u * (1.0 - st.u)
        grads.w_u += np.outer(da_u, st.x)
        grads.u_u += np.outer(da_u, st.h_prev)
        grads.b_u += da_u
        dh_prev = dh_prev + params.u_u.T @ da_u
        da_r = dr * st.r * (1.0 - st.r)
        grads.w_r += np.outer(da_r, st.x)
        grads.u_r += np.outer(da_r, st.h_prev)
        grads.b_r += da_r
        dh_prev = dh_prev + params.u_r.T @ da_r
        dx = params.w_n.T @ da_c + params.w_u.T @ da_u + params.w_r.T @ da_r
        dh_carry = dh_prev
        if i > 0:
            # x_i came from the previous step's weighted aggregation; push
            # the context gradient through alpha's softmax into z_{i-1}.
            prev = steps[i - 1]
            if prev.kept_embeddings is None:
                raise ValueError(
                    f"step {i}: cached response embeddings missing for backward")
            dalpha = prev.kept_embeddings @ dx
            dkept = softmax_vjp(prev.alpha, dalpha)
            dz_from_alpha[i - 1][list(prev.selected_ids)] += dkept
    for name, arr in iter_arrays(grads):
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite gradient in {name}")
    return grads


# --- parameter snapshots ---
#
# Binary layout: magic, version u32, embed_dim u32, pool_size u32, seed u64
# (all little-endian), then each tensor in PARAM_FIELDS order as raw
# little-endian float64 bytes. Round-trips bitwise.

def save_params(path, params: RouterParams, config: RouterConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(_SNAPSHOT_MAGIC)
        fh.write(struct.pack("<III Q", _SNAPSHOT_VERSION, params.embed_dim,
                             params.pool_size, config.seed))
        for name in PARAM_FIELDS:
            arr = np.ascontiguousarray(getattr(params, name), dtype="<f8")
            fh.write(arr.tobytes())


def load_params(path, config: RouterConfig | None = None):
    """Read a snapshot; returns (params, header) with header keys
    version, embed_dim, pool_size, seed. Checks shape compatibility when a
    config is given."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _SNAPSHOT_MAGIC:
            raise ValueError(f"{path}: not a router parameter snapshot")
        version, d, n, seed = struct.unpack("<III Q", fh.read(20))
        if version != _SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        if config is not None and (d != config.embed_dim or n != config.pool_size):
            raise ValueError(
                f"{path}: snapshot is ({d}, {n}) but config wants"
                f" ({config.embed_dim}, {config.pool_size})")
        shapes = {"w_r": (d, d), "w_u": (d, d), "w_n": (d, d),
                  "u_r": (d, d), "u_u": (d, d), "u_n": (d, d),
                  "b_r": (d,), "b_u": (d,), "b_in": (d,), "b_hn": (d,),
                  "w_out": (n, d), "b_out": (n,)}
        tensors = {}
        for name in PARAM_FIELDS:
            shape = shapes[name]
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"{path}: truncated snapshot at tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f8").astype(
                np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after the last tensor")
    header = {"version": version, "embed_dim": d, "pool_size": n, "seed": seed}
    return RouterParams(**tensors), header
