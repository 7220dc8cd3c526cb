"""InfoNCE contrastive training with an exact gradient-caching step.

``gradcache_step`` reproduces the full-batch gradient while only ever
holding one chunk's activations: chunks are first encoded without caches,
the loss gradient is taken at the embedding level over the whole batch,
then each chunk is re-encoded with caches and its parameter gradients
accumulated in fixed chunk-ascending, row-ascending order.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import TrainerConfig, ValidationError
from .encoder import (EncoderParams, ParamGrads, backprop_embedding_grad,
                      encode, init_params, save_checkpoint)


@dataclass
class Batch:
    """Queries as (image feature, text feature) pairs plus positive features.

    The negatives for query i are exactly the positives of every j != i.
    """

    queries: list
    positives: list

    def __post_init__(self):
        if len(self.queries) != len(self.positives):
            raise ValidationError("queries/positives length mismatch")

    def __len__(self):
        return len(self.queries)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    checkpoint_path: str = ""

    def append(self, step, loss, lr, grad_norm, wall) -> dict:
        entry = {"step": step, "loss": loss, "lr": lr,
                 "grad_norm": grad_norm, "wall": wall}
        self.steps.append(entry)
        return entry


def _check_inputs(Q, C, tau):
    if tau <= 0:
        raise ValidationError("temperature must be positive")
    Q = np.asarray(Q, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    if Q.shape != C.shape or Q.ndim != 2:
        raise ValidationError("Q and C must be matching N x d matrices")
    if not (np.all(np.isfinite(Q)) and np.all(np.isfinite(C))):
        raise ValidationError("non-finite embeddings")
    return Q, C


def infonce_loss(Q, C, tau: float) -> float:
    """Mean InfoNCE over in-batch negatives, log-sum-exp stabilized."""
    Q, C = _check_inputs(Q, C, tau)
    logits = (Q @ C.T) / tau
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float(np.mean(lse - np.diag(logits)))


def infonce_embedding_grads(Q, C, tau: float):
    """Exact dL/dQ and dL/dC for the mean InfoNCE loss."""
    Q, C = _check_inputs(Q, C, tau)
    n = Q.shape[0]
    logits = (Q @ C.T) / tau
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    delta = p - np.eye(n)
    scale = 1.0 / (n * tau)
    return scale * (delta @ C), scale * (delta.T @ Q)


def _fused(query):
    image_feat, text_feat = query
    return np.concatenate([np.asarray(image_feat, dtype=np.float64),
                           np.asarray(text_feat, dtype=np.float64)])


def _candidate_input(image_feat, input_dim):
    img = np.asarray(image_feat, dtype=np.float64)
    return np.concatenate([img, np.zeros(input_dim - img.shape[0])])


def _encode_rows(params, inputs, want_cache):
    embs, caches = [], []
    for x in inputs:
        emb, cache = encode(params, x, want_cache=want_cache)
        embs.append(emb.values)
        caches.append(cache)
    return np.array(embs), caches


def _batch_inputs(params, batch):
    q_in = [_fused(q) for q in batch.queries]
    c_in = [_candidate_input(c, params.input_dim) for c in batch.positives]
    return q_in, c_in


def full_batch_step(params: EncoderParams, batch: Batch, tau: float):
    """Single-pass reference gradient: encode everything with caches."""
    q_in, c_in = _batch_inputs(params, batch)
    Q, q_caches = _encode_rows(params, q_in, want_cache=True)
    C, c_caches = _encode_rows(params, c_in, want_cache=True)
    dQ, dC = infonce_embedding_grads(Q, C, tau)
    grads = ParamGrads.zeros_like(params)
    for cache, g in zip(q_caches, dQ):
        grads.add_(backprop_embedding_grad(params, cache, g))
    for cache, g in zip(c_caches, dC):
        grads.add_(backprop_embedding_grad(params, cache, g))
    loss = infonce_loss(Q, C, tau)
    return grads, loss


def gradcache_step(params: EncoderParams, batch: Batch, chunk_size: int,
                   tau: float):
    """Chunked three-stage step whose gradient equals full_batch_step."""
    if chunk_size < 1:
        raise ValidationError("chunk_size must be >= 1")
    q_in, c_in = _batch_inputs(params, batch)
    n = len(batch)

    # Stage 1: chunked forward passes without caches.
    Q_rows, C_rows = [], []
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        Q_rows.append(_encode_rows(params, q_in[start:stop], False)[0])
        C_rows.append(_encode_rows(params, c_in[start:stop], False)[0])
    Q = np.vstack(Q_rows)
    C = np.vstack(C_rows)

    # Stage 2: loss gradient at the embedding level over the full batch.
    dQ, dC = infonce_embedding_grads(Q, C, tau)
    loss = infonce_loss(Q, C, tau)

    # Stage 3: re-encode each chunk with caches and accumulate, in fixed
    # chunk-ascending then row-ascending order.
    grads = ParamGrads.zeros_like(params)
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        _, q_caches = _encode_rows(params, q_in[start:stop], True)
        for cache, g in zip(q_caches, dQ[start:stop]):
            grads.add_(backprop_embedding_grad(params, cache, g))
    for start in range(0, n, chunk_size):
        stop = min(start + chunk_size, n)
        _, c_caches = _encode_rows(params, c_in[start:stop], True)
        for cache, g in zip(c_caches, dC[start:stop]):
            grads.add_(backprop_embedding_grad(params, cache, g))
    return grads, loss


def lr_schedule(step: int, total_steps: int, lr0: float) -> float:
    """Linear decay from lr0 to 0; steps past the end clamp to 0."""
    if total_steps < 1:
        raise ValidationError("total_steps must be >= 1")
    if step < 0:
        raise ValidationError("negative step")
    if step >= total_steps:
        return 0.0
    return lr0 * (1.0 - step / total_steps)


def train(config: TrainerConfig, examples, input_dim: int,
          checkpoint_path=None, log_stream=None, init: EncoderParams = None):
    """Plain gradient descent over seeded shuffled batches.

    ``examples`` is a list of ((image_feat, text_feat), positive_feat) pairs.
    The last short batch is trained, not dropped. Fully deterministic under
    the config seed.
    """
    if not examples:
        raise ValidationError("empty training set")
    params = init.copy() if init is not None else init_params(
        input_dim, config.hidden_dim, config.embed_dim, seed=config.seed)
    n = len(examples)
    steps_per_epoch = math.ceil(n / config.batch_size)
    total_steps = config.total_steps or config.epochs * steps_per_epoch
    rng = np.random.default_rng(config.seed)
    log = TrainLog()
    step = 0
    for _epoch in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            if step >= total_steps:
                break
            idxs = order[start:start + config.batch_size]
            batch = Batch([examples[i][0] for i in idxs],
                          [examples[i][1] for i in idxs])
            t0 = time.perf_counter()
            grads, loss = gradcache_step(params, batch, config.chunk_size,
                                         config.temperature)
            lr = lr_schedule(step, total_steps, config.lr0)
            for p, g in zip(params.blocks(), grads.blocks()):
                p -= lr * g
            entry = log.append(step, loss, lr, grads.norm(),
                               time.perf_counter() - t0)
            if log_stream is not None:
                log_stream.write(json.dumps(
                    {k: entry[k] for k in ("step", "loss", "lr", "grad_norm")})
                    + "\n")
            step += 1
    if checkpoint_path:
        save_checkpoint(params, checkpoint_path)
        log.checkpoint_path = str(checkpoint_path)
    return params, log
