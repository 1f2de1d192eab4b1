"""Linear-chain CRF with explicit start/stop states.

``transitions`` is ``(T+2, T+2)``; entry ``[i, j]`` scores moving from tag
``i`` to tag ``j``. Index ``T`` is the start state and ``T+1`` the stop state.
A path ``y`` over ``L`` tokens scores::

    trans[start, y0] + sum_t emis[t, y_t] + sum_t trans[y_{t-1}, y_t] + trans[y_{L-1}, stop]
"""

from __future__ import annotations

import numpy as np
from scipy.special import logsumexp

from .errors import DimensionError, LabelError


def _check(emissions, transitions):
    E = np.asarray(emissions, dtype=np.float64)
    A = np.asarray(transitions, dtype=np.float64)
    if E.ndim != 2 or E.shape[0] < 1:
        raise DimensionError(f"emissions must be (L, T) with L >= 1, got {E.shape}")
    T = E.shape[1]
    if A.shape != (T + 2, T + 2):
        raise DimensionError(f"transitions must be {(T + 2, T + 2)}, got {A.shape}")
    return E, A, T


def _check_tags(tags, L, T):
    tags = np.asarray(tags, dtype=np.int64)
    if tags.shape != (L,):
        raise DimensionError(f"expected {L} gold tags, got {tags.shape}")
    if tags.size and (tags.min() < 0 or tags.max() >= T):
        raise LabelError(f"tag id outside [0, {T})")
    return tags


def path_score(emissions, transitions, tags) -> float:
    E, A, T = _check(emissions, transitions)
    y = _check_tags(tags, E.shape[0], T)
    score = A[T, y[0]] + E[np.arange(len(y)), y].sum() + A[y[-1], T + 1]
    if len(y) > 1:
        score += A[y[:-1], y[1:]].sum()
    return float(score)


def crf_log_partition(emissions, transitions) -> float:
    E, A, T = _check(emissions, transitions)
    alpha = A[T, :T] + E[0]
    for t in range(1, E.shape[0]):
        alpha = logsumexp(alpha[:, None] + A[:T, :T], axis=0) + E[t]
    return float(logsumexp(alpha + A[:T, T + 1]))


def crf_nll(emissions, transitions, gold_tags) -> float:
    return crf_log_partition(emissions, transitions) - path_score(emissions, transitions, gold_tags)


def viterbi(emissions, transitions) -> list[int]:
    """Highest-scoring path; among equal scores the lexicographically smallest.

    A backward max-product pass gives the best completion score of every
    (position, tag); the path is then read off left to right, taking the
    lowest tag that attains the optimum at each step.
    """
    E, A, T = _check(emissions, transitions)
    L = E.shape[0]
    best_tail = np.empty((L, T))
    best_tail[L - 1] = A[:T, T + 1]
    for t in range(L - 2, -1, -1):
        best_tail[t] = (A[:T, :T] + (E[t + 1] + best_tail[t + 1])[None, :]).max(axis=1)
    path = []
    prev = T
    for t in range(L):
        cand = A[prev, :T] + E[t] + best_tail[t]
        prev = int(np.argmax(cand))
        path.append(prev)
    return path


def crf_nll_batch(emissions, mask, tags, transitions):
    """Batched NLL with gradients.

    ``emissions`` is ``(B, L, T)``, ``mask`` ``(B, L)`` with every row a
    prefix of ones (right padding), ``tags`` ``(B, L)``. Returns
    ``(nll (B,), d sum(nll) / d emissions, d sum(nll) / d transitions)``.
    """
    E = np.asarray(emissions, dtype=np.float64)
    A = np.asarray(transitions, dtype=np.float64)
    B, L, T = E.shape
    mask = np.asarray(mask, dtype=bool)
    tags = np.asarray(tags, dtype=np.int64)
    lengths = mask.sum(axis=1)
    if np.any(lengths < 1):
        raise DimensionError("every sequence needs at least one token")
    valid_tags = tags[mask]
    if valid_tags.size and (valid_tags.min() < 0 or valid_tags.max() >= T):
        raise LabelError(f"tag id outside [0, {T})")
    tags = np.where(mask, tags, 0)
    trans = A[:T, :T]
    start, stop = A[T, :T], A[:T, T + 1]

    alphas = np.empty((L, B, T))
    alpha = start[None, :] + E[:, 0]
    alphas[0] = alpha
    for t in range(1, L):
        nxt = logsumexp(alpha[:, :, None] + trans[None], axis=1) + E[:, t]
        alpha = np.where(mask[:, t, None], nxt, alpha)
        alphas[t] = alpha
    log_z = logsumexp(alpha + stop[None, :], axis=1)

    betas = np.empty((L, B, T))
    beta = np.broadcast_to(stop, (B, T)).copy()
    betas[L - 1] = beta
    for t in range(L - 2, -1, -1):
        nxt = logsumexp(trans[None] + (E[:, t + 1] + beta)[:, None, :], axis=2)
        beta = np.where(mask[:, t + 1, None], nxt, beta)
        betas[t] = beta

    rows = np.arange(B)
    gold = start[tags[:, 0]] + E[rows, 0, tags[:, 0]]
    for t in range(1, L):
        step = trans[tags[:, t - 1], tags[:, t]] + E[rows, t, tags[:, t]]
        gold = gold + np.where(mask[:, t], step, 0.0)
    last = tags[rows, lengths - 1]
    gold = gold + stop[last]
    nll = log_z - gold

    # node marginals, zeroed on padding
    marg = np.exp(alphas.transpose(1, 0, 2) + betas.transpose(1, 0, 2) - log_z[:, None, None])
    marg *= mask[:, :, None]
    grad_E = marg.copy()
    b_idx, t_idx = np.nonzero(mask)
    grad_E[b_idx, t_idx, tags[b_idx, t_idx]] -= 1.0

    grad_A = np.zeros_like(A)
    grad_A[T, :T] = marg[:, 0].sum(axis=0)
    np.add.at(grad_A[T], tags[:, 0], -1.0)
    last_marg = marg[rows, lengths - 1]
    grad_A[:T, T + 1] = last_marg.sum(axis=0)
    np.add.at(grad_A[:, T + 1], last, -1.0)
    for t in range(1, L):
        m = mask[:, t]
        if not m.any():
            continue
        pair = np.exp(alphas[t - 1][:, :, None] + trans[None] + (E[:, t] + betas[t])[:, None, :]
                      - log_z[:, None, None])
        grad_A[:T, :T] += pair[m].sum(axis=0)
        np.add.at(grad_A, (tags[m, t - 1], tags[m, t]), -1.0)
    return nll, grad_E, grad_A
