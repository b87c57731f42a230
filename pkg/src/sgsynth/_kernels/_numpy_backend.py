"""Vectorized numpy implementation of the Bellman backup kernels."""

from __future__ import annotations

import numpy as np


def backup_dense(t_matrix, v, n_states, n_u, n_w, maximize_u):
    """One backup over all states for a fixed monitor state.

    ``t_matrix`` is the (S*U*W, S) row-stochastic kernel; ``v`` the relabeled
    value vector. The outer player takes max (satisfaction) or min (violation)
    over inputs, the adversary the opposite extreme over its inputs. Ties
    break to the smallest index.
    """
    y = (t_matrix @ v).reshape(n_states, n_u, n_w)
    if maximize_u:
        w_star = np.argmin(y, axis=2)
        inner = np.min(y, axis=2)
        u_star = np.argmax(inner, axis=1)
    else:
        w_star = np.argmax(y, axis=2)
        inner = np.max(y, axis=2)
        u_star = np.argmin(inner, axis=1)
    val = inner[np.arange(n_states), u_star]
    return val, u_star.astype(np.int64), w_star.astype(np.int64)


def backup_sparse(indptr, indices, data, truncated, trunc_value, v, n_states, n_u, n_w, maximize_u):
    """Sparse-row variant; truncated row mass contributes ``trunc_value``.

    Rows are never empty (the absorbing column is always stored), which makes
    the reduceat segmentation exact.
    """
    prod = data * v[indices]
    contrib = np.add.reduceat(prod, indptr[:-1])
    y = (contrib + truncated * trunc_value).reshape(n_states, n_u, n_w)
    if maximize_u:
        w_star = np.argmin(y, axis=2)
        inner = np.min(y, axis=2)
        u_star = np.argmax(inner, axis=1)
    else:
        w_star = np.argmax(y, axis=2)
        inner = np.max(y, axis=2)
        u_star = np.argmin(inner, axis=1)
    val = inner[np.arange(n_states), u_star]
    return val, u_star.astype(np.int64), w_star.astype(np.int64)
