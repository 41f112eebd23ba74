"""Monomial bases in several variables."""

from itertools import combinations_with_replacement

import numpy as np


def monomial_exponents(n_vars, degrees):
    """Exponent rows of all monomials whose total degree is in ``degrees``.

    Ordered by degree, then lexicographically by the variables taking part
    (graded lexicographic order)::

        >>> monomial_exponents(2, [2]).tolist()
        [[2, 0], [1, 1], [0, 2]]
    """
    rows = []
    for d in sorted(set(int(d) for d in degrees)):
        if d < 0:
            raise ValueError("monomial degrees must be nonnegative")
        for combo in combinations_with_replacement(range(n_vars), d):
            e = np.zeros(n_vars, dtype=int)
            for v in combo:
                e[v] += 1
            rows.append(e)
    return np.array(rows, dtype=int).reshape(-1, n_vars)


def eval_monomial_rows(z, exponents):
    """Evaluate monomials at ``z`` of shape ``(..., n_vars)``.

    Returns shape ``(..., M)`` with ``M = len(exponents)``.
    """
    z = np.asarray(z, dtype=float)
    exponents = np.asarray(exponents, dtype=int)
    out = np.ones(z.shape[:-1] + (exponents.shape[0],))
    for i in range(exponents.shape[1]):
        e = exponents[:, i]
        if np.any(e):
            out = out * z[..., i:i + 1] ** e
    return out


def monomial_gradient(z, exponents):
    """Derivatives of the monomials with respect to ``z``.

    Returns shape ``(..., M, n_vars)``.
    """
    z = np.asarray(z, dtype=float)
    exponents = np.asarray(exponents, dtype=int)
    M, nv = exponents.shape
    powers = [z[..., i:i + 1] ** np.maximum(exponents[:, i] - 1, 0) for i in range(nv)]
    full = [z[..., i:i + 1] ** exponents[:, i] for i in range(nv)]
    grad = np.empty(z.shape[:-1] + (M, nv))
    for i in range(nv):
        g = exponents[:, i] * powers[i]
        for k in range(nv):
            if k != i:
                g = g * full[k]
        grad[..., i] = g
    return grad
