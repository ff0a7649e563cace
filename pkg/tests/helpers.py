"""Shared oracles for the test suite, coded independently of the package."""
import numpy as np

import dflsim.topology as tp


def dense_lambda2(a: np.ndarray) -> float:
    """Dense-eigendecomposition oracle for the deflated shifted operator.

    Builds (A + 3I)/4 - u u^T with u = ones/sqrt(n) explicitly and takes the
    top eigenvalue by full symmetric eigendecomposition, then undoes the
    affine shift.  No power iteration, no deflation tricks.
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    u = np.ones((n, 1)) / np.sqrt(n)
    b = (a + 3.0 * np.eye(n)) / 4.0 - u @ u.T
    return 4.0 * float(np.linalg.eigvalsh(b)[-1]) - 3.0


def mh_mixing(kind: str, n: int) -> tp.MixingMatrix:
    graph = tp.build_graph(kind, n)
    return tp.build_mixing_matrix(graph, tp.MixingScheme.METROPOLIS_HASTINGS)


def consensus_weight_matrix(lam: float, n: int) -> np.ndarray:
    """Symmetric matrix with eigenvalue 1 on ones/sqrt(n) and lam elsewhere.

    Gives exact control over the second eigenvalue for spectral tests.
    """
    j = np.ones((n, n)) / n
    return lam * (np.eye(n) - j) + j
