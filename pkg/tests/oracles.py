"""Independent reference computations used only by the tests."""

import itertools

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import shortest_path


def all_strings(alphabet, max_len):
    out = []
    for n in range(max_len + 1):
        out += ["".join(p) for p in itertools.product(alphabet, repeat=n)]
    return out


def edit_graph_distances(alphabet, max_len, sources=None):
    """Levenshtein distances as BFS hop counts in the graph of single edits.

    Nodes are all strings over ``alphabet`` up to ``max_len``; an optimal edit
    script between two such strings never needs a longer intermediate string
    or a character outside the alphabet. Returns (index, distance matrix).
    """
    strings = all_strings(alphabet, max_len)
    index = {s: i for i, s in enumerate(strings)}
    rows, cols = [], []
    for s, i in index.items():
        nbrs = set()
        for p in range(len(s)):
            nbrs.add(s[:p] + s[p + 1:])
            for c in alphabet:
                nbrs.add(s[:p] + c + s[p + 1:])
        if len(s) < max_len:
            for p in range(len(s) + 1):
                for c in alphabet:
                    nbrs.add(s[:p] + c + s[p:])
        nbrs.discard(s)
        for t in nbrs:
            rows.append(i)
            cols.append(index[t])
    g = csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(strings), len(strings)))
    src = None if sources is None else [index[s] for s in sources]
    dist = shortest_path(g, unweighted=True, indices=src)
    return index, dist


def finite_difference(f, x, step=1e-5):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x, dtype=np.float64)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + step
        up = f()
        x[idx] = orig - step
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * step)
    return g


def max_relative_error(analytic, numeric, floor=1e-6):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
