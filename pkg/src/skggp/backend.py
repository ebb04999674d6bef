"""Kernel backend selection.

The compiled extension is used when it imports; otherwise, or when
``SKGGP_PURE_PYTHON=1`` is set, the pure-Python kernels are used. Both
produce identical results.
"""

from __future__ import annotations

import os

import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # pragma: no cover - depends on the build
    _ckernels = None


class PythonBackend:
    name = "python"

    def simulate(self, arrays, durations, ordering, group, group_cap):
        return _pykernels.simulate(arrays, durations, ordering.function, group.function,
                                   group_cap)

    def eval_rows(self, tree, attrs: np.ndarray) -> np.ndarray:
        ops, consts = tree.program
        return _pykernels.eval_rows(ops, consts, attrs)

    def competition_ranks(self, values: np.ndarray, seg_ptr: np.ndarray) -> np.ndarray:
        return _pykernels.competition_ranks(values, seg_ptr)

    def nearest(self, db: np.ndarray, queries: np.ndarray):
        return _pykernels.nearest(db, queries)

    def rank_matrix(self, trees, attrs: np.ndarray, seg_ptr: np.ndarray) -> np.ndarray:
        out = np.empty((len(trees), attrs.shape[0]), dtype=np.int32)
        for i, t in enumerate(trees):
            out[i] = self.competition_ranks(self.eval_rows(t, attrs), seg_ptr)
        return out

    def knee_cut(self, sorted_priorities) -> int:
        return _pykernels.knee_cut([float(x) for x in sorted_priorities])

    def enumerate_groups(self, dem, act, avail, cap, n_act):
        return _pykernels.enumerate_groups(dem, act, avail, cap)


class CythonBackend:
    name = "cython"

    def simulate(self, arrays, durations, ordering, group, group_cap):
        oo, oc = ordering.program
        go, gc = group.program
        return _ckernels.simulate(arrays, durations, oo, oc, go, gc, group_cap)

    def eval_rows(self, tree, attrs: np.ndarray) -> np.ndarray:
        ops, consts = tree.program
        return _ckernels.eval_rows(ops, consts, attrs)

    def competition_ranks(self, values: np.ndarray, seg_ptr: np.ndarray) -> np.ndarray:
        return _ckernels.competition_ranks(np.ascontiguousarray(values, dtype=np.float64),
                                           seg_ptr)

    def nearest(self, db: np.ndarray, queries: np.ndarray):
        return _ckernels.nearest(db, queries)

    def rank_matrix(self, trees, attrs: np.ndarray, seg_ptr: np.ndarray) -> np.ndarray:
        if not trees:
            return np.empty((0, attrs.shape[0]), dtype=np.int32)
        progs = [t.program for t in trees]
        ptr = np.zeros(len(progs) + 1, dtype=np.int64)
        np.cumsum([len(ops) for ops, _ in progs], out=ptr[1:])
        ops = np.concatenate([ops for ops, _ in progs])
        consts = np.concatenate([c for _, c in progs])
        return _ckernels.rank_matrix(ops, consts, ptr, attrs, seg_ptr)

    def knee_cut(self, sorted_priorities) -> int:
        return _ckernels.knee_cut(np.ascontiguousarray(sorted_priorities, dtype=np.float64))

    def enumerate_groups(self, dem, act, avail, cap, n_act):
        return _ckernels.enumerate_groups(
            np.ascontiguousarray(dem, dtype=np.int32).reshape(len(act), len(avail)),
            np.ascontiguousarray(act, dtype=np.int32),
            np.ascontiguousarray(avail, dtype=np.int32), cap, n_act)


def compiled_available() -> bool:
    return _ckernels is not None


def get_backend(name: str | None = None):
    """Backend by name (``"python"``/``"cython"``), or the default when ``None``."""
    if name is None:
        name = "python" if (_ckernels is None or os.environ.get("SKGGP_PURE_PYTHON") == "1") \
            else "cython"
    if name == "python":
        return PythonBackend()
    if name == "cython":
        if _ckernels is None:
            raise ImportError("compiled kernels are not built; run `pip install -e .`")
        return CythonBackend()
    raise ValueError(f"unknown backend {name!r}")


default = get_backend()
