"""Fraction-free linear algebra over symbolic expressions.

Row reduction uses cross-multiplication only (no division during elimination),
with pivots chosen by least leaf count among entries that survive a zero test.
Divisions appear only in back substitution and are normalized through the
rational simplifier.
"""

from __future__ import annotations

from typing import Optional, Sequence

from .expr import (
    DEFAULT_POLICY, Expression, ONE, RAT_M1, ZERO, ZeroTestPolicy, add,
    is_identically_zero, mul, numerator_is_zero, pow_, rat, ratsimp,
)

# cheap policy for pivot viability: a handful of sample evaluations is enough
# to certify "not identically zero"
_PIVOT_POLICY = ZeroTestPolicy(samples=6)


class LinearSolveError(Exception):
    pass


def leaf_count(e: Expression) -> int:
    if e.kind in ("rat", "sym"):
        return 1
    if e.kind == "func":
        return 1 + leaf_count(e.arg)
    if e.kind == "pow":
        return 1 + leaf_count(e.base)
    if e.kind == "mul":
        return sum(leaf_count(f) for f in e.factors)
    return sum(leaf_count(t) for t in e.terms)


def _is_zero(e: Expression, excluded=()) -> bool:
    if e == ZERO or numerator_is_zero(e):
        return True
    return is_identically_zero(e, policy=_PIVOT_POLICY, excluded=excluded)


class RowReduction:
    """Echelon reduction of [A | B] over expressions.

    Attributes after construction: rows (reduced augmented matrix),
    pivots (list of (row, col) pairs into A), rank.
    """

    def __init__(self, a: Sequence[Sequence[Expression]],
                 b: Optional[Sequence[Sequence[Expression]]] = None,
                 excluded=()):
        m = len(a)
        self.n = len(a[0]) if m else 0
        if b is None:
            b = [[] for _ in range(m)]
        self.width = self.n + (len(b[0]) if m else 0)
        rows = [list(ra) + list(rb) for ra, rb in zip(a, b)]
        self.rows = [[ratsimp(x) for x in r] for r in rows]
        self.excluded = tuple(excluded)
        self.pivots = []
        self._reduce()
        self.rank = len(self.pivots)

    def _reduce(self):
        """Gauss-Jordan with full pivoting: the pivot is the surviving entry
        of least leaf count anywhere in the unreduced block, so unit entries
        win and generators come out sparse."""
        rows = self.rows
        m = len(rows)
        used_rows: set = set()
        used_cols: set = set()
        while True:
            best = None
            best_size = None
            for r in range(m):
                if r in used_rows:
                    continue
                for c in range(self.n):
                    if c in used_cols:
                        continue
                    e = rows[r][c]
                    if e == ZERO:
                        continue
                    if _is_zero(e, self.excluded):
                        rows[r][c] = ZERO
                        continue
                    sz = (leaf_count(e), 0 if e.kind == "rat" else 1, c)
                    if best is None or sz < best_size:
                        best, best_size = (r, c), sz
                    if sz[:2] == (1, 0):
                        break
                if best is not None and best_size[:2] == (1, 0):
                    break
            if best is None:
                break
            rp, cp = best
            piv = rows[rp][cp]
            for r in range(m):
                if r == rp:
                    continue
                e = rows[r][cp]
                if e == ZERO:
                    continue
                rows[r] = [
                    ratsimp(add(mul(piv, rows[r][j]),
                                mul(rat_neg(e), rows[rp][j])))
                    for j in range(self.width)
                ]
            self.pivots.append((rp, cp))
            used_rows.add(rp)
            used_cols.add(cp)
            if len(used_rows) == m or len(used_cols) == self.n:
                break

    def consistent_column(self, k: int) -> bool:
        """Is the k-th extra column in the span of A's columns?"""
        piv_rows = {r for r, _ in self.pivots}
        for r in range(len(self.rows)):
            if r in piv_rows:
                continue
            if not _is_zero(self.rows[r][self.n + k], self.excluded):
                return False
        return True

    def solve_column(self, k: int) -> Optional[list]:
        """Particular solution of A x = b_k with free variables set to zero.

        Full Gauss-Jordan leaves each pivot column zero outside its own row,
        so every pivot variable is determined directly.
        """
        if not self.consistent_column(k):
            return None
        x = [ZERO] * self.n
        for r, c in self.pivots:
            x[c] = ratsimp(mul(self.rows[r][self.n + k],
                               pow_(self.rows[r][c], -1)))
        return x

    def nullspace(self) -> list:
        """Basis of ker A (one vector per free column, free variable = 1)."""
        piv_cols = {c for _, c in self.pivots}
        free = [c for c in range(self.n) if c not in piv_cols]
        basis = []
        for fc in free:
            v = [ZERO] * self.n
            v[fc] = ONE
            for r, c in self.pivots:
                v[c] = ratsimp(mul(rat_neg(self.rows[r][fc]),
                                   pow_(self.rows[r][c], -1)))
            basis.append(v)
        return basis


def rat_neg(e: Expression) -> Expression:
    return mul(RAT_M1, e)


def solve_linear_system(a, b, excluded=()) -> Optional[list]:
    """Solve A x = b (b a vector); None when inconsistent."""
    red = RowReduction(a, [[bi] for bi in b], excluded)
    return red.solve_column(0)


def nullspace(a, excluded=()) -> list:
    return RowReduction(a, excluded=excluded).nullspace()


def solve_in_span(vectors: Sequence[Sequence[Expression]],
                  target: Sequence[Expression],
                  excluded=(),
                  policy: ZeroTestPolicy = DEFAULT_POLICY) -> Optional[list]:
    """Coefficients c with sum c_i vectors_i = target, verified by residual
    zero tests; None when the target leaves the span."""
    a = [[vectors[j][i] for j in range(len(vectors))]
         for i in range(len(target))]
    coeffs = solve_linear_system(a, list(target), excluded)
    if coeffs is None:
        return None
    for i in range(len(target)):
        resid = add(target[i], *[
            mul(rat(-1), coeffs[j], vectors[j][i]) for j in range(len(vectors))
        ])
        if not is_identically_zero(resid, policy=policy, excluded=excluded):
            return None
    return coeffs
