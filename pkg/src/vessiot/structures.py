"""Solvable structures: verification, numeric symmetry search, and the
group-invariance catalyst that turns chain symmetry conditions into
constraints on the unknown reduction coefficients.

Ordering convention: a structure list (X_1, ..., X_k) is verified level by
level as L_{X_i}(Sp{X_1,...,X_{i-1}} ⊕ D) ⊂ Sp{X_1,...,X_{i-1}} ⊕ D, which is
the order the worked symmetry lists satisfy; chain integration then proceeds
from X_k down to X_1.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .expr import (
    Chart, DEFAULT_POLICY, ExprError, Expression, ONE, Sym, ZERO,
    ZeroTestPolicy, add, bind_unknowns, evaluate, free_symbols,
    is_identically_zero, mul, pow_, rat, ratsimp, SingularEvaluationError,
)
from .forms import (
    DifferentialForm, Distribution, VectorField, dual_coframe,
    exterior_derivative, interior_product, lie_bracket, lie_derivative,
    sample_points, wedge, wedge_all,
)
from .jets import PdeProblem, SECOND_ORDER_YY, build_vessiot_distribution
from .linalg import RowReduction, leaf_count, solve_in_span
from .reduction import (
    AnsatzCoefficients, ReductionCandidate, differential_residuals,
    formal_unknown_chart, _phi_forms, _on_chart, step1_closed_form,
)
from .jets import build_contact_system, ContactSystem


class IndependenceError(ExprError):
    pass


# ---------------------------------------------------------------------------
# symmetry and structure verification


def verify_symmetry(x: VectorField, d: Distribution,
                    policy: ZeroTestPolicy = DEFAULT_POLICY):
    """(is_symmetry, is_trivial, failing bracket or None)."""
    trivial = d.span_contains(x, policy)
    for g in d.generators:
        br = lie_bracket(x, g).simplified()
        if not d.span_contains(br, policy):
            return False, trivial, br
    return True, trivial, None


@dataclass
class StructureLevel:
    index: int
    passed: bool
    detail: str = ""


@dataclass
class StructureReport:
    levels: list
    nondegenerate: Optional[bool] = None

    @property
    def passed(self) -> bool:
        return all(l.passed for l in self.levels) and self.nondegenerate is not False

    def first_failure(self) -> Optional[StructureLevel]:
        for l in self.levels:
            if not l.passed:
                return l
        return None


def verify_solvable_structure(xs: Sequence[VectorField], d: Distribution,
                              omega: Optional[DifferentialForm] = None,
                              policy: ZeroTestPolicy = DEFAULT_POLICY) -> StructureReport:
    """Check every chain level and the nondegeneracy contraction.

    Level i requires X_i to be a symmetry of Sp{X_1..X_{i-1}} ⊕ D.
    """
    chart = d.chart
    levels = []
    for i, x in enumerate(xs):
        gens = list(xs[:i]) + list(d.generators)
        span = Distribution(gens, policy, check=False)
        ok = True
        detail = ""
        for w in gens:
            br = lie_bracket(x, w).simplified()
            if not span.span_contains(br, policy):
                ok = False
                detail = f"[X_{i + 1}, {w!r}] leaves the span"
                break
        levels.append(StructureLevel(i + 1, ok, detail))
        if not ok:
            break
    nondeg = None
    if omega is None:
        try:
            omega = wedge_all(dual_coframe(d, policy))
        except ExprError:
            omega = None
    if omega is not None and len(xs) == omega.degree:
        scalar = omega
        for x in xs:
            scalar = interior_product(x, scalar)
        nondeg = not is_identically_zero(scalar.coefficient(), policy=policy,
                                         excluded=chart.excluded)
    return StructureReport(levels, nondeg)


# ---------------------------------------------------------------------------
# numeric search for symmetries of a distribution


@dataclass
class SymmetryAnsatz:
    """Per-component coefficients are linear combinations of monomials in the
    chart coordinates up to `degree`, plus any extra basis functions."""

    degree: int = 2
    extra: tuple = ()

    def basis(self, chart: Chart) -> list:
        names = chart.names[:chart.n_base]
        out = [ONE]
        for d in range(1, self.degree + 1):
            for combo in itertools.combinations_with_replacement(names, d):
                out.append(mul(*[Sym(n) for n in combo]))
        out.extend(self.extra)
        return out


def _rationalize(v: float, limit: int = 64) -> Fraction:
    return Fraction(v).limit_denominator(limit)


def _rref_rows(mat: np.ndarray, tol: float = 1e-8) -> np.ndarray:
    """Reduced row echelon form of the row space (canonical nice basis)."""
    m = mat.copy().astype(float)
    rows, cols = m.shape
    r = 0
    for c in range(cols):
        if r == rows:
            break
        piv = r + int(np.argmax(np.abs(m[r:, c])))
        if abs(m[piv, c]) < tol:
            continue
        m[[r, piv]] = m[[piv, r]]
        m[r] /= m[r, c]
        for rr in range(rows):
            if rr != r and abs(m[rr, c]) > tol:
                m[rr] -= m[rr, c] * m[r]
        r += 1
    return m[:r]


def search_symmetries(d: Distribution, ansatz: SymmetryAnsatz,
                      policy: ZeroTestPolicy = DEFAULT_POLICY,
                      include_trivial: bool = False) -> list:
    """Solve the linear determining system for ansatz symmetries of d.

    Assembles residual rows (bracket components after span projection) at
    >= 3x unknown-count sample points, extracts the numeric nullspace,
    rationalizes a canonical basis and re-verifies each candidate
    symbolically.  An empty result is a valid outcome.
    """
    chart = d.chart
    nb = chart.n_base
    basis = ansatz.basis(chart)
    unknowns = [(i, m) for i in range(nb) for m in range(len(basis))]
    nun = len(unknowns)
    # bracket of each elementary ansatz field with each generator
    elem_brackets = {}
    for i in range(nb):
        for m, bfun in enumerate(basis):
            e = VectorField(chart, {chart.names[i]: bfun})
            elem_brackets[(i, m)] = [lie_bracket(e, g) for g in d.generators]
    npts = max(3 * nun // (len(d.generators) * max(nb - d.rank, 1)) + 2, 12)
    pts = sample_points(chart, npts, policy)
    rows = []
    prec = policy.precision_bits
    for p in pts:
        try:
            gen_vals = np.array([[float(evaluate(c, p.values, prec))
                                  for c in g.comps] for g in d.generators])
        except SingularEvaluationError:
            continue
        # orthogonal projector onto the complement of span(D) at p
        q, _ = np.linalg.qr(gen_vals.T)
        proj = np.eye(nb) - q @ q.T
        for j in range(len(d.generators)):
            block = np.zeros((nb, nun))
            ok = True
            for col, key in enumerate(unknowns):
                br = elem_brackets[key][j]
                try:
                    vec = np.array([float(evaluate(c, p.values, prec))
                                    for c in br.comps])
                except SingularEvaluationError:
                    ok = False
                    break
                block[:, col] = proj @ vec
            if ok:
                rows.append(block)
    if not rows:
        return []
    big = np.vstack(rows)
    _, s, vt = np.linalg.svd(big)
    tol = max(big.shape) * (s[0] if len(s) else 1.0) * 1e-10
    null = vt[sum(s > max(tol, 1e-9)):]
    if null.size == 0:
        return []
    nice = _rref_rows(null)
    out = []
    for rowvec in nice:
        comps = [ZERO] * nb
        for col, (i, m) in enumerate(unknowns):
            q = _rationalize(rowvec[col])
            if q != 0:
                comps[i] = add(comps[i], mul(rat(q), basis[m]))
        cand = VectorField(chart, comps).simplified()
        if all(c == ZERO for c in cand.comps):
            continue
        ok, trivial, _ = verify_symmetry(cand, d, policy)
        if ok and (include_trivial or not trivial):
            out.append(cand)
    return out


def in_symmetry_span(x: VectorField, found: Sequence[VectorField],
                     d: Distribution,
                     policy: ZeroTestPolicy = DEFAULT_POLICY) -> bool:
    """Is x in the function span of the found symmetries plus d (trivial part)?"""
    fields = list(found) + list(d.generators)
    vectors = [list(f.comps) for f in fields]
    return solve_in_span(vectors, list(x.comps),
                         excluded=d.chart.excluded, policy=policy) is not None


def find_solvable_order(xs: Sequence[VectorField], d: Distribution,
                        omega: Optional[DifferentialForm] = None,
                        policy: ZeroTestPolicy = DEFAULT_POLICY):
    """Search permutations of xs for one passing every chain level.

    Returns (ordered fields, report) or (None, last report).  Orders that keep
    the original positions are preferred (stable search).
    """
    rep = verify_solvable_structure(xs, d, omega, policy)
    if rep.passed:
        return list(xs), rep
    last = rep
    for perm in itertools.permutations(range(len(xs))):
        if list(perm) == list(range(len(xs))):
            continue
        cand = [xs[i] for i in perm]
        rep = verify_solvable_structure(cand, d, omega, policy)
        if rep.passed:
            return cand, rep
        last = rep
    return None, last


# ---------------------------------------------------------------------------
# group-invariance catalyst (symmetry conditions on the unknown reduction)


def _formal_omega_bar(p: PdeProblem, chart: Chart):
    cs = build_contact_system(p)
    thetas = [_on_chart(t, chart) for t in cs.thetas]
    psis = [_on_chart(s, chart) for s in cs.psis]
    a1, b1 = Sym("a1"), Sym("b1")
    coeffs = AnsatzCoefficients(a1, b1, b1, step1_closed_form(p, a1, b1))
    phis = _phi_forms(ContactSystem(thetas, psis), coeffs)
    return wedge_all(thetas + phis), phis


def _lambda_eliminated_conditions(l_form: DifferentialForm,
                                  base: DifferentialForm,
                                  policy: ZeroTestPolicy) -> list:
    """Residuals equivalent to L = λ·base for some function λ.

    All 2x2 minors of the stacked component vectors are emitted, so the
    constraint set stays faithful under any later binding of the unknowns
    (a single reference component could vanish after substitution).
    """
    keys = sorted(set(base.comps) | set(l_form.comps))
    if not keys:
        return []
    out = []
    seen = set()
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            ka, kb = keys[a], keys[b]
            resid = ratsimp(add(
                mul(l_form.comps.get(ka, ZERO), base.comps.get(kb, ZERO)),
                mul(rat(-1), l_form.comps.get(kb, ZERO),
                    base.comps.get(ka, ZERO))))
            if resid != ZERO and resid not in seen:
                seen.add(resid)
                out.append(resid)
    return out


def impose_symmetry_conditions(p: PdeProblem, xs: Sequence[VectorField],
                               policy: ZeroTestPolicy = DEFAULT_POLICY):
    """First-order constraints on the unknowns a1, b1 from the chain symmetry
    conditions L_{X_i}(X_{i-1} ... X_1 ⌟ Ω) = λ_i (...), λ eliminated.

    Returns a list of per-level constraint lists over the formal alphabet.
    """
    if p.kind != SECOND_ORDER_YY:
        raise ExprError("symmetry catalyst applies to the u_yy = F class")
    chart = formal_unknown_chart(p)
    omega, _ = _formal_omega_bar(p, chart)
    xs_ext = [VectorField(chart, list(x.comps)) for x in xs]
    conditions = []
    current = omega
    for i, x in enumerate(xs_ext):
        lx = lie_derivative(x, current).simplified()
        conditions.append(_lambda_eliminated_conditions(lx, current, policy))
        if i + 1 < len(xs_ext):
            current = interior_product(x, current).simplified()
            if current.is_zero_structurally():
                raise IndependenceError(
                    f"contraction by X_{i + 1} annihilated the chain form")
    return conditions


def constraints_force_zero(constraints: Sequence[Expression],
                           targets: Sequence[str], chart: Chart,
                           policy: ZeroTestPolicy = DEFAULT_POLICY) -> bool:
    """Do the constraints, linear in the target partial symbols, force them
    all to vanish?  Decided by numeric rank of the coefficient matrix."""
    rows = []
    for c in constraints:
        rows.append([ratsimp(_coeff_of_symbol(c, t)) for t in targets])
    if not rows:
        return False
    other = sorted(set().union(*[free_symbols(c) for c in constraints])
                   | set(chart.names))
    rng = random.Random(policy.seed ^ 0xA11CE)
    best = 0
    for _ in range(8):
        assign = {}
        for n in other:
            assign[n] = Fraction(rng.randint(-20, 20), rng.randint(1, 5))
        try:
            m = np.array([[float(evaluate(c, assign, policy.precision_bits))
                           for c in row] for row in rows])
        except SingularEvaluationError:
            continue
        best = max(best, np.linalg.matrix_rank(m, tol=1e-8))
    return best >= len(targets)


def _coeff_of_symbol(e: Expression, name: str) -> Expression:
    from .expr import diff, substitute_names
    d = diff(e, name)
    if free_symbols(d) & {name}:
        raise ExprError(f"constraint is not linear in {name}")
    return d


def satisfies_conditions(conditions, chart: Chart,
                         a1: Expression, b1: Expression,
                         policy: ZeroTestPolicy = DEFAULT_POLICY) -> bool:
    """Substitute concrete (a1, b1) with their honest partials into every
    derived constraint and zero-test."""
    for level in conditions:
        for c in level:
            bound = bind_unknowns(c, chart, {"a1": a1, "b1": b1})
            if not is_identically_zero(bound, policy=policy,
                                       excluded=chart.excluded):
                return False
    return True


# ---------------------------------------------------------------------------
# the closed constraint form


def vertical_part(p: PdeProblem, x: VectorField) -> VectorField:
    """Component of x in ker Ω_theta = the Vessiot span (psi-dual frame)."""
    cs = build_contact_system(p)
    v = build_vessiot_distribution(p).generators
    out = None
    for psi, vi in zip(cs.psis, v):
        c = interior_product(x, psi).coefficient()
        term = vi.scaled(c)
        out = term if out is None else out + term
    return out.simplified()


def closed_constraint_form(p: PdeProblem, xs: Sequence[VectorField],
                           candidate: ReductionCandidate,
                           policy: ZeroTestPolicy = DEFAULT_POLICY):
    """The normalized 1-form ω = X4 ⌟ X3 ⌟ X2 ⌟ X1 ⌟ Ω / Ω(X1..X5) for the
    concrete candidate, plus its closedness verdict, span{phi} membership and
    agreement with the vertical-component shortcut."""
    omega_bar = candidate.omega_bar()
    contracted = omega_bar
    for x in xs[:-1]:
        contracted = interior_product(x, contracted)
    denom = ratsimp(interior_product(xs[-1], contracted).coefficient())
    ex = p.chart.excluded
    if is_identically_zero(denom, policy=policy, excluded=ex):
        raise IndependenceError("Ω(X_1,...,X_k) vanishes; structure degenerate")
    w = contracted.scaled(pow_(denom, -1)).simplified()
    closed = exterior_derivative(w).simplified().is_zero(policy, ex)
    phis = candidate.phis
    nb = p.chart.n_base
    vectors = [[f.comps.get((i,), ZERO) for i in range(nb)] for f in phis]
    target = [w.comps.get((i,), ZERO) for i in range(nb)]
    span_coeffs = solve_in_span(vectors, target, excluded=ex, policy=policy)
    # vertical-component shortcut
    xv4 = vertical_part(p, xs[3])
    xv5 = vertical_part(p, xs[4])
    omega_phi = candidate.omega_phi()
    denom2 = ratsimp(interior_product(
        xv5, interior_product(xv4, omega_phi)).coefficient())
    shortcut = None
    agree = None
    if not is_identically_zero(denom2, policy=policy, excluded=ex):
        shortcut = interior_product(xv4, omega_phi).scaled(
            pow_(denom2, -1)).simplified()
        agree = (w - shortcut).simplified().is_zero(policy, ex)
    return {
        "form": w,
        "closed": closed,
        "in_phi_span": span_coeffs is not None,
        "span_coefficients": span_coeffs,
        "shortcut": shortcut,
        "routes_agree": agree,
    }
