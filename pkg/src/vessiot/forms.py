"""Differential forms, vector fields and distributions on a single chart.

Sign conventions: the interior product contracts the first slot, and the
exterior derivative acts as d(f dx^I) = df ∧ dx^I.  Charts may carry dependent
symbols (opaque unknown functions of the base coordinates); their differentials
expand through the chart's registered formal partials, so d and Lie derivatives
of coefficients containing unknowns produce first-order partial symbols.
"""

from __future__ import annotations

import itertools
import random
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .expr import (
    Chart, DEFAULT_POLICY, ExprError, Expression, Fraction, ONE, RAT_M1,
    SamplePoint, SingularEvaluationError, Sym, ZERO, ZeroTestPolicy, add,
    diff, draw_sample, evaluate, is_identically_zero, mul, pow_, rat, ratsimp,
    to_text,
)
from .linalg import RowReduction, rat_neg, solve_in_span

__all__ = [
    "DifferentialForm", "VectorField", "Distribution", "FrobeniusReport",
    "total_diff", "wedge", "wedge_all", "exterior_derivative",
    "interior_product", "lie_bracket", "lie_derivative",
    "is_frobenius_codistribution", "is_frobenius_distribution",
    "annihilator", "dual_coframe", "d_coords", "zero_form", "one_form",
    "form_from_function", "sample_points", "DependentFormsError",
    "RankDeficiencyError",
]


class DependentFormsError(ExprError):
    pass


class RankDeficiencyError(ExprError):
    pass


def total_diff(f: Expression, base_name: str, chart: Chart) -> Expression:
    """d/d(base) including the chart's dependent-symbol chain rules."""
    out = diff(f, base_name)
    for dep, partials in chart.dependents.items():
        df_dep = diff(f, dep)
        if df_dep != ZERO:
            out = add(out, mul(df_dep, Sym(partials[base_name])))
        for pname in partials.values():
            if diff(f, pname) != ZERO:
                raise ExprError(
                    f"second-order formal partial of {dep!r} required; "
                    "only first-order unknowns are supported")
    return out


class DifferentialForm:
    """Degree-k form as a sparse map from increasing index tuples to
    coefficient expressions (indices into the chart's base coordinates)."""

    __slots__ = ("chart", "degree", "comps")

    def __init__(self, chart: Chart, degree: int,
                 comps: Optional[Mapping[tuple, Expression]] = None,
                 simplify: bool = False):
        if degree < 0:
            raise ExprError("form degree must be nonnegative")
        self.chart = chart
        self.degree = degree
        out = {}
        for key, c in (comps or {}).items():
            key = tuple(key)
            if len(key) != degree or list(key) != sorted(set(key)):
                raise ExprError(f"component key {key} is not strictly increasing")
            if simplify:
                c = ratsimp(c)
            if c != ZERO:
                out[key] = c
        self.comps = out

    # -- construction helpers ------------------------------------------------

    def is_zero_structurally(self) -> bool:
        return not self.comps

    def coefficient(self, *indices) -> Expression:
        return self.comps.get(tuple(indices), ZERO)

    def map_coefficients(self, fn) -> "DifferentialForm":
        return DifferentialForm(
            self.chart, self.degree,
            {k: fn(c) for k, c in self.comps.items()})

    def simplified(self) -> "DifferentialForm":
        return self.map_coefficients(ratsimp)

    # -- algebra ---------------------------------------------------------

    def __add__(self, other: "DifferentialForm") -> "DifferentialForm":
        self._check_compatible(other)
        out = dict(self.comps)
        for k, c in other.comps.items():
            s = add(out.get(k, ZERO), c)
            if s == ZERO:
                out.pop(k, None)
            else:
                out[k] = s
        return DifferentialForm(self.chart, self.degree, out)

    def __sub__(self, other: "DifferentialForm") -> "DifferentialForm":
        return self + other.scaled(RAT_M1)

    def scaled(self, c) -> "DifferentialForm":
        c = c if isinstance(c, Expression) else rat(c)
        if c == ZERO:
            return DifferentialForm(self.chart, self.degree)
        return DifferentialForm(self.chart, self.degree,
                                {k: mul(c, v) for k, v in self.comps.items()})

    def __mul__(self, c):
        return self.scaled(c)

    __rmul__ = __mul__

    def __neg__(self):
        return self.scaled(RAT_M1)

    def _check_compatible(self, other):
        if self.chart != other.chart or self.degree != other.degree:
            raise ExprError("incompatible forms")

    def __eq__(self, other):
        if not isinstance(other, DifferentialForm):
            return NotImplemented
        return (self.chart == other.chart and self.degree == other.degree
                and self.comps == other.comps)

    def __hash__(self):
        return hash((self.chart, self.degree, tuple(sorted(self.comps.items(),
                                                           key=lambda kv: kv[0]))))

    def __call__(self, *fields: "VectorField") -> Expression:
        if len(fields) != self.degree:
            raise ExprError("wrong number of field arguments")
        out = self
        for x in fields:
            out = interior_product(x, out)
        return out.coefficient()

    def __repr__(self):
        return self.render()

    def render(self) -> str:
        if not self.comps:
            return "0"
        names = self.chart.names
        parts = []
        for key in sorted(self.comps):
            basis = "∧".join(f"d_{names[i]}" for i in key) or "1"
            c = self.comps[key]
            cs = to_text(c)
            if c != ONE or not key:
                parts.append(f"({cs})*{basis}" if key else cs)
            else:
                parts.append(basis)
        return " + ".join(parts)

    def is_zero(self, policy: ZeroTestPolicy = DEFAULT_POLICY,
                excluded=()) -> bool:
        ex = tuple(excluded) + tuple(self.chart.excluded)
        return all(is_identically_zero(c, policy=policy, excluded=ex)
                   for c in self.comps.values())


def zero_form(chart: Chart, degree: int) -> DifferentialForm:
    return DifferentialForm(chart, degree)


def form_from_function(chart: Chart, f: Expression) -> DifferentialForm:
    return DifferentialForm(chart, 0, {(): f})


def one_form(chart: Chart, comps: Mapping[str, Expression]) -> DifferentialForm:
    return DifferentialForm(chart, 1, {
        (chart.index(n),): c for n, c in comps.items()})


def d_coords(chart: Chart, *names: str) -> list:
    """Coordinate differentials d(name) as 1-forms."""
    out = []
    for n in names:
        i = chart.index(n)
        if i >= n_base(chart):
            raise ExprError(f"{n!r} is a dependent symbol; no basis differential")
        out.append(DifferentialForm(chart, 1, {(i,): ONE}))
    return out


def n_base(chart: Chart) -> int:
    return getattr(chart, "n_base", chart.dim)


def _merge_keys(a: tuple, b: tuple):
    """Merge two strictly increasing tuples; (sign, merged) or None."""
    out = []
    i = j = 0
    sign = 1
    while i < len(a) and j < len(b):
        if a[i] == b[j]:
            return None
        if a[i] < b[j]:
            out.append(a[i])
            i += 1
        else:
            # b[j] jumps over the remaining len(a)-i entries of a
            if (len(a) - i) % 2:
                sign = -sign
            out.append(b[j])
            j += 1
    out.extend(a[i:])
    out.extend(b[j:])
    return sign, tuple(out)


def wedge(a: DifferentialForm, b: DifferentialForm) -> DifferentialForm:
    if a.chart != b.chart:
        raise ExprError("wedge of forms on different charts")
    deg = a.degree + b.degree
    chart = a.chart
    if deg > n_base(chart):
        return DifferentialForm(chart, deg)
    out: dict = {}
    for ka, ca in a.comps.items():
        for kb, cb in b.comps.items():
            m = _merge_keys(ka, kb)
            if m is None:
                continue
            sign, key = m
            term = mul(ca, cb) if sign > 0 else mul(RAT_M1, ca, cb)
            s = add(out.get(key, ZERO), term)
            if s == ZERO:
                out.pop(key, None)
            else:
                out[key] = s
    return DifferentialForm(chart, deg, out)


def wedge_all(forms: Sequence[DifferentialForm]) -> DifferentialForm:
    it = iter(forms)
    out = next(it)
    for f in it:
        out = wedge(out, f)
    return out


def exterior_derivative(a: DifferentialForm) -> DifferentialForm:
    chart = a.chart
    nb = n_base(chart)
    out: dict = {}
    for key, c in a.comps.items():
        for i in range(nb):
            dc = total_diff(c, chart.names[i], chart)
            if dc == ZERO:
                continue
            m = _merge_keys((i,), key)
            if m is None:
                continue
            sign, k2 = m
            term = dc if sign > 0 else mul(RAT_M1, dc)
            s = add(out.get(k2, ZERO), term)
            if s == ZERO:
                out.pop(k2, None)
            else:
                out[k2] = s
    return DifferentialForm(chart, a.degree + 1, out)


def interior_product(x: "VectorField", a: DifferentialForm) -> DifferentialForm:
    if x.chart != a.chart:
        raise ExprError("interior product across charts")
    if a.degree == 0:
        raise ExprError("interior product needs degree >= 1")
    out: dict = {}
    for key, c in a.comps.items():
        for pos, idx in enumerate(key):
            xc = x.comps[idx]
            if xc == ZERO:
                continue
            k2 = key[:pos] + key[pos + 1:]
            term = mul(xc, c)
            if pos % 2:
                term = mul(RAT_M1, term)
            s = add(out.get(k2, ZERO), term)
            if s == ZERO:
                out.pop(k2, None)
            else:
                out[k2] = s
    return DifferentialForm(a.chart, a.degree - 1, out)


def d_function(chart: Chart, f: Expression) -> DifferentialForm:
    return exterior_derivative(form_from_function(chart, f))


def lie_derivative(x: "VectorField", a: DifferentialForm) -> DifferentialForm:
    """Cartan formula ι_X d + d ι_X (plain X(f) for 0-forms)."""
    if a.degree == 0:
        return interior_product(x, exterior_derivative(a))
    return interior_product(x, exterior_derivative(a)) + \
        exterior_derivative(interior_product(x, a))


class VectorField:
    """Chart-indexed components over the base coordinates."""

    __slots__ = ("chart", "comps")

    def __init__(self, chart: Chart, comps):
        nb = n_base(chart)
        if isinstance(comps, Mapping):
            vec = [ZERO] * nb
            for n, c in comps.items():
                i = chart.index(n)
                if i >= nb:
                    raise ExprError(f"{n!r} is not a base coordinate")
                vec[i] = c if isinstance(c, Expression) else rat(c)
            comps = vec
        comps = tuple(c if isinstance(c, Expression) else rat(c) for c in comps)
        if len(comps) != nb:
            raise ExprError("component count does not match the chart")
        self.chart = chart
        self.comps = comps

    def __call__(self, f: Expression) -> Expression:
        out = ZERO
        for i, c in enumerate(self.comps):
            if c == ZERO:
                continue
            df = total_diff(f, self.chart.names[i], self.chart)
            if df != ZERO:
                out = add(out, mul(c, df))
        return out

    def __add__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.chart, [add(a, b) for a, b in
                                        zip(self.comps, other.comps)])

    def __sub__(self, other: "VectorField") -> "VectorField":
        return VectorField(self.chart, [add(a, mul(RAT_M1, b)) for a, b in
                                        zip(self.comps, other.comps)])

    def scaled(self, c) -> "VectorField":
        c = c if isinstance(c, Expression) else rat(c)
        return VectorField(self.chart, [mul(c, x) for x in self.comps])

    def __mul__(self, c):
        return self.scaled(c)

    __rmul__ = __mul__

    def __neg__(self):
        return self.scaled(RAT_M1)

    def __eq__(self, other):
        if not isinstance(other, VectorField):
            return NotImplemented
        return self.chart == other.chart and self.comps == other.comps

    def __hash__(self):
        return hash((self.chart, self.comps))

    def simplified(self) -> "VectorField":
        return VectorField(self.chart, [ratsimp(c) for c in self.comps])

    def is_zero(self, policy=DEFAULT_POLICY, excluded=()) -> bool:
        ex = tuple(excluded) + tuple(self.chart.excluded)
        return all(is_identically_zero(c, policy=policy, excluded=ex)
                   for c in self.comps)

    def __repr__(self):
        parts = []
        for i, c in enumerate(self.comps):
            if c == ZERO:
                continue
            name = self.chart.names[i]
            cs = to_text(c)
            parts.append(f"D_{name}" if c == ONE else f"({cs})*D_{name}")
        return " + ".join(parts) if parts else "0"


def lie_bracket(x: VectorField, y: VectorField) -> VectorField:
    if x.chart != y.chart:
        raise ExprError("bracket of fields on different charts")
    comps = []
    for i in range(len(x.comps)):
        comps.append(add(x(y.comps[i]), mul(RAT_M1, y(x.comps[i]))))
    return VectorField(x.chart, comps)


# ---------------------------------------------------------------------------
# numeric sampling of fields/forms


def sample_points(chart: Chart, count: int,
                  policy: ZeroTestPolicy = DEFAULT_POLICY,
                  guards: Iterable[Expression] = ()) -> list:
    rng = random.Random(policy.seed ^ 0x5EED)
    pts = []
    guard_list = tuple(guards)
    for _ in range(count):
        pts.append(draw_sample(chart.names, rng, policy,
                               excluded=chart.excluded, guards=guard_list))
    return pts


def _eval_matrix(fields: Sequence[VectorField], p: SamplePoint,
                 prec: int) -> np.ndarray:
    rows = []
    for f in fields:
        rows.append([float(evaluate(c, p.values, prec)) for c in f.comps])
    return np.array(rows, dtype=float)


def numeric_rank(fields: Sequence[VectorField], points: Sequence[SamplePoint],
                 policy: ZeroTestPolicy = DEFAULT_POLICY) -> int:
    best = 0
    for p in points:
        try:
            m = _eval_matrix(fields, p, policy.precision_bits)
        except SingularEvaluationError:
            continue
        r = np.linalg.matrix_rank(m, tol=1e-8)
        best = max(best, r)
    return best


# ---------------------------------------------------------------------------
# distributions and Frobenius tests


class Distribution:
    """A module of vector fields with generically independent generators."""

    def __init__(self, generators: Sequence[VectorField],
                 policy: ZeroTestPolicy = DEFAULT_POLICY, check: bool = True):
        if not generators:
            raise ExprError("a distribution needs at least one generator")
        self.chart = generators[0].chart
        self.generators = list(generators)
        self.rank = len(self.generators)
        if check:
            pts = sample_points(self.chart, 6, policy)
            if numeric_rank(self.generators, pts, policy) < self.rank:
                raise RankDeficiencyError(
                    "distribution generators are linearly dependent")

    def span_contains(self, field: VectorField,
                      policy: ZeroTestPolicy = DEFAULT_POLICY,
                      points: Optional[Sequence[SamplePoint]] = None) -> bool:
        """Numeric rank pre-check, then a symbolic residual confirmation."""
        pts = points if points is not None else sample_points(self.chart, 10, policy)
        for p in pts:
            try:
                m = _eval_matrix(self.generators + [field], p,
                                 policy.precision_bits)
            except SingularEvaluationError:
                continue
            if np.linalg.matrix_rank(m, tol=1e-8) > self.rank:
                return False
        vectors = [list(g.comps) for g in self.generators]
        coeffs = solve_in_span(vectors, list(field.comps),
                               excluded=self.chart.excluded, policy=policy)
        return coeffs is not None

    def __repr__(self):
        return f"Distribution(rank {self.rank} on {self.chart!r})"


class FrobeniusReport:
    """Verdict plus one residual entry per checked condition."""

    def __init__(self, passed: bool, residuals, detail: str = ""):
        self.passed = passed
        self.residuals = residuals
        self.detail = detail

    def __bool__(self):
        return self.passed

    def __repr__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"FrobeniusReport({status}: {self.detail})"


def is_frobenius_codistribution(forms: Sequence[DifferentialForm],
                                policy: ZeroTestPolicy = DEFAULT_POLICY,
                                excluded=()) -> FrobeniusReport:
    """dθ^a ∧ θ^1 ∧ ... ∧ θ^k = 0 for every a, after an independence check."""
    chart = forms[0].chart
    ex = tuple(excluded) + tuple(chart.excluded)
    if any(f.degree != 1 for f in forms):
        raise ExprError("codistribution test expects 1-forms")
    pts = sample_points(chart, 6, policy)
    nb = n_base(chart)
    ok_rank = 0
    for p in pts:
        try:
            m = np.array([[float(evaluate(f.comps.get((i,), ZERO), p.values,
                                          policy.precision_bits))
                           for i in range(nb)] for f in forms])
        except SingularEvaluationError:
            continue
        ok_rank = max(ok_rank, np.linalg.matrix_rank(m, tol=1e-8))
    if ok_rank < len(forms):
        raise DependentFormsError("1-forms are pointwise linearly dependent")
    omega = wedge_all(forms).simplified()
    residuals = []
    passed = True
    for a, f in enumerate(forms):
        resid = wedge(exterior_derivative(f), omega).simplified()
        zero = resid.is_zero(policy, ex)
        residuals.append((a, resid, zero))
        passed = passed and zero
    detail = "all residuals vanish" if passed else \
        "nonzero residual at form(s) " + \
        ", ".join(str(a) for a, _, z in residuals if not z)
    return FrobeniusReport(passed, residuals, detail)


def is_frobenius_distribution(d: Distribution,
                              policy: ZeroTestPolicy = DEFAULT_POLICY) -> bool:
    """Every pairwise bracket stays in the span of the generators."""
    pts = sample_points(d.chart, 10, policy)
    for i in range(d.rank):
        for j in range(i + 1, d.rank):
            br = lie_bracket(d.generators[i], d.generators[j]).simplified()
            if not d.span_contains(br, policy, pts):
                return False
    return True


def annihilator(forms: Sequence[DifferentialForm],
                policy: ZeroTestPolicy = DEFAULT_POLICY) -> Distribution:
    """Kernel distribution of a set of 1-forms (fraction-free nullspace)."""
    chart = forms[0].chart
    nb = n_base(chart)
    a = [[f.comps.get((i,), ZERO) for i in range(nb)] for f in forms]
    basis = RowReduction(a, excluded=chart.excluded).nullspace()
    if not basis:
        raise RankDeficiencyError("annihilator is trivial")
    return Distribution([VectorField(chart, v) for v in basis], policy)


def dual_coframe(d: Distribution,
                 policy: ZeroTestPolicy = DEFAULT_POLICY) -> list:
    """Basis of the codistribution annihilating d (constraint forms)."""
    chart = d.chart
    nb = n_base(chart)
    a = [[g.comps[i] for g in d.generators] for i in range(nb)]
    at = [[a[i][j] for i in range(nb)] for j in range(len(d.generators))]
    basis = RowReduction(at, excluded=chart.excluded).nullspace()
    if len(basis) != nb - d.rank:
        raise RankDeficiencyError("distribution does not have constant rank")
    return [DifferentialForm(chart, 1,
                             {(i,): v[i] for i in range(nb) if v[i] != ZERO})
            for v in basis]
