"""Reduction of the Vessiot distribution: the two-form ansatz, closed-form
solution of the algebraic Frobenius conditions, differential-condition
residuals over an opaque-unknown alphabet, and candidate checking.

For the u_yy = F class exactly two 1-forms

    phi1 = psi3 - a1 psi1 - a2 psi2,    phi2 = psi4 - b1 psi1 - b2 psi2

are adjoined to the contact codistribution; the algebraic conditions force
a2 = b1 and pin b2, leaving (a1, b1) as the unknown functions of Step 2.  The
evolution class adjoins a single form with a1 = 0 and a2 given in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

from .expr import (
    Chart, DEFAULT_POLICY, ExprError, Expression, ONE, Sym, ZERO,
    ZeroTestPolicy, add, bind_unknowns, diff, free_symbols,
    is_identically_zero, mul, pow_, rat, ratsimp, substitute_names,
)
from .forms import (
    DifferentialForm, Distribution, FrobeniusReport, VectorField, d_coords,
    exterior_derivative, interior_product, is_frobenius_codistribution,
    lie_bracket, wedge, wedge_all,
)
from .jets import (
    EVOLUTION, SECOND_ORDER_YY, ClassMismatchError, ContactSystem,
    DegenerateFError, PdeProblem, build_contact_system,
    build_vessiot_distribution, require_nondegenerate_evolution,
)
from .linalg import RowReduction, rat_neg


class InconsistentSystemError(ExprError):
    pass


class FrobeniusFailure(ExprError):
    def __init__(self, message: str, report: Optional[FrobeniusReport] = None):
        super().__init__(message)
        self.report = report


class TransversalityFailure(ExprError):
    pass


@dataclass
class AnsatzCoefficients:
    """Coefficients of the adjoined forms; a2 and b2 carry the Step-1
    relations in terms of a1 and b1."""

    a1: Expression
    a2: Expression
    b1: Expression
    b2: Expression

    def items(self):
        return [("a1", self.a1), ("a2", self.a2), ("b1", self.b1),
                ("b2", self.b2)]


def step1_closed_form(p: PdeProblem, a1: Expression, b1: Expression) -> Expression:
    """b2 = F_x + u_x F_u + u_xx F_{u_x} + u_xy F_{u_y} + a1 F_{u_xx}
    + b1 F_{u_xy} (total x-derivative of F plus the ansatz couplings)."""
    if p.kind != SECOND_ORDER_YY:
        raise ClassMismatchError("closed form applies to the u_yy = F class")
    ch = p.chart
    F = p.F
    u_x, u_y, u_xx, u_xy = (ch.symbol(n) for n in ("u_x", "u_y", "u_xx", "u_xy"))
    return add(diff(F, "x"), mul(u_x, diff(F, "u")),
               mul(u_xx, diff(F, "u_x")), mul(u_xy, diff(F, "u_y")),
               mul(a1, diff(F, "u_xx")), mul(b1, diff(F, "u_xy")))


def evolution_closed_form(p: PdeProblem) -> Expression:
    """a2 = -(F_y + u_y F_u + u_yy F_{u_y}) / F_{u_yy}."""
    if p.kind != EVOLUTION:
        raise ClassMismatchError("evolution closed form needs the u_x = F class")
    ch = p.chart
    num = add(diff(p.F, "y"), mul(ch.symbol("u_y"), diff(p.F, "u")),
              mul(ch.symbol("u_yy"), diff(p.F, "u_y")))
    return ratsimp(mul(rat(-1), num, pow_(diff(p.F, "u_yy"), -1)))


def _phi_forms(cs: ContactSystem, coeffs: AnsatzCoefficients) -> list:
    psi1, psi2, psi3 = cs.psis[0], cs.psis[1], cs.psis[2]
    if len(cs.psis) == 4:
        psi4 = cs.psis[3]
        phi1 = psi3 - coeffs.a1 * psi1 - coeffs.a2 * psi2
        phi2 = psi4 - coeffs.b1 * psi1 - coeffs.b2 * psi2
        return [phi1, phi2]
    return [psi3 - coeffs.a1 * psi1 - coeffs.a2 * psi2]


def _volume_normalizer(cs: ContactSystem) -> Expression:
    vol = wedge_all(cs.thetas + cs.psis)
    (key, coeff), = vol.comps.items()
    return coeff


def _top_coefficient(form: DifferentialForm) -> Expression:
    if not form.comps:
        return ZERO
    if len(form.comps) != 1:
        raise ExprError("expected a top-degree form with a single component")
    return next(iter(form.comps.values()))


def algebraic_condition_residuals(p: PdeProblem, coeffs: AnsatzCoefficients):
    """The dtheta^a ∧ Ω_theta ∧ Ω_phi residual scalars (normalized)."""
    cs = build_contact_system(p)
    phis = _phi_forms(cs, coeffs)
    omega = wedge_all(cs.thetas + phis)
    norm = pow_(_volume_normalizer(cs), -1)
    out = []
    for th in cs.thetas:
        resid = wedge(exterior_derivative(th), omega)
        out.append(ratsimp(mul(_top_coefficient(resid), norm)))
    return out


def solve_algebraic_conditions(p: PdeProblem):
    """Solve the algebraic conditions for (a2, b2) with (a1, b1) symbolic.

    Returns an AnsatzCoefficients with a1, b1 the opaque symbols "a1", "b1"
    and a2, b2 the solved expressions.  The solve is a generic linear
    elimination of the expanded wedge residuals; a closed form exists and the
    result must agree with it symbolically (see step1_closed_form).
    """
    if p.kind != SECOND_ORDER_YY:
        raise ClassMismatchError("use solve_algebraic_evolution for evolution problems")
    a1, a2, b1, b2 = Sym("a1"), Sym("a2"), Sym("b1"), Sym("b2")
    residuals = algebraic_condition_residuals(
        p, AnsatzCoefficients(a1, a2, b1, b2))
    sol = _solve_linear_for(residuals, solve_for=("a2", "b2"),
                            keep=("a1", "b1"), chart=p.chart)
    if sol is None:
        raise InconsistentSystemError(
            "algebraic conditions did not determine (a2, b2); this signals "
            "an implementation fault for the u_yy = F class")
    return AnsatzCoefficients(a1, sol["a2"], b1, sol["b2"])


def solve_algebraic_evolution(p: PdeProblem,
                              policy: ZeroTestPolicy = DEFAULT_POLICY):
    """Evolution class: a1 = 0 and a2 from the closed form (F_{u_yy} != 0)."""
    require_nondegenerate_evolution(p, policy)
    a1, a2 = Sym("a1"), Sym("a2")
    residuals = algebraic_condition_residuals(
        p, AnsatzCoefficients(a1, a2, ZERO, ZERO))
    sol = _solve_linear_for(residuals, solve_for=("a1", "a2"), keep=(),
                            chart=p.chart)
    if sol is None:
        raise InconsistentSystemError("evolution algebraic conditions unsolvable")
    return AnsatzCoefficients(sol["a1"], ratsimp(sol["a2"]), ZERO, ZERO)


def _solve_linear_for(residuals, solve_for, keep, chart):
    """Solve residuals == 0 linearly for `solve_for`, leaving `keep` symbolic."""
    rows = []
    rhs = []
    for resid in residuals:
        coeffs = [ratsimp(diff(resid, n)) for n in solve_for]
        const = resid
        for n in solve_for:
            const = substitute_names(const, {n: ZERO})
        # linearity check: residual minus its linearization must vanish
        rebuilt = add(const, *[mul(c, Sym(n)) for c, n in zip(coeffs, solve_for)])
        if not is_identically_zero(add(resid, rat_neg(rebuilt))):
            raise InconsistentSystemError("algebraic conditions are not linear")
        if all(c == ZERO for c in coeffs) and const == ZERO:
            continue
        rows.append(coeffs)
        rhs.append(rat_neg(const))
    if not rows:
        return {n: ZERO for n in solve_for}
    red = RowReduction(rows, [[b] for b in rhs], excluded=chart.excluded)
    sol = red.solve_column(0)
    if sol is None or red.rank < len(solve_for):
        return None
    return {n: ratsimp(sol[i]) for i, n in enumerate(solve_for)}


# ---------------------------------------------------------------------------
# Step 2: differential conditions


def formal_unknown_chart(p: PdeProblem) -> Chart:
    """The problem chart extended with opaque a1, b1 and formal partials."""
    return p.chart.extend_with_unknowns(["a1", "b1"])


def _on_chart(form: DifferentialForm, chart: Chart) -> DifferentialForm:
    return DifferentialForm(chart, form.degree, form.comps)


def differential_residuals(p: PdeProblem, a1: Expression, b1: Expression,
                           chart: Optional[Chart] = None):
    """Residual scalars of dphi^α ∧ Ω_theta ∧ Ω_phi = 0 after Step 1.

    a1 and b1 may contain opaque unknown symbols of `chart` (default: the
    formal unknown chart), in which case the residuals are first-order
    expressions in the formal partials, or they may be concrete.
    """
    if chart is None:
        chart = formal_unknown_chart(p) if p.kind == SECOND_ORDER_YY else p.chart
    cs = build_contact_system(p)
    thetas = [_on_chart(t, chart) for t in cs.thetas]
    psis = [_on_chart(s, chart) for s in cs.psis]
    cs2 = ContactSystem(thetas, psis)
    if p.kind == SECOND_ORDER_YY:
        coeffs = AnsatzCoefficients(a1, b1, b1, step1_closed_form(p, a1, b1))
    else:
        coeffs = AnsatzCoefficients(a1, evolution_closed_form(p), ZERO, ZERO)
    phis = _phi_forms(cs2, coeffs)
    omega = wedge_all(thetas + phis)
    norm = pow_(_volume_normalizer(cs2), -1)
    out = []
    for phi in phis:
        resid = wedge(exterior_derivative(phi), omega)
        out.append(ratsimp(mul(_top_coefficient(resid), norm)))
    return out


@dataclass
class ReductionCandidate:
    """A concrete (a1, b1) whose adjoined forms close the codistribution."""

    problem: PdeProblem
    coeffs: AnsatzCoefficients
    thetas: list
    psis: list
    phis: list
    vbar1: VectorField
    vbar2: VectorField
    report: FrobeniusReport

    @property
    def chart(self) -> Chart:
        return self.problem.chart

    def omega_theta(self) -> DifferentialForm:
        return wedge_all(self.thetas)

    def omega_phi(self) -> DifferentialForm:
        return wedge_all(self.phis) if len(self.phis) > 1 else self.phis[0]

    def omega_bar(self) -> DifferentialForm:
        return wedge_all(self.thetas + self.phis)

    def reduced_distribution(self, policy=DEFAULT_POLICY) -> Distribution:
        return Distribution([self.vbar1, self.vbar2], policy)


def reduced_generators(p: PdeProblem, coeffs: AnsatzCoefficients):
    ch = p.chart
    v = build_vessiot_distribution(p).generators
    if p.kind == SECOND_ORDER_YY:
        vbar1 = v[0] + coeffs.a1 * v[2] + coeffs.b1 * v[3]
        vbar2 = v[1] + coeffs.a2 * v[2] + coeffs.b2 * v[3]
    else:
        vbar1 = v[0] + coeffs.a1 * v[2]
        vbar2 = v[1] + coeffs.a2 * v[2]
    return vbar1.simplified(), vbar2.simplified()


def check_candidate(p: PdeProblem, a1: Expression, b1: Expression = ZERO,
                    policy: ZeroTestPolicy = DEFAULT_POLICY) -> ReductionCandidate:
    """Verify a concrete candidate; raises FrobeniusFailure with the residual
    report when the adjoined codistribution does not close."""
    cs = build_contact_system(p)
    if p.kind == SECOND_ORDER_YY:
        coeffs = AnsatzCoefficients(a1, b1, b1,
                                    ratsimp(step1_closed_form(p, a1, b1)))
    else:
        if not is_identically_zero(a1, chart=p.chart, policy=policy):
            raise FrobeniusFailure("evolution candidates require a1 = 0")
        coeffs = AnsatzCoefficients(ZERO, evolution_closed_form(p), ZERO, ZERO)
    phis = _phi_forms(cs, coeffs)
    report = is_frobenius_codistribution(cs.thetas + phis, policy)
    if not report.passed:
        raise FrobeniusFailure(
            f"differential conditions fail for candidate {p.name}", report)
    vbar1, vbar2 = reduced_generators(p, coeffs)
    # transversality is built into the generators (dx(V1)=1, dy(V2)=1);
    # confirm the contraction identities anyway
    dx, dy = d_coords(p.chart, "x", "y")
    if interior_product(vbar1, dx).coefficient() != ONE or \
            interior_product(vbar2, dy).coefficient() != ONE:
        raise TransversalityFailure("reduced generators are not transverse")
    ex = p.chart.excluded
    for form in list(cs.thetas) + phis:
        for vb in (vbar1, vbar2):
            c = ratsimp(interior_product(vb, form).coefficient())
            if not is_identically_zero(c, policy=policy, excluded=ex):
                raise FrobeniusFailure(
                    f"candidate annihilation failed: {form!r} on {vb!r}")
    br = lie_bracket(vbar1, vbar2).simplified()
    if not br.is_zero(policy):
        raise FrobeniusFailure(f"[V1,V2] != 0 for candidate: {br!r}")
    return ReductionCandidate(p, coeffs, list(cs.thetas), list(cs.psis),
                              phis, vbar1, vbar2, report)
