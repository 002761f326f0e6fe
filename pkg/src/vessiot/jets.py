"""Jet charts, restricted contact systems and Vessiot distributions for the
two supported PDE classes:

  * second-order equations solved for the yy-derivative,
    u_yy = F(x, y, u, u_x, u_y, u_xx, u_xy), on the 7-coordinate locus chart;
  * additively separable evolution equations u_x = F(x, y, u, u_y, u_yy)
    (with u_xy = 0) on the 5-coordinate chart.

The transverse coframe completing the contact forms is fixed as
psi = (dx, dy, du_xx, du_xy) resp. (dx, dy, du_yy).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

from .expr import (
    Chart, DEFAULT_POLICY, ExprError, Expression, ZERO, ZeroTestPolicy, diff,
    free_symbols, is_identically_zero, mul, pow_, rat,
)
from .forms import (
    DifferentialForm, Distribution, VectorField, d_coords, exterior_derivative,
    wedge, wedge_all,
)

SECOND_ORDER_YY = "second_order_yy"
EVOLUTION = "evolution"

YY_COORDS = ("x", "y", "u", "u_x", "u_y", "u_xx", "u_xy")
EVOLUTION_COORDS = ("x", "y", "u", "u_y", "u_yy")


class ClassMismatchError(ExprError):
    pass


class DegenerateFError(ExprError):
    pass


@dataclass
class PdeProblem:
    """A PDE of one of the two supported classes, with its locus chart."""

    kind: str
    F: Expression
    chart: Chart
    name: str = "problem"
    constants: tuple = ()

    @staticmethod
    def second_order_yy(F: Expression, excluded=(), name: str = "problem",
                        constants=()) -> "PdeProblem":
        chart = Chart(YY_COORDS, excluded=tuple(excluded))
        _check_coords(F, chart, constants)
        return PdeProblem(SECOND_ORDER_YY, F, chart, name, tuple(constants))

    @staticmethod
    def evolution(F: Expression, excluded=(), name: str = "problem",
                  constants=()) -> "PdeProblem":
        chart = Chart(EVOLUTION_COORDS, excluded=tuple(excluded))
        _check_coords(F, chart, constants)
        return PdeProblem(EVOLUTION, F, chart, name, tuple(constants))

    @property
    def fiber_names(self) -> tuple:
        if self.kind == SECOND_ORDER_YY:
            return ("u", "u_x", "u_y", "u_xx", "u_xy")
        return ("u", "u_y", "u_yy")

    @property
    def psi_names(self) -> tuple:
        if self.kind == SECOND_ORDER_YY:
            return ("x", "y", "u_xx", "u_xy")
        return ("x", "y", "u_yy")

    def residual_text(self) -> str:
        lhs = "u_yy" if self.kind == SECOND_ORDER_YY else "u_x"
        return f"{lhs} = {self.F}"


def _check_coords(F: Expression, chart: Chart, constants) -> None:
    extra = free_symbols(F) - set(chart.names) - set(constants)
    if extra:
        raise ClassMismatchError(
            f"F references non-chart symbols {sorted(extra)}; declared "
            f"constants are {sorted(constants)}")


@dataclass
class ContactSystem:
    """Restricted contact forms theta plus the transverse psi coframe."""

    thetas: list
    psis: list

    @property
    def chart(self) -> Chart:
        return self.thetas[0].chart

    def omega_theta(self) -> DifferentialForm:
        return wedge_all(self.thetas)

    def coframe(self) -> list:
        return list(self.thetas) + list(self.psis)


def build_contact_system(p: PdeProblem) -> ContactSystem:
    ch = p.chart
    if p.kind == SECOND_ORDER_YY:
        dx, dy, du, du_x, du_y, du_xx, du_xy = d_coords(ch, *YY_COORDS)
        u_x, u_y, u_xx, u_xy = (ch.symbol(n) for n in YY_COORDS[3:])
        thetas = [
            du - u_x * dx - u_y * dy,
            du_x - u_xx * dx - u_xy * dy,
            du_y - u_xy * dx - p.F * dy,
        ]
        psis = [dx, dy, du_xx, du_xy]
    else:
        dx, dy, du, du_y, du_yy = d_coords(ch, *EVOLUTION_COORDS)
        u_y, u_yy = ch.symbol("u_y"), ch.symbol("u_yy")
        thetas = [
            du - p.F * dx - u_y * dy,
            du_y - u_yy * dy,
        ]
        psis = [dx, dy, du_yy]
    return ContactSystem(thetas, psis)


def build_vessiot_distribution(p: PdeProblem,
                               policy: ZeroTestPolicy = DEFAULT_POLICY) -> Distribution:
    ch = p.chart
    if p.kind == SECOND_ORDER_YY:
        u_x, u_y, u_xx, u_xy = (ch.symbol(n) for n in YY_COORDS[3:])
        gens = [
            VectorField(ch, {"x": 1, "u": u_x, "u_x": u_xx, "u_y": u_xy}),
            VectorField(ch, {"y": 1, "u": u_y, "u_x": u_xy, "u_y": p.F}),
            VectorField(ch, {"u_xx": 1}),
            VectorField(ch, {"u_xy": 1}),
        ]
    else:
        u_y, u_yy = ch.symbol("u_y"), ch.symbol("u_yy")
        gens = [
            VectorField(ch, {"x": 1, "u": p.F}),
            VectorField(ch, {"y": 1, "u": u_y, "u_y": u_yy}),
            VectorField(ch, {"u_yy": 1}),
        ]
    return Distribution(gens, policy)


def horizontal_fields(p: PdeProblem) -> list:
    """The first two Vessiot generators (the total-derivative directions)."""
    return build_vessiot_distribution(p).generators[:2]


def f_uyy(p: PdeProblem) -> Expression:
    if p.kind != EVOLUTION:
        raise ClassMismatchError("u_yy-derivative of F only for evolution problems")
    return diff(p.F, "u_yy")


def require_nondegenerate_evolution(p: PdeProblem,
                                    policy: ZeroTestPolicy = DEFAULT_POLICY) -> None:
    if is_identically_zero(f_uyy(p), chart=p.chart, policy=policy):
        raise DegenerateFError("F_{u_yy} is identically zero")


def gaussian_curvature(p: PdeProblem) -> Expression:
    """Curvature of the solution graph, written in the jet coordinates."""
    if p.kind != SECOND_ORDER_YY:
        raise ClassMismatchError("curvature probe requires the u_yy = F class")
    ch = p.chart
    u_x, u_y, u_xx, u_xy = (ch.symbol(n) for n in YY_COORDS[3:])
    num = u_xx * p.F - u_xy ** 2
    den = (1 + u_x ** 2 + u_y ** 2) ** 2
    return mul(num, pow_(den, -1))


def is_constant_on_solution(k: Expression, omega_theta_phi: DifferentialForm,
                            policy: ZeroTestPolicy = DEFAULT_POLICY) -> bool:
    """dK ∧ Ω vanishes iff K is constant along the reduced solution leaves."""
    from .forms import d_function
    resid = wedge(d_function(omega_theta_phi.chart, k), omega_theta_phi)
    return resid.simplified().is_zero(policy)
