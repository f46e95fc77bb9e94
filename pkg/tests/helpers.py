"""Small model factories shared by the test modules."""
import numpy as np

from submfg.meanfield import SummaryFlow
from submfg.model import EXAMPLE_1, ControlBox, LQModelParams, build_expression_model, clamped
from submfg.sde import dirac_sampler


def scalar_model(drift="a1", h="a1^2", g="x1^2", sigma=None, sigma0=None, box=None, T=1.0, **kw):
    """One-dimensional separable model with optional noise loadings."""
    return build_expression_model(
        d=1, k=1, T=T, drift=[drift], h=h, g=g, regime="separable",
        box=box or ControlBox.unbounded(1),
        d1=1 if sigma else 0, sigma=[[sigma]] if sigma else None,
        d2=1 if sigma0 else 0, sigma0=[[sigma0]] if sigma0 else None, **kw)


def symmetric_box(k=1, r=1.0):
    return ControlBox.symmetric(k, r)


def scalar_lq(q=0.0, terminal=1.0, sigma=None, x0=1.0, box=None, T=1.0):
    """``h = q x^2 + a^2``, ``g = terminal x^2``, ``dX = a dt + sigma dW``."""
    return LQModelParams(EXAMPLE_1, P=[[q]], Q=[[0.0]], R=[[1.0]], P_T=[[terminal]], Q_T=[[0.0]], T=T,
                         b1bar=[[0.0]], b2=[[1.0]], sigma=None if sigma is None else [[sigma]],
                         phi=(clamped(0, -1, 1),), box=box, initial_law=dirac_sampler([x0]))


def frozen(plan, J, value=0.0):
    """Deterministic summary flow held at ``value``."""
    return SummaryFlow(np.full((plan.n_outer, plan.grid.n_steps + 1, J), value))
