"""When does a higher crowd push a player higher?

We freeze the population's law, shift it up by 0.5, and compare the two
best replies on the same noise.  With the coupling weight Q >= 0 the cost
rewards staying near the crowd and the shifted reply dominates on every
path.  Flipping the sign of Q breaks the structure, and the comparison
reports a violation instead.
"""
import numpy as np

from submfg.equilibrium import comparison_harness, lower_bound_process
from submfg.meanfield import conditional_empirical_law
from submfg.model import EXAMPLE_1, build_lq_model, example_params
from submfg.sde import TimeGrid, generate_noise

for label, q in (("attracting (Q = 0.5 I)", 0.5), ("repelling (Q = -0.5 I)", -0.5)):
    model = build_lq_model(example_params(EXAMPLE_1, Q=q * np.eye(2)), strict=False)
    plan = generate_noise(7, TimeGrid(1.0, 25), 8, 64, (model.d, model.d1, model.d2), model.initial_law)
    base = conditional_empirical_law(lower_bound_process(model, plan))
    rep, _, _ = comparison_harness(model, plan, base, base.shifted(0.5))
    print(f"{label:>24}: violation {rep.V_X:.3e}, worst pointwise {rep.V_X_max:.3e}, "
          f"{'dominates' if rep.passed else 'does not dominate'}")
