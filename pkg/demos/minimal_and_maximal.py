"""Learning the smallest and largest equilibrium of a nonseparable LQ game.

Each player's drift is pushed up by the average state (b0 = 0.2 m) and the
cost rewards moving with the crowd.  Starting from the lowest and highest
admissible trajectories, repeated best replies climb and descend
monotonically; where they meet tells us how far apart the extreme equilibria
are for this instance.
"""
from submfg.equilibrium import MAXIMAL, MINIMAL, EquilibriumSettings, iterate_best_reply
from submfg.meanfield import check_dominance_pathwise, pathspace_distance
from submfg.model import EXAMPLE_2, build_lq_model, example_params
from submfg.sde import TimeGrid, generate_noise

model = build_lq_model(example_params(EXAMPLE_2))
plan = generate_noise(3, TimeGrid(1.0, 25), 8, 64, (model.d, model.d1, model.d2), model.initial_law)
runs = {}
for direction in (MINIMAL, MAXIMAL):
    run = iterate_best_reply(model, plan, direction, EquilibriumSettings())
    runs[direction] = run
    print(f"\n{direction} run from the {'lower' if direction == MINIMAL else 'upper'} bracket")
    print(f"{'iter':>5} {'distance':>11} {'order violation':>16}")
    for r in run.report.records:
        print(f"{r.iter:>5} {r.distance:>11.3e} {r.V:>16.1e}")
    print(f"stop: {run.report.stop_reason}, converged at iteration {run.report.converged_at}")

lo, hi = runs[MINIMAL].X, runs[MAXIMAL].X
print(f"\nminimal below maximal: violation {check_dominance_pathwise(lo, hi).violation:.1e}")
print(f"distance between the two limits: {pathspace_distance(lo, hi):.3e}")
