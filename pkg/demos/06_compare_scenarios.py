"""Reproduce the scenario-comparison table with the random-flight policy.

Runs the same deck with 0, 2, and 4 cars, writes one run directory per
scenario, and folds them into comparison.csv. With no traffic as the
reference row, relative_completion_pct shows how much the pause-and-wait
discipline slows the survey down. Swap policy="ppo" into each
ExperimentSpec (and wait a few minutes) to build the same table for the
trained policy.
"""

import dataclasses
import os

from bridgesurvey import env, harness

OUT = os.path.join(os.path.dirname(__file__), "out", "traffic")

BASE = env.ScenarioConfig(length_m=400.0, breadth_m=300.0, cell_m=100.0,
                          n_cracks=3, n_cars=0, max_steps=120,
                          pause_limit=8, seed=5, detector="oracle")


def main():
    specs = []
    for cars in (0, 2, 4):
        scenario = dataclasses.replace(BASE, n_cars=cars)
        spec = harness.ExperimentSpec(scenario=scenario,
                                      out_dir=os.path.join(OUT, f"cars{cars}"),
                                      policy="random", eval_episodes=200)
        harness.run_scenario(spec)
        specs.append(spec)
        print(f"ran {spec.name}: {spec.eval_episodes} episodes")

    report = harness.compare(specs, reference=specs[0],
                             out_path=os.path.join(OUT, "comparison.csv"))
    print(f"\n{'scenario':>22} {'mean_time_s':>12} {'relative_pct':>13} "
          f"{'cracks':>8}")
    for row in report.rows:
        print(f"{row['scenario']:>22} {row['mean_time_s']:>12.1f} "
              f"{row['relative_completion_pct']:>13.1f} "
              f"{row['cracks_detected']:>4}/{row['cracks_total']}")
    print(f"\ntable written to {os.path.join(OUT, 'comparison.csv')}")


if __name__ == "__main__":
    main()
