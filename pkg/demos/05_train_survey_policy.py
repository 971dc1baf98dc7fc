"""Train the survey policy on a small deck and compare it to random flight.

A 4x3 grid with three cracks trains in a couple of minutes on a laptop.
Pass --episodes to spend more or less; the full-scale runs in the test
suite use the 8x6 deck.
"""

import argparse
import os
import statistics

import numpy as np

from bridgesurvey import detect, env, harness, ppo


def small_scenario(seed):
    return env.ScenarioConfig(length_m=400.0, breadth_m=300.0, cell_m=100.0,
                              n_cracks=3, n_cars=0, max_steps=120,
                              pause_limit=50, seed=seed, detector="oracle")


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--episodes", type=int, default=600)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__),
                                                  "out", "policy"))
    args = ap.parse_args()

    scenario = small_scenario(args.seed)
    detector = detect.OracleDetector()
    cfg = ppo.PPOConfig(total_episodes=args.episodes, seed=args.seed,
                        rollout_steps=1024, buffer_capacity=1536,
                        minibatch_size=384)

    result = ppo.train(lambda s: env.BridgeEnv(scenario, detector, seed=s),
                       cfg, checkpoint_dir=args.out,
                       log_path=os.path.join(args.out, "training_log.csv"),
                       verbose=True)

    rewards = result.episode_rewards
    tail = rewards[-max(1, len(rewards) // 10):]
    random_rows = harness.random_baseline(scenario, 50, seed=args.seed + 1000)
    random_mean = statistics.fmean(r["reward"] for r in random_rows)

    report = ppo.evaluate(result.actor, scenario, detector, 20,
                          seed=args.seed + 2000)
    print(f"\ntrained on {result.episodes} episodes "
          f"({result.updates} updates)")
    print(f"final-10% training reward: {statistics.fmean(tail):.1f}")
    print(f"greedy evaluation reward:  {report.mean_reward:.1f} "
          f"+- {report.std_reward:.1f} over 20 episodes")
    print(f"random-flight baseline:    {random_mean:.1f}")
    print(f"cracks found: {report.cracks_detected}/{report.cracks_total}")
    print(f"artifacts in {args.out}")


if __name__ == "__main__":
    main()
