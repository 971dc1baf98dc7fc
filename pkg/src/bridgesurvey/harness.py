"""Scenario experiment runner: trains or loads policies across seeds,
evaluates them, and aggregates cross-scenario comparisons.

Every artifact is a plain CSV (header row, fixed column order, atomic
overwrite, '#' lines are comments so the files feed straight into gnuplot)
or a flat key=value manifest, and every run is reproducible from its
manifest alone.
"""

import csv
import dataclasses
import os

import numpy as np

from . import detect, env, nn, ppo

__all__ = [
    "ExperimentSpec", "ComparisonReport", "run_scenario", "random_baseline",
    "compare", "load_experiment", "trace_episode",
    "write_episodes_csv", "load_episodes", "write_run_manifest",
    "read_run_manifest", "write_comparison_csv",
    "EPISODE_COLUMNS", "COMPARISON_COLUMNS", "HARNESS_KEYS",
]

# scenario-file keys handled here rather than by the environment parser
HARNESS_KEYS = ("policy", "n_seeds", "episodes", "eval_episodes", "model")

POLICIES = ("ppo", "random")

EPISODE_COLUMNS = ("seed", "episode", "reward", "steps", "sim_seconds",
                   "cracks_detected", "false_positives", "pauses")

COMPARISON_COLUMNS = ("scenario", "detector", "policy", "episodes",
                      "mean_reward", "std_reward", "mean_time_s", "std_time_s",
                      "relative_completion_pct", "cracks_detected",
                      "cracks_total")


@dataclasses.dataclass(frozen=True)
class ExperimentSpec:
    """One (scenario, detector, policy) run over n_seeds independent seeds.

    Seed k trains with seed scenario.seed + k and writes into
    out_dir/seed<seed>/. detector=None defers to the scenario's own
    detector field; the cnn detector needs a trained model_path.
    """
    scenario: env.ScenarioConfig
    out_dir: str
    detector: str = None
    policy: str = "ppo"
    n_seeds: int = 1
    eval_episodes: int = 20
    ppo_config: ppo.PPOConfig = None
    model_path: str = None
    name: str = ""

    def __post_init__(self):
        if self.detector is None:
            object.__setattr__(self, "detector", self.scenario.detector)
        if self.ppo_config is None:
            object.__setattr__(self, "ppo_config",
                               ppo.PPOConfig(seed=self.scenario.seed))
        if not self.name:
            s = self.scenario
            object.__setattr__(
                self, "name",
                f"cracks{s.n_cracks}_cars{s.n_cars}_false{s.n_false_cracks}")
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.policy not in POLICIES:
            raise ValueError(f"unknown policy {self.policy!r}")
        if self.detector not in detect.DETECTOR_NAMES:
            raise ValueError(f"unknown detector {self.detector!r}")
        if self.detector == "cnn" and not self.model_path:
            raise ValueError("cnn detector requires a trained model_path")
        if self.eval_episodes < 1:
            raise ValueError("eval_episodes must be >= 1")

    @property
    def seeds(self):
        return tuple(self.scenario.seed + k for k in range(self.n_seeds))


def load_experiment(config_path, out_dir, seed=None, detector=None,
                    episodes=None, model_path=None):
    """Build an ExperimentSpec from a scenario file plus harness keys
    (policy, n_seeds, episodes, eval_episodes, model). Explicit arguments
    override file values."""
    scenario, extras = env.parse_scenario_file(config_path,
                                               extra_keys=HARNESS_KEYS)
    if seed is not None:
        scenario = dataclasses.replace(scenario, seed=int(seed))
    if detector is not None:
        scenario = dataclasses.replace(scenario, detector=detector)
    cfg = ppo.PPOConfig(seed=scenario.seed)
    budget = episodes if episodes is not None else extras.get("episodes")
    if budget is not None:
        cfg = dataclasses.replace(cfg, total_episodes=int(budget))
    return ExperimentSpec(
        scenario=scenario, out_dir=os.fspath(out_dir),
        policy=extras.get("policy", "ppo"),
        n_seeds=int(extras.get("n_seeds", 1)),
        eval_episodes=int(extras.get("eval_episodes", 20)),
        ppo_config=cfg,
        model_path=model_path if model_path is not None else extras.get("model"))


def build_spec_detector(spec):
    return detect.build_detector(spec.detector, params_path=spec.model_path)


def run_scenario(spec):
    """Run the experiment: per seed, train PPO (logs and checkpoints under
    seed subdirectories) or roll the random baseline, then evaluate and
    write episodes.csv plus a run manifest. Returns the output paths."""
    os.makedirs(spec.out_dir, exist_ok=True)
    detector = build_spec_detector(spec)
    rows = []
    seed_dirs = []
    for run_seed in spec.seeds:
        if spec.policy == "ppo":
            seed_dir = os.path.join(spec.out_dir, f"seed{run_seed}")
            os.makedirs(seed_dir, exist_ok=True)
            seed_dirs.append(seed_dir)
            cfg = dataclasses.replace(spec.ppo_config, seed=run_seed)
            result = ppo.train(
                lambda s: env.BridgeEnv(spec.scenario, detector, seed=s),
                cfg, checkpoint_dir=seed_dir,
                log_path=os.path.join(seed_dir, "training_log.csv"))
            report = ppo.evaluate(result.actor, spec.scenario, detector,
                                  spec.eval_episodes, seed=run_seed)
            for ep, r in enumerate(report.episodes):
                rows.append({"seed": run_seed, "episode": ep,
                             **{k: r[k] for k in EPISODE_COLUMNS[2:]}})
        else:
            rows.extend(random_baseline(spec.scenario, spec.eval_episodes,
                                        run_seed, detector=detector))
    episodes_path = os.path.join(spec.out_dir, "episodes.csv")
    write_episodes_csv(episodes_path, rows)
    manifest_path = os.path.join(spec.out_dir, "run_manifest.txt")
    write_run_manifest(manifest_path, spec, rows)
    return {"out_dir": spec.out_dir, "episodes": episodes_path,
            "manifest": manifest_path, "seed_dirs": tuple(seed_dirs)}


def random_baseline(scenario, n_episodes, seed, detector=None,
                    model_path=None):
    """Uniform random action each step, Pause masked exactly as for the
    trained agent. Episode k's world seed matches ppo.evaluate's, so
    baseline and trained runs pair episode-for-episode."""
    if detector is None:
        detector = detect.build_detector(scenario.detector,
                                         params_path=model_path)
    rng = np.random.default_rng(seed)
    rows = []
    for ep in range(n_episodes):
        ep_seed = int(np.random.SeedSequence((seed, ep)).generate_state(1)[0])
        environment = env.BridgeEnv(scenario, detector, seed=ep_seed)
        total = 0.0
        steps = pauses = scans = 0
        while not environment.done:
            permitted = np.flatnonzero(environment.action_mask())
            action = int(rng.choice(permitted))
            out = environment.step(action)
            total += out.reward.total
            steps += 1
            pauses += int(action == env.PAUSE)
            scans += int(bool(out.info.get("scanned")))
        rows.append({"seed": seed, "episode": ep, "reward": total,
                     "steps": steps,
                     "sim_seconds": steps * scenario.tick_s
                     + scans * detector.latency_s,
                     "cracks_detected": len(environment.state.detected),
                     "false_positives": environment.state.false_positives,
                     "pauses": pauses})
    return rows


def trace_episode(actor, scenario, detector, seed=0):
    """Deterministic replay of evaluation episode 0 for (seed), collecting
    the per-step trace rows used by the replay viewer."""
    ep_seed = int(np.random.SeedSequence((seed, 0)).generate_state(1)[0])
    environment = env.BridgeEnv(scenario, detector, seed=ep_seed)
    a_spec, a_params = actor
    outcomes, actions = [], []
    while not environment.done:
        o = environment.observe()
        mask = environment.action_mask()
        logits, _ = nn.forward(a_spec, a_params, o)
        probs = ppo.masked_policy(logits[None], mask[None])[0]
        action = int(np.argmax(probs))
        outcomes.append(environment.step(action))
        actions.append(action)
    return env.trace_rows(outcomes, actions)


# ---------------------------------------------------------------------------
# artifacts

def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    return str(v)


def write_episodes_csv(path, rows):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=EPISODE_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v
                        for k, v in row.items() if k in EPISODE_COLUMNS})
    os.replace(tmp, path)
    return path


_EPISODE_FLOATS = ("reward", "sim_seconds")


def load_episodes(path):
    rows = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            rows.append({k: float(v) if k in _EPISODE_FLOATS else int(v)
                         for k, v in raw.items()})
    return rows


def write_run_manifest(path, spec, ep_rows):
    """Flat key=value capture of the fully resolved configuration, the
    seeds, and summary statistics."""
    lines = [f"name={spec.name}",
             f"policy={spec.policy}",
             f"detector={spec.detector}",
             f"n_seeds={spec.n_seeds}",
             f"eval_episodes={spec.eval_episodes}",
             f"seeds={_fmt(spec.seeds)}"]
    if spec.model_path:
        lines.append(f"model={spec.model_path}")
    for k, v in dataclasses.asdict(spec.scenario).items():
        lines.append(f"scenario.{k}={_fmt(v)}")
    if spec.policy == "ppo":
        for k, v in dataclasses.asdict(spec.ppo_config).items():
            lines.append(f"ppo.{k}={_fmt(v)}")
    rewards = [r["reward"] for r in ep_rows]
    times = [r["sim_seconds"] for r in ep_rows]
    lines += [f"episodes_logged={len(ep_rows)}",
              f"mean_reward={_fmt(float(np.mean(rewards)))}",
              f"std_reward={_fmt(float(np.std(rewards)))}",
              f"mean_time_s={_fmt(float(np.mean(times)))}",
              f"std_time_s={_fmt(float(np.std(times)))}",
              f"cracks_detected={sum(r['cracks_detected'] for r in ep_rows)}",
              f"cracks_total={spec.scenario.n_cracks * len(ep_rows)}"]
    env.atomic_write_text(path, "\n".join(lines) + "\n")
    return path


def read_run_manifest(path):
    values = {}
    with open(path) as f:
        for ln, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{ln}: expected key=value")
            key, _, val = line.partition("=")
            values[key.strip()] = val.strip()
    return values


# ---------------------------------------------------------------------------
# cross-scenario comparison

@dataclasses.dataclass(frozen=True)
class ComparisonReport:
    reference: str             # scenario name of the 100% reference run
    rows: tuple                # one dict per run, COMPARISON_COLUMNS keys


def _run_dir(item):
    if isinstance(item, ExperimentSpec):
        return item.out_dir
    return os.fspath(item)


def compare(specs, reference, out_path=None):
    """Aggregate completed runs against a reference run.

    specs items are ExperimentSpec objects or run directories. The
    reference is prepended if not already listed; every run must have
    episodes.csv and run_manifest.txt on disk, otherwise the absentees are
    reported and nothing is aggregated. relative_completion_pct is
    100 * reference mean time / scenario mean time, so slower scenarios
    score below 100."""
    dirs = [_run_dir(s) for s in specs]
    ref_dir = _run_dir(reference)
    if ref_dir not in dirs:
        dirs = [ref_dir] + dirs
    missing = [d for d in dirs
               if not (os.path.exists(os.path.join(d, "episodes.csv"))
                       and os.path.exists(os.path.join(d, "run_manifest.txt")))]
    if missing:
        raise ValueError("missing runs: " + ", ".join(missing))
    loaded = {}
    for d in dirs:
        manifest = read_run_manifest(os.path.join(d, "run_manifest.txt"))
        loaded[d] = (manifest, load_episodes(os.path.join(d, "episodes.csv")))
    ref_mean_time = float(np.mean([r["sim_seconds"]
                                   for r in loaded[ref_dir][1]]))
    rows = []
    for d in dirs:
        manifest, eps = loaded[d]
        rewards = np.array([r["reward"] for r in eps])
        times = np.array([r["sim_seconds"] for r in eps])
        rows.append({
            "scenario": manifest["name"],
            "detector": manifest["detector"],
            "policy": manifest["policy"],
            "episodes": len(eps),
            "mean_reward": float(rewards.mean()),
            "std_reward": float(rewards.std()),
            "mean_time_s": float(times.mean()),
            "std_time_s": float(times.std()),
            "relative_completion_pct": 100.0 * ref_mean_time / float(times.mean()),
            "cracks_detected": sum(r["cracks_detected"] for r in eps),
            "cracks_total": int(manifest["scenario.n_cracks"]) * len(eps),
        })
    report = ComparisonReport(reference=loaded[ref_dir][0]["name"],
                              rows=tuple(rows))
    if out_path is not None:
        write_comparison_csv(out_path, report)
    return report


def write_comparison_csv(path, report):
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as f:
        f.write("# relative_completion_pct = 100 * reference_mean_time_s / "
                f"scenario_mean_time_s; reference scenario "
                f"{report.reference} = 100\n")
        w = csv.DictWriter(f, fieldnames=COMPARISON_COLUMNS)
        w.writeheader()
        for row in report.rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v
                        for k, v in row.items()})
    os.replace(tmp, path)
    return path


def read_comparison_csv(path):
    with open(path, newline="") as f:
        lines = [ln for ln in f if not ln.startswith("#")]
    return list(csv.DictReader(lines))
