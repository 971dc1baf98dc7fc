"""Command-line front end.

Subcommands cover the full pipeline: patch dataset generation, classifier
training, detector benchmarking, policy training and evaluation, run
comparison, and a text replay of recorded episode traces. Every command
exits 0 on success and nonzero with a single `error: ...` line on stderr
otherwise.
"""

import argparse
import dataclasses
import os
import sys

import numpy as np

from . import detect, env, harness, nn, ppo, render


def build_parser():
    p = argparse.ArgumentParser(
        prog="bridgesurvey",
        description="bridge-deck survey simulator, crack detectors, and "
                    "policy training harness")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")

    t = sub.add_parser("train", help="train and evaluate policies for a scenario")
    t.add_argument("--config", required=True, help="scenario key=value file")
    t.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--detector", choices=detect.DETECTOR_NAMES, default=None)
    t.add_argument("--episodes", type=int, default=None,
                   help="training episode budget")
    t.add_argument("--model", default=None,
                   help="trained classifier file, needed for --detector cnn")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a trained policy checkpoint")
    e.add_argument("--config", required=True)
    e.add_argument("--model", required=True,
                   help="actor checkpoint file or directory containing actor.bin")
    e.add_argument("--episodes", type=int, default=20)
    e.add_argument("--seed", type=int, default=None)
    e.add_argument("--out", required=True)
    e.add_argument("--detector", choices=detect.DETECTOR_NAMES, default=None)
    e.add_argument("--detector-model", default=None,
                   help="classifier file when evaluating with the cnn detector")
    e.set_defaults(func=cmd_evaluate)

    g = sub.add_parser("gen-dataset", help="generate a labeled patch corpus")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--res", type=int, default=64)
    g.add_argument("--balance", type=float, default=0.5,
                   help="fraction of patches containing a true crack")
    g.set_defaults(func=cmd_gen_dataset)

    c = sub.add_parser("train-classifier", help="train the patch classifier")
    c.add_argument("--data", required=True, help="corpus directory or manifest.csv")
    c.add_argument("--epochs", type=int, default=20)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", default=None,
                   help="output directory, defaults to the corpus directory")
    c.set_defaults(func=cmd_train_classifier)

    b = sub.add_parser("bench-detectors", help="benchmark detectors on a corpus")
    b.add_argument("--data", required=True)
    b.add_argument("--model", default=None, help="classifier file to include")
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", default=None,
                   help="output directory, defaults to the corpus directory")
    b.set_defaults(func=cmd_bench)

    m = sub.add_parser("compare", help="aggregate completed runs into one table")
    m.add_argument("--runs", nargs="+", required=True, help="run directories")
    m.add_argument("--reference", required=True,
                   help="run directory scored as 100%%")
    m.add_argument("--out", default=".")
    m.set_defaults(func=cmd_compare)

    r = sub.add_parser("replay", help="step through a recorded episode trace")
    r.add_argument("--trace", required=True, help="trace CSV from evaluate")
    r.add_argument("--config", default=None,
                   help="scenario file, for exact grid dimensions")
    r.set_defaults(func=cmd_replay)
    return p


def cmd_train(args):
    spec = harness.load_experiment(args.config, args.out, seed=args.seed,
                                   detector=args.detector,
                                   episodes=args.episodes,
                                   model_path=args.model)
    paths = harness.run_scenario(spec)
    manifest = harness.read_run_manifest(paths["manifest"])
    print(f"run complete: scenario={spec.name} policy={spec.policy} "
          f"detector={spec.detector} seeds={','.join(map(str, spec.seeds))} "
          f"mean_reward={float(manifest['mean_reward']):.3f}")
    print(f"outputs: {paths['out_dir']}")
    return 0


def cmd_evaluate(args):
    scenario, _ = env.parse_scenario_file(args.config,
                                          extra_keys=harness.HARNESS_KEYS)
    if args.seed is not None:
        scenario = dataclasses.replace(scenario, seed=args.seed)
    name = args.detector or scenario.detector
    detector = detect.build_detector(name, params_path=args.detector_model)
    actor_path = args.model
    if os.path.isdir(actor_path):
        actor_path = os.path.join(actor_path, "actor.bin")
    a_spec = ppo.actor_spec()
    actor = (a_spec, nn.load_params(actor_path, a_spec))
    os.makedirs(args.out, exist_ok=True)
    report = ppo.evaluate(actor, scenario, detector, args.episodes,
                          seed=scenario.seed)
    rows = [{"seed": scenario.seed, "episode": ep,
             **{k: r[k] for k in harness.EPISODE_COLUMNS[2:]}}
            for ep, r in enumerate(report.episodes)]
    harness.write_episodes_csv(os.path.join(args.out, "episodes.csv"), rows)
    trace = harness.trace_episode(actor, scenario, detector,
                                  seed=scenario.seed)
    env.write_trace_csv(os.path.join(args.out, "trace.csv"), trace)
    print(f"evaluated {args.episodes} episodes with {name}: "
          f"mean_reward={report.mean_reward:.3f} "
          f"mean_time_s={report.mean_sim_seconds:.1f} "
          f"cracks={report.cracks_detected}/{report.cracks_total}")
    print(f"outputs: {args.out}")
    return 0


def cmd_gen_dataset(args):
    rcfg = render.RenderConfig(resolution=args.res)
    manifest = render.gen_dataset(args.n, args.balance, rcfg,
                                  render.CrackConfig(),
                                  np.random.default_rng(args.seed), args.out)
    print(f"wrote {args.n} patches at {args.res}x{args.res}: {manifest}")
    return 0


def _manifest_path(data):
    if os.path.isdir(data):
        return os.path.join(data, "manifest.csv")
    return data


def cmd_train_classifier(args):
    manifest = _manifest_path(args.data)
    pixels, labels = render.load_dataset(manifest)
    res = pixels.shape[1]
    cfg = detect.ClassifierConfig(resolution=res, epochs=args.epochs,
                                  seed=args.seed)
    params, report = detect.train_classifier((pixels, labels), cfg)
    out = args.out or os.path.dirname(manifest) or "."
    os.makedirs(out, exist_ok=True)
    model_path = os.path.join(out, "model.bin")
    nn.save_params(model_path, detect.classifier_spec(res), params)
    detect.write_classifier_report(os.path.join(out, "train_report.csv"),
                                   report)
    last = report[-1]
    print(f"trained {args.epochs} epochs on {len(labels)} patches at "
          f"{res}x{res}: train_acc={last['train_acc']:.4f} "
          f"val_acc={last['val_acc']:.4f}")
    print(f"model: {model_path}")
    return 0


def cmd_bench(args):
    manifest = _manifest_path(args.data)
    pixels, _ = render.load_dataset(manifest)
    rcfg = render.RenderConfig(resolution=pixels.shape[1])
    detectors = [detect.CannyDetector(render_config=rcfg)]
    if args.model:
        detectors.append(detect.build_detector("cnn", params_path=args.model,
                                               render_config=rcfg))
    rows = detect.benchmark(detectors, manifest,
                            np.random.default_rng(args.seed))
    out = args.out or os.path.dirname(manifest) or "."
    os.makedirs(out, exist_ok=True)
    path = detect.write_bench_csv(os.path.join(out, "bench.csv"), rows)
    for row in rows:
        print(f"{row['detector']}: accuracy={row['accuracy']:.4f} "
              f"precision={row['precision']:.4f} recall={row['recall']:.4f} "
              f"latency_ms={row['latency_ms_mean']:.3f}")
    if len(rows) == 2:
        ratio = rows[1]["latency_ms_mean"] / rows[0]["latency_ms_mean"]
        print(f"latency ratio cnn/canny: {ratio:.2f}")
    print(f"bench: {path}")
    return 0


def cmd_compare(args):
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "comparison.csv")
    report = harness.compare(args.runs, args.reference, out_path=out_path)
    for row in report.rows:
        print(f"{row['scenario']} [{row['detector']}/{row['policy']}]: "
              f"mean_reward={row['mean_reward']:.3f} "
              f"mean_time_s={row['mean_time_s']:.1f} "
              f"relative_completion={row['relative_completion_pct']:.1f}%")
    print(f"comparison: {out_path}")
    return 0


_TRACE_INTS = ("step", "x", "y", "s_t", "cracks_detected_cum")


def _read_trace(path):
    import csv
    rows = []
    with open(path, newline="") as f:
        for raw in csv.DictReader(f):
            rows.append({k: (int(v) if k in _TRACE_INTS
                             else v if k == "action" else float(v))
                         for k, v in raw.items()})
    if not rows:
        raise ValueError(f"{path}: trace has no steps")
    return rows


def cmd_replay(args):
    rows = _read_trace(args.trace)
    if args.config:
        scenario, _ = env.parse_scenario_file(args.config,
                                              extra_keys=harness.HARNESS_KEYS)
        n_cols, n_rows = scenario.n_cols, scenario.n_rows
    else:
        n_cols = max(r["x"] for r in rows) + 1
        n_rows = max(r["y"] for r in rows) + 1
    visits = np.zeros((n_rows, n_cols), dtype=int)
    cum = 0.0
    for r in rows:
        visits[r["y"], r["x"]] += 1
        cum += r["r_total"]
        note = "  crack!" if r["r_c"] > 0 else ""
        print(f"step {r['step']:>4}  {r['action']:<5} -> ({r['x']},{r['y']})"
              f"  s_t={r['s_t']}  r={r['r_total']:+.0f}"
              f"  total={cum:+.0f}{note}")
    print()
    print("visit counts, far deck edge on top:")
    for y in range(n_rows - 1, -1, -1):
        cells = ["." if visits[y, x] == 0
                 else ("*" if visits[y, x] > 9 else str(visits[y, x]))
                 for x in range(n_cols)]
        print("  " + " ".join(cells))
    print(f"steps={len(rows)} return={cum:+.0f} "
          f"cracks_detected={rows[-1]['cracks_detected_cum']}")
    return 0


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args) or 0
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
