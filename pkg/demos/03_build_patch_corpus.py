"""Generate a labeled patch corpus and verify it reloads bit-for-bit."""

import argparse
import collections
import filecmp
import os
import tempfile

import numpy as np

from bridgesurvey import render


def generate(n, seed, out_dir):
    rng = np.random.default_rng(seed)
    return render.gen_dataset(n, balance=0.5, render_cfg=render.RenderConfig(),
                              crack_cfg=render.CrackConfig(), rng=rng,
                              out_dir=out_dir)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--n", type=int, default=200)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--out", default=os.path.join(os.path.dirname(__file__),
                                                  "out", "corpus"))
    args = ap.parse_args()

    manifest = generate(args.n, args.seed, args.out)
    pixels, labels = render.load_dataset(manifest)

    counts = collections.Counter(labels)
    print(f"wrote {args.n} patches to {args.out}")
    print(f"labels: {dict(sorted(counts.items()))}")
    print(f"pixels: shape={pixels.shape} "
          f"range=[{pixels.min():.3f}, {pixels.max():.3f}] "
          f"mean={pixels.mean():.3f}")

    # same seed, same bytes
    with tempfile.TemporaryDirectory() as tmp:
        again = generate(args.n, args.seed, tmp)
        names = [f for f in os.listdir(args.out) if f.endswith(".pgm")]
        match, mismatch, errors = filecmp.cmpfiles(args.out, tmp, names,
                                                   shallow=False)
        same_manifest = open(manifest, "rb").read() == open(again, "rb").read()
        print(f"regeneration: {len(match)}/{len(names)} patches identical, "
              f"manifest identical={same_manifest}")
        assert not mismatch and not errors and same_manifest


if __name__ == "__main__":
    main()
