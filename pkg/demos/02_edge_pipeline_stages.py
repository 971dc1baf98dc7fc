"""Walk one crack patch through every stage of the edge detector and write
each intermediate as a PGM image next to this script (demos/out/edges/)."""

import os

import numpy as np

from bridgesurvey import detect, render

OUT = os.path.join(os.path.dirname(__file__), "out", "edges")


def save(name, img01):
    path = os.path.join(OUT, name)
    render.write_pgm(path, np.clip(img01, 0.0, 1.0))
    return path


def describe(tag, patch):
    result = detect.canny(patch.pixels)
    decision = detect.decide_canny(result)
    mag = result.magnitude
    save(f"{tag}_0_input.pgm", patch.pixels)
    save(f"{tag}_1_magnitude.pgm", mag / mag.max() if mag.max() > 0 else mag)
    save(f"{tag}_2_nms.pgm", result.nms / mag.max() if mag.max() > 0 else result.nms)
    save(f"{tag}_3_strong.pgm", result.strong.astype(float))
    save(f"{tag}_4_edges.pgm", result.edges.astype(float))
    print(f"{tag:>6}: strong={int(result.strong.sum()):>4} "
          f"weak={int(result.weak.sum()):>4} "
          f"edges={int(result.edges.sum()):>4} "
          f"confidence={decision.confidence:.2f} "
          f"-> {'crack' if decision.present else 'no crack'}")


def main():
    os.makedirs(OUT, exist_ok=True)
    rng = np.random.default_rng(7)
    rcfg = render.RenderConfig()
    ccfg = render.CrackConfig()
    describe("crack", render.sample_patch("crack", rcfg, ccfg, rng))
    describe("clean", render.sample_patch("none", rcfg, ccfg, rng))
    describe("false", render.sample_patch("false", rcfg, ccfg, rng))
    print(f"\nstage images under {OUT}")
    print("decision rule: edge pixels / (2 * patch side) >= 0.6")


if __name__ == "__main__":
    main()
