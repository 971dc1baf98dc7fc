"""Check analytic backprop against central finite differences.

Builds two networks, a small dense net and the 64x64 conv crack classifier,
and prints the worst relative gradient error per seed. The conv net is probed
with a smaller step: max-pool ties and relu kinks inside the +-h interval
corrupt a central difference long before float64 roundoff does.
"""

import numpy as np

from bridgesurvey import detect, nn

SEEDS = range(5)


def squared_loss(y):
    return 0.5 * float((y ** 2).sum()), y


def check_mlp(seed):
    spec = nn.NetworkSpec(layers=(nn.Dense(4, 8), nn.Relu(), nn.Dense(8, 2)),
                          input_shape=(4,))
    rng = np.random.default_rng(seed)
    params = nn.init_params(spec, rng)
    x = rng.normal(size=(3, 4))
    return nn.gradient_check(spec, params, x, squared_loss)


def check_conv(seed):
    spec = detect.classifier_spec(resolution=64)
    rng = np.random.default_rng(seed)
    params = nn.init_params(spec, rng)
    x = rng.uniform(size=(1, 64, 64))
    # 20 coordinates per array keeps this under a second per seed
    return nn.gradient_check(spec, params, x, squared_loss,
                             perturbation=1e-7, max_coords=20, rng=rng)


def main():
    print(f"{'seed':>4}  {'mlp 4-8-2':>12}  {'conv classifier':>16}")
    worst_mlp = worst_conv = 0.0
    for seed in SEEDS:
        m, c = check_mlp(seed), check_conv(seed)
        worst_mlp, worst_conv = max(worst_mlp, m), max(worst_conv, c)
        print(f"{seed:>4}  {m:>12.3e}  {c:>16.3e}")
    print(f"\nworst relative error: mlp {worst_mlp:.3e}, conv {worst_conv:.3e}")
    print("bars: mlp 1e-4, conv 1e-3")
    assert worst_mlp <= 1e-4 and worst_conv <= 1e-3


if __name__ == "__main__":
    main()
