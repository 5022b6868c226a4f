"""Richer scattering makes extrapolation harder.

Sweeps the number of propagation paths per user and reports each method's sum
SE as a percentage of the perfect-CSIT design.

    python demos/path_count.py --trials 40
"""

import argparse

from fddrsma import ExperimentSpec, Scenario, SystemConfig, run_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--trials", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = SystemConfig(n_antennas=16, n_users=8, n_subcarriers=64, subcarrier_spacing=100e6 / 64)
    sc = Scenario(snr_db=20.0, methods=("proposed", "sdma_gpi", "mrt", "perfect_csit_ref"))
    spec = ExperimentSpec(axis="n_paths", values=(1, 2, 4, 7), trials=args.trials,
                          master_seed=args.seed, cfg=cfg, scenario=sc)
    rows = run_experiment(spec)

    print(f"{'L':>3}  {'proposed':>9}  {'sdma_gpi':>9}  {'mrt':>9}   (% of perfect CSIT)")
    for L in spec.values:
        pct = {r["method"]: r["pct_of_perfect"] for r in rows if r["value"] == L}
        print(f"{L:>3}  {pct['proposed']:9.1f}  {pct['sdma_gpi']:9.1f}  {pct['mrt']:9.1f}")


if __name__ == "__main__":
    main()
