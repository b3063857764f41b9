"""Squared L2(0,T;L2) distances between time interpolants under dt halving,
for rough (L2 but not H1) initial data."""
import argparse

from projflow.diagnostics import interpolant_difference_norms
from projflow.mesh import generate_structured
from projflow.scheme import Discretization, SimulationConfig, run
from projflow.verification import vortex_patch


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nx", type=int, default=16)
    ap.add_argument("--mu", type=float, default=0.1)
    ap.add_argument("--T", type=float, default=1.0)
    ap.add_argument("--dt", type=float, nargs="+", default=[0.1, 0.05, 0.025])
    args = ap.parse_args()
    disc = Discretization.taylor_hood(generate_structured(args.nx, args.nx))
    for scheme in ("chorin_darcy", "incremental_poisson"):
        rows = []
        for dt in args.dt:
            res = run(SimulationConfig(mu=args.mu, T=args.T, dt=dt, scheme=scheme), disc.mesh, None, vortex_patch, disc=disc)
            rows.append(interpolant_difference_norms(res.states, dt, disc.ops))
        print(scheme)
        for key in rows[0]:
            vals = [r[key] for r in rows]
            ratios = " ".join(f"{vals[k + 1] / vals[k]:.3f}" for k in range(len(vals) - 1))
            print(f"  {key:15s} " + " ".join(f"{v:.4e}" for v in vals) + f"   ratios {ratios}")


if __name__ == "__main__":
    main()
