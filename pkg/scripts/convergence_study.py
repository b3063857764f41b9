"""Temporal refinement study on a manufactured case for both schemes."""
import argparse
import os

from projflow.verification import convergence_study, get_case


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--case", default="case_a", choices=["case_a", "case_b"])
    ap.add_argument("--nx", type=int, default=16)
    ap.add_argument("--mu", type=float, default=0.05)
    ap.add_argument("--T", type=float, default=1.0)
    ap.add_argument("--dt", type=float, nargs="+", default=[1 / 20, 1 / 40, 1 / 80])
    ap.add_argument("--out", default="results")
    args = ap.parse_args()

    os.makedirs(args.out, exist_ok=True)
    case = get_case(args.case, args.mu, args.T)
    schedule = [(args.nx, dt) for dt in args.dt]
    for scheme in ("chorin_darcy", "incremental_poisson"):
        rep = convergence_study(case, schedule, scheme)
        print(rep.table(), end="\n\n")
        rep.to_csv(os.path.join(args.out, f"convergence_{args.case}_{scheme}.csv"))


if __name__ == "__main__":
    main()
