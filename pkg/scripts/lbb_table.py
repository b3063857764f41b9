"""Inf-sup constants of P2/P1 and P1/P1 on structured meshes."""
import argparse

from projflow import linsolve
from projflow.assembly import build_operators
from projflow.fespace import build_space
from projflow.mesh import generate_structured


def beta(nx, vdeg):
    m = generate_structured(nx, nx)
    ops = build_operators(build_space(m, vdeg, "zero_trace"), build_space(m, 1, "zero_mean"))
    method = "iterative" if vdeg == 2 else "dense"
    return linsolve.estimate_lbb(ops.M_u, ops.A_u, ops.B, ops.M_p, method=method)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--nx", type=int, nargs="+", default=[2, 4, 8, 16])
    args = ap.parse_args()
    print(f"{'nx':>4} {'P2/P1':>10} {'P1/P1':>10} {'P1/P1 drop':>11}")
    prev = None
    for nx in args.nx:
        b2, b1 = beta(nx, 2), beta(nx, 1)
        drop = "-" if prev is None else f"{100 * (1 - b1 / prev):.1f}%"
        print(f"{nx:>4} {b2:>10.5f} {b1:>10.5f} {drop:>11}")
        prev = b1


if __name__ == "__main__":
    main()
