"""Certificate minima for BBK, SPV and rOABAO as gamma moves through and past each region boundary."""
import argparse
import math

from langevin_kit.contraction import certify, constants_for, implicit_h0


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--m", type=float, default=1.0)
    p.add_argument("--M", type=float, default=10.0)
    p.add_argument("--lambda-points", type=int, default=2048)
    p.add_argument("--u-points", type=int, default=256)
    args = p.parse_args()

    print("scheme,gamma,h,in_region,min_A,min_AC_minus_B2,pass")
    for scheme in ("BBK", "SPV", "rOABAO"):
        gamma0 = constants_for(scheme, args.m, args.M, 1.0, 1.0).gamma0
        for mult in (0.8, 1.01, 1.5, 3.0):
            gamma = gamma0 * mult
            if scheme == "rOABAO":
                h = max(implicit_h0(scheme, args.M, gamma), 1e-3 / gamma) / 2
            else:
                h = constants_for(scheme, args.m, args.M, gamma, 1.0).h0 / 2
            rep = certify(scheme, args.m, args.M, gamma, h, args.lambda_points, args.u_points)
            k = constants_for(scheme, args.m, args.M, gamma, h)
            print(f"{scheme},{gamma:.6g},{h:.6g},{k.in_region},{rep.min_A:.4g},{rep.min_det:.4g},{rep.passed}")


if __name__ == "__main__":
    main()
