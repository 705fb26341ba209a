"""Bias of E[U] for the kinetic schemes on Bayesian logistic regression.

Desk-scale default: synthetic data (N=500, d=20, prior variance 0.01), stepsizes
h0/4 and h0/2 per scheme at gamma = 5 sqrt(M), compared with a long BAOAB run at
a smaller stepsize.  With --mnist-images/--mnist-labels the script instead runs
the full standard grid (h in {2, 1, 1/2, 1/4}/sqrt(M), gamma in {sqrt(M),
sqrt(m)} from the Hessian at the minimizer) and prints the table blocks; that
mode is long-running and its values are only qualitatively comparable.
"""
import argparse
import math

from langevin_kit.contraction import constants_for, implicit_h0
from langevin_kit.diagnostics import (
    MNIST_POSTERIOR_SD_U,
    MNIST_PRIOR_VARIANCE,
    EstimatorConfig,
    bias_table,
    format_block_table,
    reference_run,
    rows_to_csv,
)
from langevin_kit.integrators import KINETIC_SCHEMES, IntegratorParams, SchemeId
from langevin_kit.diagnostics import run_sampler
from langevin_kit.potentials import blr_potential, load_idx, synth_dataset


def desk(args):
    pot = blr_potential(synth_dataset(args.data_seed, 500, 20, 2.0, args.prior_variance))
    gamma = 5 * math.sqrt(pot.M)
    h0 = {}
    for s in args.schemes:
        k = constants_for(s, pot.m, pot.M, gamma, 1e-6)
        h0[s] = implicit_h0(s, pot.M, gamma) if k.implicit else k.h0
    ref = reference_run(pot, min(h0.values()) / 16, gamma, 10 * args.iterations, 10 * args.burn_in,
                        args.replicas, seed=args.seed)
    print(f"reference E[U] = {ref.mean:.6g} +/- {ref.se:.3g} ({ref.source})")
    print("scheme,h,gamma,bias,se,z,ess,grad_evals")
    for i, s in enumerate(args.schemes):
        for j, frac in enumerate((0.25, 0.5)):
            out = run_sampler(s, pot, None, IntegratorParams(frac * h0[s], gamma), args.iterations, args.burn_in,
                              args.replicas, seed=args.seed + 1, stream_id=2 * i + j)
            if not out.ok:
                print(f"{s},{frac * h0[s]:.6g},{gamma:.6g},N.A.")
                continue
            bias, se = out.mean - ref.mean, math.hypot(out.se, ref.se)
            print(f"{s},{frac * h0[s]:.6g},{gamma:.6g},{bias:.4g},{se:.3g},{bias / se:.2f},{out.ess:.0f},"
                  f"{out.grad_evals}")


def reproduction(args):
    ds = load_idx(args.mnist_images, args.mnist_labels, args.digits, MNIST_PRIOR_VARIANCE)
    pot = blr_potential(ds)
    q = pot.minimizer()
    m_h, M_h = pot.hessian_extremes(q)
    print(f"N={ds.n} d={ds.d} Hessian-at-minimizer m={m_h:.6g} M={M_h:.6g}; "
          f"reference posterior sd of U in the original setting: {MNIST_POSTERIOR_SD_U}")
    hs = [c / math.sqrt(M_h) for c in (2.0, 1.0, 0.5, 0.25)]
    gammas = [math.sqrt(M_h), math.sqrt(m_h)]
    labels = {h: f"{c}/sqrt(M)" for h, c in zip(hs, ("2", "1", "1/2", "1/4"))}
    rows, ref = bias_table(KINETIC_SCHEMES, pot, [EstimatorConfig()], hs, gammas, None, args.replicas,
                           args.iterations, args.burn_in, args.seed)
    vr, _ = bias_table([SchemeId.BAOAB], pot, [EstimatorConfig("variance-reduced", 100)], hs, gammas, ref,
                       args.replicas, args.iterations, args.burn_in, args.seed + 1, q)
    rows += vr
    if args.out:
        open(args.out, "w").write(rows_to_csv(rows))
    print(format_block_table(rows, labels))


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--schemes", nargs="+", default=["BAOAB", "OBABO", "rOABAO", "BBK"])
    p.add_argument("--iterations", type=int, default=10000)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--replicas", type=int, default=16)
    p.add_argument("--prior-variance", type=float, default=0.01)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mnist-images")
    p.add_argument("--mnist-labels")
    p.add_argument("--digits", type=int, nargs=2, default=(3, 5))
    p.add_argument("--out")
    args = p.parse_args()
    if args.mnist_images and args.mnist_labels:
        reproduction(args)
    else:
        desk(args)


if __name__ == "__main__":
    main()
