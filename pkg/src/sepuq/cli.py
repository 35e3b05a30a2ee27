"""Command-line entry point.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .config import PROFILES, load_config
from .errors import NumericalError, ValidationError
from .experiment import Pipeline, report
from .kle import energy_ratio

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _cmd_kle_build(pipe: Pipeline, args) -> dict:
    basis = pipe.basis()
    return {"n_kl": basis.n_terms, "eigenvalues": basis.eigenvalues.tolist(),
            "energy_ratio": energy_ratio(basis, basis.n_terms)}


def _cmd_pgd_build(pipe: Pipeline, args) -> dict:
    sol = pipe.surrogate()
    return {"n_terms": sol.n_terms,
            "energies": [d.energy for d in sol.diagnostics],
            "residuals": [d.residual for d in sol.diagnostics]}


def _cmd_forward_bench(pipe: Pipeline, args) -> dict:
    return pipe.forward_bench()


def _cmd_gen_data(pipe: Pipeline, args) -> dict:
    d = pipe.data()
    return {"n_obs": int(d["y"].size), "sigma_y": d["sigma_y"],
            "theta_ref": d["theta_ref"].tolist()}


def _inversion_summary(res: dict) -> dict:
    return {"method": res["method"], "misfit": res["misfit"], "sigma_y": res["sigma_y"],
            "field_error": res["field_error"], "seconds": res["seconds"],
            "iterations": res["iterations"], "theta_mean": np.asarray(res["theta_mean"]).tolist(),
            "config_hash": res["config_hash"]}


def _cmd_invert_vb(pipe: Pipeline, args) -> dict:
    res = pipe.invert_vb()
    return {**_inversion_summary(res), "converged": res["converged"]}


def _cmd_invert_mcmc(pipe: Pipeline, args) -> dict:
    res = pipe.invert_mcmc()
    return {**_inversion_summary(res), "warnings": res["warnings"]}


COMMANDS = {
    "kle-build": (_cmd_kle_build, "build and store the truncated KL basis"),
    "pgd-build": (_cmd_pgd_build, "build and store the separable surrogate"),
    "forward-bench": (_cmd_forward_bench, "surrogate vs FEM errors on prior samples"),
    "gen-data": (_cmd_gen_data, "reference field and noisy FEM observations"),
    "invert-vb": (_cmd_invert_vb, "variational Bayes inversion"),
    "invert-mcmc": (_cmd_invert_mcmc, "MCMC inversion"),
    "report": (None, "summarize inversions and write plot data"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sepuq", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", metavar="PATH", help="TOML file layered over the profile")
        p.add_argument("--seed", type=int, metavar="N", help="override the experiment seed")
        p.add_argument("--out", metavar="DIR", default="sepuq-out", help="artifact directory")
        p.add_argument("--profile", choices=sorted(PROFILES), default="ci")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            print(report(args.out), end="")
            return EXIT_OK
        config = load_config(args.config, args.profile, args.seed)
        handler = COMMANDS[args.command][0]
        result = handler(Pipeline(config, args.out), args)
        print(json.dumps(result, indent=2))
        return EXIT_OK
    except ValidationError as exc:
        print(f"sepuq: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"sepuq: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
