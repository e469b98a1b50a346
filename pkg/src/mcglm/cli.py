"""Batch front door: fit / simulate / check-derivatives / build-matrices.

The model is described by a JSON document (schema shipped as
spec_schema.json next to this module) plus a CSV data file with one row
per observation unit: response columns and covariate columns side by
side. Rows with a missing value in any referenced column are dropped
entirely before assembly.
"""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_NOCONV = 2
EXIT_NONPD = 3
EXIT_DERIV = 4


class InputError(Exception):
    pass


def _load_schema():
    with open(Path(__file__).with_name("spec_schema.json")) as fh:
        return json.load(fh)


def load_spec_document(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}")
    import jsonschema

    try:
        jsonschema.validate(doc, _load_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise InputError(f"{path}: schema violation at {where}: {exc.message}")
    return doc


def resolve_data_path(args, doc):
    """Data file from --data or the document, relative to the spec file."""
    if args.data is not None:
        return args.data
    path = doc.get("data", {}).get("path")
    if path is None:
        raise InputError("no data file: pass --data or set data.path in the spec")
    path = Path(path)
    if not path.is_absolute():
        path = Path(args.spec).parent / path
    return str(path)


def read_csv_columns(path, missing="NA"):
    """Read a CSV into {column: list-of-str}; RFC-4180 quoting."""
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None:
                raise InputError(f"{path}: empty file")
            cols = {name: [] for name in reader.fieldnames}
            for lineno, row in enumerate(reader, 2):
                for name in cols:
                    val = row.get(name)
                    if val is None:
                        raise InputError(f"{path}:{lineno}: short row")
                    cols[name].append(val)
    except OSError as exc:
        raise InputError(f"{path}: {exc}")
    return cols


def _numeric(cols, name, missing, path):
    import numpy as np

    if name not in cols:
        raise InputError(f"{path}: column {name!r} not found")
    out = []
    for i, v in enumerate(cols[name]):
        if v == missing or v == "":
            out.append(np.nan)
        else:
            try:
                out.append(float(v))
            except ValueError:
                raise InputError(
                    f"{path}: row {i + 2}, column {name!r}: not a number: {v!r}"
                )
    return np.asarray(out)


def _referenced_columns(doc):
    cols = set()
    for resp in doc["responses"]:
        cols.add(resp["name"])
        cols.update(resp["design_columns"])
        for comp in resp["predictor"]:
            for key in ("groups", "positions", "levels"):
                if key in comp:
                    cols.add(comp[key])
    return cols


def _build_component(comp, cols, keep, missing, data_path, spec_dir):
    import numpy as np

    from . import matpred

    kind = comp["type"]
    n = int(keep.sum())
    if kind == "identity":
        return matpred.mat_identity(n)
    if kind == "compound_symmetry":
        groups = np.asarray(cols[comp["groups"]])[keep]
        return matpred.mat_compound_symmetry(groups)
    if kind == "inverse_distance":
        pos = _numeric(cols, comp["positions"], missing, data_path)[keep]
        groups = None
        if "groups" in comp:
            groups = np.asarray(cols[comp["groups"]])[keep]
        return matpred.mat_inverse_distance(pos, comp.get("exponent", 1), groups)
    if kind == "pair_indicator":
        levels = np.asarray(cols[comp["levels"]])[keep]
        groups = np.asarray(cols[comp["groups"]])[keep]
        return matpred.mat_pair_indicator(levels, tuple(comp["pair"]), groups)
    if kind == "file":
        path = Path(comp["path"])
        if not path.is_absolute():
            path = spec_dir / path
        sm = matpred.load_structure_matrix(str(path))
        if sm.dim != keep.size:
            raise InputError(
                f"{path}: dimension {sm.dim} does not match data rows {keep.size}"
            )
        idx = np.flatnonzero(keep)
        return matpred.StructureMatrix.from_dense(
            sm.dense()[np.ix_(idx, idx)], label=sm.label
        )
    raise InputError(f"unknown predictor component type {kind!r}")


def build_model_and_data(doc, data_path, spec_dir):
    """ModelSpec plus the stacked response vector, after complete-case filtering."""
    import numpy as np

    from . import matpred
    from .functions import CovLinkSpec, LinkSpec, VarianceSpec
    from .model import ModelSpec, ResponseSpec, complete_case_mask

    missing = doc.get("data", {}).get("missing", "NA")
    cols = read_csv_columns(data_path, missing)

    needed_numeric = []
    for resp in doc["responses"]:
        needed_numeric.append(resp["name"])
        needed_numeric.extend(resp["design_columns"])
        for comp in resp["predictor"]:
            if comp["type"] == "inverse_distance":
                needed_numeric.append(comp["positions"])
    arrays = {name: _numeric(cols, name, missing, data_path) for name in needed_numeric}
    for resp in doc["responses"]:
        for comp in resp["predictor"]:
            for key in ("groups", "levels"):
                if key in comp and comp[key] not in cols:
                    raise InputError(f"{data_path}: column {comp[key]!r} not found")

    keep = complete_case_mask(arrays.values())
    if not keep.any():
        raise InputError(f"{data_path}: no complete cases")

    responses = []
    ys = []
    for resp in doc["responses"]:
        design = np.column_stack([arrays[c][keep] for c in resp["design_columns"]])
        components = [
            _build_component(c, cols, keep, missing, data_path, spec_dir)
            for c in resp["predictor"]
        ]
        power = resp.get("power", {})
        variance = VarianceSpec(resp["variance"], power_known=power.get("fixed", True))
        responses.append(
            ResponseSpec(
                name=resp["name"],
                link=LinkSpec(resp["link"]),
                variance=variance,
                covlink=CovLinkSpec(resp["covlink"]),
                design=design,
                predictor=matpred.MatrixPredictor(tuple(components)),
                power_value=power.get("value", 1.0),
            )
        )
        ys.append(arrays[resp["name"]][keep])

    between = doc.get("between", "free")
    rho_fixed = None if between == "free" else np.asarray(between, dtype=float)
    model = ModelSpec(tuple(responses), rho_fixed=rho_fixed)
    return model, np.concatenate(ys), cols, keep


def solver_options(doc, overrides):
    from .solver import SolverOptions

    cfg = dict(doc.get("solver", {}))
    cfg.update({k: v for k, v in overrides.items() if v is not None})
    return SolverOptions(**cfg)


def _fmt(x):
    return f"{x:.17g}"


def write_fit_outputs(out_dir, model, result):
    import numpy as np

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = model.parameter_names()
    est = result.theta_hat.flat
    se = result.std_errors
    with open(out / "estimates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "estimate", "std_error", "z"])
        for name, e, s in zip(names, est, se):
            z = e / s if s > 0 else float("nan")
            w.writerow([name, _fmt(e), _fmt(s), _fmt(z)])

    if model.R > 1:
        from .covariance import sigma_b_from_rho
        from .model import rho_index_pairs

        rho, _, _ = model.split_lambda(result.theta_hat.lam)
        Sb = sigma_b_from_rho(rho, model.R)
        lam_names = names[model.K :]
        rho_se = {}
        for pos, (role, i, _) in enumerate(model.lambda_index_map()):
            if role == "rho":
                rho_se[i] = se[model.K + pos]
        with open(out / "sigma_b.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "col", "estimate", "std_error"])
            for i, (a, b) in enumerate(rho_index_pairs(model.R)):
                s = rho_se.get(i)
                w.writerow(
                    [
                        model.responses[a].name,
                        model.responses[b].name,
                        _fmt(Sb[a, b]),
                        _fmt(s) if s is not None else "",
                    ]
                )

    N = model.N
    with open(out / "fitted.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["row"] + [r.name for r in model.responses])
        for i in range(N):
            w.writerow(
                [i] + [_fmt(result.fitted[r * N + i]) for r in range(model.R)]
            )

    doc = {
        "converged": bool(result.converged),
        "n_iter": int(result.n_iter),
        "n_alpha_escalations": int(result.n_alpha_escalations),
        "parameters": names,
        "estimates": [float(x) for x in est],
        "std_errors": [float(x) for x in se],
        "trace": [
            {"score_norm": float(t.score_norm), "alpha": float(t.alpha)}
            for t in result.trace
        ],
    }
    with open(out / "result.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_fit(args):
    try:
        doc = load_spec_document(args.spec)
        data_path = resolve_data_path(args, doc)
        model, y, _, _ = build_model_and_data(doc, data_path, Path(args.spec).parent)
        opts = solver_options(
            doc, {"max_iter": args.max_iter, "algorithm": args.alg}
        )
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    from .errors import McglmError
    from .solver import fit

    try:
        result = fit(model, y, opts)
    except McglmError as exc:
        print(f"error: fit failed: {exc}", file=sys.stderr)
        return EXIT_NOCONV
    write_fit_outputs(args.out, model, result)
    if not result.converged:
        print(
            f"did not converge in {result.n_iter} iterations "
            f"(trace written to {args.out})",
            file=sys.stderr,
        )
        return EXIT_NOCONV
    print(f"converged in {result.n_iter} iterations; results in {args.out}")
    return EXIT_OK


def _read_theta(model, path):
    import numpy as np

    from .model import make_theta

    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"{path}: {exc}")
    try:
        beta = [np.asarray(b, dtype=float) for b in doc["beta"]]
        tau = [np.asarray(t, dtype=float) for t in doc["tau"]]
        rho = np.asarray(doc.get("rho", []), dtype=float)
        p = np.asarray(doc.get("p", [1.0] * model.R), dtype=float)
    except (KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: bad theta document: {exc}")
    if len(beta) != model.R or len(tau) != model.R or p.size != model.R:
        raise InputError(f"{path}: theta does not match the model's {model.R} responses")
    for b, resp in zip(beta, model.responses):
        if b.size != resp.k:
            raise InputError(
                f"{path}: beta for {resp.name!r} has length {b.size}, expected {resp.k}"
            )
    for t, resp in zip(tau, model.responses):
        if t.size != resp.predictor.D_plus_1:
            raise InputError(
                f"{path}: tau for {resp.name!r} has length {t.size}, "
                f"expected {resp.predictor.D_plus_1}"
            )
    if model.rho_free and rho.size != model.n_rho:
        raise InputError(f"{path}: rho has length {rho.size}, expected {model.n_rho}")
    lam = model.pack_lambda(rho, p, tau)
    return make_theta(model, np.concatenate(beta), lam)


def cmd_simulate(args):
    try:
        doc = load_spec_document(args.spec)
        data_path = resolve_data_path(args, doc)
        model, _, cols, keep = build_model_and_data(doc, data_path, Path(args.spec).parent)
        theta = _read_theta(model, args.theta)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    import numpy as np

    from .errors import FactorizationError
    from .simulate import SimSpec, simulate_gaussian

    try:
        reps = simulate_gaussian(SimSpec(model, theta, args.n, args.seed))
    except FactorizationError as exc:
        print(f"error: non-positive-definite covariance: {exc}", file=sys.stderr)
        return EXIT_NONPD

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    N = model.N
    idx = np.flatnonzero(keep)
    covariate_names = [
        c for c in cols if c not in {r.name for r in model.responses}
    ]
    for i in range(args.n):
        with open(out / f"rep_{i + 1:04d}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([r.name for r in model.responses] + covariate_names)
            for row in range(N):
                vals = [_fmt(reps[i, r * N + row]) for r in range(model.R)]
                vals += [cols[c][idx[row]] for c in covariate_names]
                w.writerow(vals)
    print(f"wrote {args.n} replicates to {out}")
    return EXIT_OK


def cmd_check_derivatives(args):
    try:
        doc = load_spec_document(args.spec)
        data_path = resolve_data_path(args, doc)
        model, y, _, _ = build_model_and_data(doc, data_path, Path(args.spec).parent)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT

    import numpy as np

    from .checks import derivative_probe
    from .errors import FactorizationError
    from .model import make_theta
    from .solver import initialize

    base = initialize(model, y)
    rng = np.random.default_rng(args.seed)

    def draw(_attempt):
        beta = base.beta + 0.05 * rng.standard_normal(base.beta.size)
        lam = base.lam.copy()
        for pos, (role, r, d) in enumerate(model.lambda_index_map()):
            if role == "rho":
                lam[pos] = rng.uniform(-0.3, 0.3)
            elif role == "power":
                lam[pos] = base.lam[pos] + rng.uniform(-0.1, 0.1)
            elif d == 0:
                lam[pos] = base.lam[pos] * rng.uniform(0.8, 1.2)
            else:
                lam[pos] = 0.05 * abs(base.lam[pos - d]) * rng.standard_normal()
        return make_theta(model, beta, lam)

    try:
        report = derivative_probe(model, y, draw, corrupt=args.corrupt)
    except FactorizationError as exc:
        print(f"error: no positive-definite probe point found: {exc}", file=sys.stderr)
        return EXIT_NONPD

    failed = []
    for family in sorted(report):
        err = report[family]
        status = "ok" if err < 1e-5 else "FAIL"
        print(f"{family}: worst relative error {err:.3e} [{status}]")
        if err >= 1e-5:
            failed.append(family)
    if failed:
        print(f"derivative mismatch in: {', '.join(failed)}", file=sys.stderr)
        return EXIT_DERIV
    return EXIT_OK


def _read_edges(path):
    edges = []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2:
                    raise InputError(f"{path}:{lineno}: expected 'i j'")
                edges.append((int(parts[0]), int(parts[1])))
    except OSError as exc:
        raise InputError(f"{path}: {exc}")
    return edges


def cmd_build_matrices(args):
    from . import matpred
    from .errors import DomainError

    try:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.kind == "neighborhood":
            edges = _read_edges(args.edges)
            W, Dg = matpred.mat_neighborhood(edges, args.n)
            matpred.save_structure_matrix(W, out / f"{args.prefix}W.txt")
            matpred.save_structure_matrix(Dg, out / f"{args.prefix}D.txt")
            if args.icar:
                Z = matpred.mat_sum(Dg, W, label="icar D+W")
                matpred.save_structure_matrix(Z, out / f"{args.prefix}Zicar.txt")
        else:  # kron
            A = matpred.load_structure_matrix(args.a)
            B = matpred.load_structure_matrix(args.b)
            matpred.save_structure_matrix(
                matpred.mat_kronecker(A, B), out / f"{args.prefix}kron.txt"
            )
    except (InputError, DomainError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def make_parser():
    parser = argparse.ArgumentParser(
        prog="mcglm",
        description="Fit multivariate covariance GLMs from second-moment assumptions.",
    )
    parser.add_argument("--threads", type=int, default=None, help="bound BLAS threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model to data")
    p_fit.add_argument("--spec", required=True)
    p_fit.add_argument("--data", default=None)
    p_fit.add_argument("--out", required=True)
    p_fit.add_argument("--max-iter", type=int, default=None, dest="max_iter")
    p_fit.add_argument("--alg", choices=["chaser", "reciprocal"], default=None)
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="draw Gaussian replicates at a theta")
    p_sim.add_argument("--spec", required=True)
    p_sim.add_argument("--data", default=None)
    p_sim.add_argument("--theta", required=True)
    p_sim.add_argument("--n", type=int, required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", required=True)
    p_sim.set_defaults(func=cmd_simulate)

    p_chk = sub.add_parser(
        "check-derivatives", help="verify analytic covariance derivatives"
    )
    p_chk.add_argument("--spec", required=True)
    p_chk.add_argument("--data", default=None)
    p_chk.add_argument("--seed", type=int, default=0)
    p_chk.add_argument("--corrupt", default=None, help=argparse.SUPPRESS)
    p_chk.set_defaults(func=cmd_check_derivatives)

    p_bm = sub.add_parser("build-matrices", help="write structure-matrix files")
    bm_sub = p_bm.add_subparsers(dest="kind", required=True)
    p_nb = bm_sub.add_parser("neighborhood")
    p_nb.add_argument("--edges", required=True, help="file of 'i j' lines, 0-based")
    p_nb.add_argument("--n", type=int, required=True)
    p_nb.add_argument("--out", required=True)
    p_nb.add_argument("--prefix", default="")
    p_nb.add_argument("--icar", action="store_true", help="also write D + W")
    p_nb.set_defaults(func=cmd_build_matrices)
    p_kr = bm_sub.add_parser("kron")
    p_kr.add_argument("--a", required=True)
    p_kr.add_argument("--b", required=True)
    p_kr.add_argument("--out", required=True)
    p_kr.add_argument("--prefix", default="")
    p_kr.set_defaults(func=cmd_build_matrices)

    return parser


def main(argv=None):
    args = make_parser().parse_args(argv)
    if args.threads is not None:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
