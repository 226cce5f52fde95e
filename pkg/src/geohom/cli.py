"""Command-line driver: ``geohom <command> [options]``.

Exit codes: 0 on success, 1 on invalid input or usage, 2 on numerical failure.
Every artifact starts with a provenance header (version, config hash and
input hashes) and contains no timestamps, so reruns are byte-identical.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import io as gio
from .errors import GeohomError, NumericalError, ValidationError

THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


class UsageError(ValidationError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


# ---------------------------------------------------------------------------
# helpers

def _config(args):
    skip = {"func", "out", "svg", "energy", "mesh_out", "qh_out", "q_out", "history", "sigma_out",
            "lcurve_out"}
    return {k: v for k, v in sorted(vars(args).items()) if k not in skip}


def _inputs(args, *names):
    return [getattr(args, n) for n in names if isinstance(getattr(args, n, None), str)]


def _header(args, *inputs):
    return gio.provenance(args.command, _config(args), _inputs(args, *inputs))


def _write_csv(path, args, body, *inputs):
    gio.write_text(path, gio.with_header(body, _header(args, *inputs), "csv"))


def _mesh(path):
    from .mesh import load_mesh
    try:
        return load_mesh(path)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read mesh {path!r}: {exc}") from None


def _read(path):
    try:
        with open(path) as f:
            return f.read()
    except OSError as exc:
        raise ValidationError(f"cannot read {path!r}: {exc}") from None


def _floats(text, n=None, flag="value"):
    try:
        vals = [float(x) for x in text.split(",")]
    except ValueError:
        raise ValidationError(f"{flag}: expected comma-separated numbers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise ValidationError(f"{flag}: expected {n} numbers")
    return vals


def _emit(obj):
    print(json.dumps(obj, sort_keys=True))


# ---------------------------------------------------------------------------
# commands

def cmd_solve(args):
    from .fem import solve_dirichlet
    mesh = _mesh(args.mesh)
    sigma = gio.load_sigma(args.sigma, mesh)
    u = solve_dirichlet(mesh, sigma, args.f, args.g)
    v = mesh.vertices
    _write_csv(args.out, args, gio.table_to_csv([v[:, 0], v[:, 1], u], ["x", "y", "u"]), "mesh", "sigma")
    _emit({"max_u": float(np.max(u)), "min_u": float(np.min(u))})


def cmd_harmonic(args):
    from .fem import harmonic_coordinates
    mesh = _mesh(args.mesh)
    F = harmonic_coordinates(mesh, gio.load_sigma(args.sigma, mesh))
    v, X = mesh.vertices, F.images
    body = gio.table_to_csv([v[:, 0], v[:, 1], X[:, 0], X[:, 1]], ["x", "y", "F1", "F2"])
    _write_csv(args.out, args, body, "mesh", "sigma")
    _emit({"injective": F.injective, "min_det": float(F.det.min())})


def cmd_sigma2q(args):
    from .fields import sigma_to_q
    mesh = _mesh(args.mesh)
    Q, F = sigma_to_q(gio.load_sigma(args.sigma, mesh), mesh, resample_mode=args.mode)
    _write_csv(args.out, args, gio.cell_field_to_csv(Q.values, mesh), "mesh", "sigma")
    _emit({"divergence_residual": float(np.max(np.abs(Q.divergence_residual)))
           if Q.divergence_residual is not None else None})


def _raster(text):
    from .fields import Raster
    return Raster.from_header(text) if text else None


def cmd_q2s(args):
    from .fields import q_to_s
    q = gio.load_q(args.q)
    s, resid = q_to_s(q, _raster(args.raster), tol=args.tol if args.tol is not None else 5e-2,
                      return_residual=True)
    body = f"# carrier raster {s.raster.header()}\n" + gio.vertex_field_to_csv(s.data, ["s"])
    _write_csv(args.out, args, body, "q")
    _emit({"closure_residual": resid})


def cmd_s2q(args):
    from .fields import s_to_q
    s = gio.load_s(args.s)
    raster = _raster(args.raster)
    if raster is None and s.kind != "raster":
        raise ValidationError("--raster is required for analytic s")
    Q = s_to_q(s, raster)
    _write_csv(args.out, args, gio.cell_field_to_csv(Q.values, Q.carrier), "s")


def cmd_homogenize(args):
    from .homogenize import homogenized_load, qh_from_sigma, solve_homogenized
    coarse = _mesh(args.mesh)
    qh = qh_from_sigma(coarse, gio.load_sigma(args.sigma, coarse), levels=args.levels,
                       boundary=args.boundary)
    _write_csv(args.out, args, qh.to_csv(), "mesh", "sigma")
    info = {"divergence_free": qh.is_divergence_free(args.tol or 1e-8),
            "min_interior_q": float(np.min(qh.interior()))}
    if args.solution:
        sol = solve_homogenized(qh, homogenized_load(qh, args.f))
        v = coarse.vertices
        _write_csv(args.solution, args, gio.table_to_csv([v[:, 0], v[:, 1], sol.values], ["x", "y", "u"]),
                   "mesh", "sigma")
        info["max_u"] = float(sol.values.max())
    _emit(info)


def cmd_semigroup(args):
    from .homogenize import semigroup_check
    coarse = _mesh(args.mesh)
    dev = semigroup_check(coarse, gio.load_sigma(args.sigma, coarse), levels=args.levels,
                          fine_levels=args.fine_levels)
    worst = max(dev["qh"], dev["sh"])
    tol = args.tol if args.tol is not None else 1e-9
    _emit({"max_deviation": worst, **dev})
    if worst >= tol:
        raise NumericalError(f"semi-group deviation {worst:.3g} exceeds {tol:.3g}")


def cmd_meshopt(args):
    from .meshopt import metric_points, optimize_mesh
    from .render import render_svg
    s = gio.load_s(args.s)
    if s.kind == "raster":
        raise ValidationError("mesh-opt needs an analytic s")
    hess = s.hessian(np.array([[0.5, 0.5]]))[0]
    H = [[hess[0], hess[1]], [hess[1], hess[2]]]
    rng = np.random.default_rng(args.seed)
    pts = metric_points(args.points, H, rng)
    mesh, state = optimize_mesh(pts, s, max_iter=args.iters, tol=args.tol if args.tol is not None else 1e-4)
    hdr = _header(args, "s")
    gio.write_text(args.out, mesh.to_json({"header": hdr}))
    if args.svg:
        gio.write_text(args.svg, gio.with_header(render_svg(mesh), hdr, "svg"))
    if args.energy:
        it = np.arange(len(state.energy))
        _write_csv(args.energy, args, gio.table_to_csv([it, state.energy], ["iteration", "E_s"]), "s")
    _emit({"iterations": state.iteration, "energy": state.energy[-1], "converged": bool(state.converged)})


def cmd_cell(args):
    from .fem import cell_problem
    res = cell_problem(args.n, gio.load_sigma(args.sigma))
    out = {"sigma_e": res.sigma_e.tolist(), "sigma_e_q": res.sigma_e_q.tolist()}
    if args.out:
        body = gio.table_to_csv([[res.sigma_e[0, 0], res.sigma_e_q[0, 0]], [res.sigma_e[0, 1], res.sigma_e_q[0, 1]],
                                 [res.sigma_e[1, 1], res.sigma_e_q[1, 1]]], ["xx", "xy", "yy"])
        _write_csv(args.out, args, body, "sigma")
    _emit(out)


def _bpoints(text, radius):
    from .mesh import polygon_points
    if os.path.isfile(text):
        _, arr = gio.read_table(_read(text))
        if arr.shape[1] != 2:
            raise ValidationError("--bpoints file needs x,y columns")
        return arr
    try:
        n = int(text)
    except ValueError:
        raise ValidationError(f"--bpoints: expected a count or a file, got {text!r}") from None
    if n < 3:
        raise ValidationError("--bpoints: need at least 3 points")
    return polygon_points(n, radius)


def cmd_eit_forward(args):
    from .eit import forward_dtn
    from . import phantoms
    name, kw = gio._kwargs(args.phantom)
    ph = phantoms.get(name, **kw)
    P = _bpoints(args.bpoints, args.radius)
    lam = forward_dtn(ph, P, h=args.h, seed=args.seed)
    if args.noise:
        lam = lam.with_noise(args.noise, np.random.default_rng(args.seed))
    gio.write_text(args.out, lam.to_csv(_header(args, "bpoints")))
    _emit({"points": lam.n, "norm": lam.norm()})


def _dtn(path):
    from .eit import DtNMatrix
    return DtNMatrix.from_csv(_read(path))


def cmd_eit_fit(args):
    from .eit import fit_coarse_network
    target = _dtn(args.dtn)
    fit = fit_coarse_network(target, n_interior=args.n_interior, seed=args.seed, n_temps=args.temps,
                             moves=args.moves)
    hdr = _header(args, "dtn")
    gio.write_text(args.mesh_out, fit.mesh.to_json({"header": hdr}))
    _write_csv(args.out, args, fit.qh.to_csv(), "dtn")
    _emit({"misfit": fit.misfit, "divergence": fit.divergence, "converged": bool(fit.converged)})


def cmd_eit_iterate(args):
    from .eit import CoarseFit, discrete_dtn, dtn_misfit, harmonic_iteration
    from .homogenize import EdgeConductivities
    target = _dtn(args.dtn)
    mesh = _mesh(args.mesh)
    qh = EdgeConductivities.from_csv(mesh, _read(args.qh))
    m0 = dtn_misfit(discrete_dtn(qh, target.points), target)
    rep = harmonic_iteration(CoarseFit(mesh, qh, m0, 0.0), target, levels=args.levels,
                             n_iters=args.iters, guard=args.guard)
    it = np.arange(len(rep.misfit))
    _write_csv(args.out, args, gio.table_to_csv([it, rep.misfit], ["iteration", "misfit"]), "dtn", "mesh", "qh")
    if args.sigma_out and rep.field is not None:
        fine = rep.extra["fine_mesh"]
        gio.write_text(args.sigma_out, gio.with_header(gio.cell_field_to_csv(rep.field.values[:, 0], fine),
                                                       _header(args, "dtn", "mesh", "qh") +
                                                       [f"fine mesh {fine.hash()}"]))
    _emit({"status": rep.status, "misfit": rep.misfit})


def cmd_eit_recover(args):
    from .eit import fourier_pairs, lcurve, recover_sh, recovered_q
    target = _dtn(args.dtn)
    mesh = _mesh(args.mesh)
    pairs = fourier_pairs(target.points, args.kmax) if args.kmax else None
    alpha = args.alpha
    info = {}
    if args.lcurve:
        alphas = _floats(args.lcurve, flag="--lcurve")
        rows, alpha = lcurve(target, mesh, alphas, pairs=pairs)
        info["lcurve"] = rows
        if args.lcurve_out:
            r = np.array(rows)
            _write_csv(args.lcurve_out, args, gio.table_to_csv(r.T, ["alpha", "misfit", "tv"]), "dtn", "mesh")
    rep = recover_sh(target, mesh, alpha=alpha, pairs=pairs)
    full = rep.extra["mesh"]
    v = full.vertices
    body = gio.table_to_csv([v[:, 0], v[:, 1], full.ghost.astype(int), rep.field], ["x", "y", "ghost", "s"])
    _write_csv(args.out, args, body, "dtn", "mesh")
    if args.q_out:
        phys, Q = recovered_q(rep)
        _write_csv(args.q_out, args, gio.cell_field_to_csv(Q, phys), "dtn", "mesh")
    info.update({"alpha": alpha, "misfit": rep.misfit[-1], "status": rep.status})
    _emit(info)


def cmd_plot(args):
    from .fields import det_packed
    from .render import render_svg
    mesh = _mesh(args.mesh)
    scalar = tensor = None
    if args.field:
        vals, carrier = gio.read_cell_field(_read(args.field), mesh)
        if carrier is not mesh:
            raise ValidationError("plot needs a field carried by --mesh")
        if args.kind == "tensor":
            tensor = vals
            scalar = np.sqrt(np.maximum(det_packed(vals), 0.0))
        else:
            scalar = vals[:, 0]
    svg = render_svg(mesh, scalar=scalar, tensor=tensor, title=args.title)
    gio.write_text(args.out, gio.with_header(svg, _header(args, "mesh", "field"), "svg"))


# ---------------------------------------------------------------------------
# parser

def _common():
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed (default 0)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                   help="BLAS/OpenMP threads (default $GEOHOM_THREADS)")
    p.add_argument("--tol", type=float, default=argparse.SUPPRESS, help="command tolerance")
    return p


def build_parser():
    common = _common()
    parser = _Parser(prog="geohom", parents=[common],
                     description="Geometric homogenization and conductivity recovery.")
    parser.add_argument("--version", action="version", version=f"geohom {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(func=func)
        return p

    p = add("solve", cmd_solve, "Dirichlet solve of -div(sigma grad u) = f")
    p.add_argument("--mesh", required=True)
    p.add_argument("--sigma", required=True, help="cell-field CSV or phantom[:key=value,...]")
    p.add_argument("--f", type=float, default=1.0)
    p.add_argument("--g", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = add("harmonic", cmd_harmonic, "harmonic coordinates F of sigma")
    p.add_argument("--mesh", required=True)
    p.add_argument("--sigma", required=True)
    p.add_argument("--out", required=True)

    p = add("sigma2q", cmd_sigma2q, "divergence-free push-forward Q of sigma")
    p.add_argument("--mesh", required=True)
    p.add_argument("--sigma", required=True)
    p.add_argument("--mode", choices=["linear", "constant"], default="linear")
    p.add_argument("--out", required=True)

    p = add("q2s", cmd_q2s, "convex potential s of a raster Q")
    p.add_argument("--q", required=True, help="raster cell-field CSV or const:xx=..,xy=..,yy=..")
    p.add_argument("--raster", help="nx,ny,x0,y0,dx,dy (needed for constant Q)")
    p.add_argument("--out", required=True)

    p = add("s2q", cmd_s2q, "Q = R Hess(s) R^T")
    p.add_argument("--s", required=True, help="raster CSV, paraboloid or quadratic:hxx=..,hxy=..,hyy=..")
    p.add_argument("--raster")
    p.add_argument("--out", required=True)

    p = add("homogenize", cmd_homogenize, "effective edge conductivities q^h on a coarse mesh")
    p.add_argument("--mesh", required=True)
    p.add_argument("--sigma", required=True)
    p.add_argument("--levels", type=int, default=3, help="fine refinement levels")
    p.add_argument("--boundary", action="store_true", help="include boundary edges")
    p.add_argument("--f", type=float, default=1.0)
    p.add_argument("--solution", help="write the coarse homogenized solution here")
    p.add_argument("--out", required=True)

    p = add("semigroup-check", cmd_semigroup, "verify the coarsening semi-group identities")
    p.add_argument("--mesh", required=True)
    p.add_argument("--sigma", required=True)
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--fine-levels", type=int, default=2)

    p = add("mesh-opt", cmd_meshopt, "Q-optimal mesh on the unit square")
    p.add_argument("--s", required=True, help="paraboloid or quadratic:hxx=..,hxy=..,hyy=..")
    p.add_argument("--points", type=int, default=400)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--out", required=True, help="mesh JSON")
    p.add_argument("--svg")
    p.add_argument("--energy", help="CSV of iteration, E_s")

    p = add("cell-problem", cmd_cell, "periodic cell problem and effective tensor")
    p.add_argument("--sigma", required=True)
    p.add_argument("--n", type=int, default=64)
    p.add_argument("--out")

    p = add("eit-forward", cmd_eit_forward, "continuum DtN data of a phantom")
    p.add_argument("--phantom", required=True)
    p.add_argument("--bpoints", required=True, help="count (regular polygon) or x,y CSV")
    p.add_argument("--radius", type=float, default=1.0)
    p.add_argument("--h", type=float, default=0.05)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--out", required=True)

    p = add("eit-fit-coarse", cmd_eit_fit, "coarse network fit by simulated annealing")
    p.add_argument("--dtn", required=True)
    p.add_argument("--n-interior", type=int)
    p.add_argument("--temps", type=int, default=150)
    p.add_argument("--moves", type=int, default=200)
    p.add_argument("--mesh-out", required=True)
    p.add_argument("--out", required=True, help="edge conductivity CSV")

    p = add("eit-iterate-F", cmd_eit_iterate, "harmonic-coordinate iteration from a coarse fit")
    p.add_argument("--dtn", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--qh", required=True)
    p.add_argument("--levels", type=int, default=2)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--guard", type=int, default=3)
    p.add_argument("--sigma-out")
    p.add_argument("--out", required=True, help="misfit history CSV")

    p = add("eit-recover-sh", cmd_eit_recover, "recover s^h from DtN data")
    p.add_argument("--dtn", required=True)
    p.add_argument("--mesh", required=True, help="mesh whose boundary vertices are the DtN points")
    p.add_argument("--alpha", type=float, default=0.0)
    p.add_argument("--kmax", type=int, default=0, help="fit Fourier data up to this mode (0: hat data)")
    p.add_argument("--lcurve", help="comma-separated alphas; picks the corner")
    p.add_argument("--lcurve-out")
    p.add_argument("--q-out")
    p.add_argument("--out", required=True)

    p = add("plot", cmd_plot, "SVG of a mesh with an optional cell field")
    p.add_argument("--mesh", required=True)
    p.add_argument("--field")
    p.add_argument("--kind", choices=["tensor", "scalar"], default="tensor")
    p.add_argument("--title")
    p.add_argument("--out", required=True)
    return parser


def _threads(args):
    n = args.threads
    if n is None and os.environ.get("GEOHOM_THREADS"):
        try:
            n = int(os.environ["GEOHOM_THREADS"])
        except ValueError:
            raise UsageError("GEOHOM_THREADS must be an integer") from None
    if n is not None:
        if n < 1:
            raise UsageError("--threads must be positive")
        for var in THREAD_VARS:
            os.environ[var] = str(n)
    return n


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        for k, v in (("seed", 0), ("threads", None), ("tol", None)):
            if not hasattr(args, k):
                setattr(args, k, v)
        args.threads = _threads(args)
        args.func(args)
    except UsageError as exc:
        print(f"geohom: error: {exc}", file=sys.stderr)
        return 1
    except ValidationError as exc:
        print(f"geohom: invalid input: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"geohom: numerical failure: {exc}", file=sys.stderr)
        return 2
    except GeohomError as exc:  # pragma: no cover - every error is one of the above
        print(f"geohom: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
