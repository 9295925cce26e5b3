#!/usr/bin/env python3
"""
GBDT v1.0 - Command line runner
================================
Batch runs of the GBDT constructions from a JSON config, with bit-stable
exports (CSV field + JSON sidecar) and a residual report.

USAGE:
  gbdt sigma     --config run.json [--out DIR] [--threads N] [--seed-check-only]
  gbdt grav      --config run.json
  gbdt ernst     --config run.json
  gbdt verify    --config run.json      # re-check an exported field
  gbdt sqrt-demo --config run.json      # commuting square roots of a Jordan matrix

Diagnostics go to stderr; stdout carries one line `RESULT pass|fail <max_residual>`.
Exit codes: 0 ok, 1 invalid config, 2 coverage below floor, 3 failed check.
"""

import os
import sys
import json
import logging
import argparse
import tempfile
from typing import Dict, List, Literal, Optional, Tuple, Union

import numpy as np
from dotenv import find_dotenv, load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

# .env must land before the gbdt_* modules read their GBDT_* constants
load_dotenv(find_dotenv(usecwd=True))

from gbdt_branchsqrt import PRINCIPAL, BranchChoice, JordanSpec, shifted_sqrt
from gbdt_core import (
    Background, GbdtFlow, GbdtTriple, GridSpec, J_SELECTORS, Jordan2Field, PathSpec, ScalarProfile,
    explicit_a_origin, z_ring, GBDT_FD_STEP, GBDT_ODE_STEP,
)
from gbdt_ernst import HamiltonianFamily, ernst_triple, hamiltonian_grid, seed_hamiltonians, transform_ernst
from gbdt_matcore import ConfigError, GbdtError, PointFlag, as_matrix
from gbdt_sigma import check_grav_triple, grav_constant, transform_grav, transform_sigma
from gbdt_verify import (
    GBDT_COVERAGE_FLOOR, CheckResult, ResidualReport, background_stencils, check_compatibility,
    check_darboux_ernst, check_det_alpha, check_det_constant, check_ernst, check_ernst_compatibility, check_ernst_transform,
    check_identity, check_j_unitarity, check_pde_sigma, check_realness, check_seed_conservation, check_seed_sigma,
    check_sqrt, check_trace_identity, check_transformed_flow, check_w0_closed_form, check_zero_curvature, field_to_csv,
    load_field_csv, transformed_stencils,
)

__version__ = "1.0.0"


def env_threads() -> int:
    return int(os.getenv("GBDT_THREADS", "1"))


def env_coverage_floor() -> float:
    return float(os.getenv("GBDT_COVERAGE_FLOOR", str(GBDT_COVERAGE_FLOOR)))


logger = logging.getLogger("gbdt-cli")

# ── Terminal colors ──
class C:
    BOLD="\033[1m"; RED="\033[91m"; GREEN="\033[92m"
    CYAN="\033[96m"; GRAY="\033[90m"; RESET="\033[0m"

def say(m):  print(m, file=sys.stderr)
def ok(m):   say(f"  {C.GREEN}✓{C.RESET} {m}")
def err(m):  say(f"  {C.RED}✗{C.RESET} {m}")
def info(m): say(f"  {C.GRAY}→{C.RESET} {m}")

# ============================================================================
# CONFIG SCHEMA
# ============================================================================

Number = Union[float, Tuple[float, float]]
MatrixRows = List[List[Number]]


def decode_matrix(rows: MatrixRows, name: str) -> np.ndarray:
    """Rows of numbers or [re, im] pairs."""
    return as_matrix([[complex(v[0], v[1]) if isinstance(v, (list, tuple)) else complex(v) for v in row]
                      for row in rows], name)


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TripleConfig(_Strict):
    blocks: List[Tuple[float, float, int]]
    similarity: Optional[MatrixRows] = None
    Pi0: Optional[MatrixRows] = None
    S0: Optional[MatrixRows] = None
    J: Literal["offdiag", "i-offdiag", "pauli2"] = "offdiag"
    a_field: Literal["propagate", "explicit"] = "propagate"

    @field_validator("blocks")
    @classmethod
    def _sizes(cls, v):
        if not v or any(size < 1 for _, _, size in v):
            raise ValueError("blocks need positive sizes")
        return v


class BackgroundConfig(_Strict):
    f: List[float] = Field(default_factory=lambda: [0.0, -1.0], min_length=1)
    h: List[float] = Field(default_factory=lambda: [0.0, 1.0], min_length=1)
    p: int = Field(1, ge=1)
    seed: Literal["exp-diag"] = "exp-diag"


class DomainConfig(_Strict):
    xi: Tuple[float, float] = (-0.3, 0.3)
    eta: Tuple[float, float] = (-0.3, 0.3)
    step: float = Field(0.01, gt=0)


class BranchConfig(_Strict):
    signs: Dict[int, int] = Field(default_factory=dict)


class HamiltonianConfig(_Strict):
    family: Literal["constant", "shift-profile"] = "constant"
    H: Optional[MatrixRows] = None
    Hcal: Optional[MatrixRows] = None
    profile: Optional[List[float]] = None


class PathConfig(_Strict):
    step: float = Field(GBDT_ODE_STEP, gt=0)
    targets: List[Tuple[float, float]] = Field(default_factory=lambda: [(0.2, 0.1), (-0.15, 0.25), (0.1, -0.2)])


class ToleranceConfig(_Strict):
    pde: float = 1e-5
    unitarity: float = 1e-9
    identity: float = 1e-8
    compatibility: float = 1e-7
    det: float = 1e-8
    darboux: float = 1e-5
    coverage_floor: float = Field(default_factory=env_coverage_floor, ge=0, le=1)


class RunConfig(_Strict):
    mode: Literal["sigma", "grav", "ernst", "verify", "sqrt-demo"]
    triple: Optional[TripleConfig] = None
    background: BackgroundConfig = Field(default_factory=BackgroundConfig)
    domain: DomainConfig = Field(default_factory=DomainConfig)
    branch: BranchConfig = Field(default_factory=BranchConfig)
    hamiltonians: HamiltonianConfig = Field(default_factory=HamiltonianConfig)
    paths: PathConfig = Field(default_factory=PathConfig)
    tolerances: ToleranceConfig = Field(default_factory=ToleranceConfig)
    fd_step: float = Field(GBDT_FD_STEP, gt=0)
    z_samples: int = Field(8, ge=1)
    shifts: List[Number] = Field(default_factory=list)
    field: Optional[str] = None
    field_kind: Literal["sigma", "grav"] = "sigma"
    output_dir: str = "out"

# ============================================================================
# SEMANTIC VALIDATION
# ============================================================================

class Run:
    """Validated, fully constructed objects of one config."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        problems: List[str] = []
        self.spec = self.triple = self.source = self.pair = None
        self.bg = Background.exp_diag(ScalarProfile(tuple(cfg.background.f)), ScalarProfile(tuple(cfg.background.h)),
                                      cfg.background.p)
        try:
            self.branch = BranchChoice(dict(cfg.branch.signs))
        except GbdtError as e:
            problems.append(str(e))
            self.branch = PRINCIPAL
        d = cfg.domain
        if d.xi[1] < d.xi[0] or d.eta[1] < d.eta[0]:
            problems.append("domain ranges must be increasing")
        self.grid = GridSpec(d.xi[0], d.xi[1], d.eta[0], d.eta[1], d.step)

        if cfg.mode == "verify":
            if not cfg.field:
                problems.append("verify mode needs `field`")
            elif not os.path.exists(cfg.field):
                problems.append(f"field file {cfg.field} not found")
        if cfg.triple is None:
            if cfg.mode != "verify":
                problems.append(f"mode {cfg.mode} needs a `triple`")
        else:
            self._build_triple(cfg, problems)
        if problems:
            raise ConfigError(problems)

    def _build_triple(self, cfg: RunConfig, problems: List[str]):
        t = cfg.triple
        try:
            n = sum(size for _, _, size in t.blocks)
            sim = decode_matrix(t.similarity, "similarity") if t.similarity else np.eye(n)
            self.spec = JordanSpec(tuple((complex(re, im), size) for re, im, size in t.blocks), sim)
        except GbdtError as e:
            problems.append(f"triple: {e}")
            return
        if cfg.mode == "sqrt-demo":
            return
        if t.Pi0 is None:
            problems.append(f"mode {cfg.mode} needs triple.Pi0")
            return
        try:
            pi0 = decode_matrix(t.Pi0, "Pi0")
            s0 = decode_matrix(t.S0, "S0") if t.S0 is not None else None
        except GbdtError as e:
            problems.append(f"triple: {e}")
            return
        m = pi0.shape[1]
        if m % 2:
            problems.append(f"Pi0 must have an even number of columns, got {m}")
            return
        jmat = J_SELECTORS[t.J](m // 2)
        if cfg.mode in ("sigma", "grav", "verify") and self.bg.m != m:
            problems.append(f"background block size p = {self.bg.p} gives m = {self.bg.m}, Pi0 has {m} columns")
            return
        try:
            if cfg.mode == "ernst":
                self.triple = ernst_triple(self.spec, pi0, jmat, s0)
                self._build_pair(cfg, jmat, problems)
            elif t.a_field == "explicit":
                self._build_explicit(pi0, jmat, s0)
            elif s0 is None:
                self.triple = GbdtTriple.from_identity(self.spec, pi0, jmat)
            else:
                self.triple = GbdtTriple(self.spec, s0, pi0, jmat)
        except GbdtError as e:
            problems.append(f"triple: {e}")
            return
        if cfg.mode == "grav" and self.triple is not None:
            problems.extend(check_grav_triple(self.triple, self.bg))
            if not problems:
                try:
                    grav_constant(self.triple, self.bg)
                except GbdtError as e:
                    problems.append(str(e))

    def _build_explicit(self, pi0, jmat, s0):
        """A-field from the square roots; the identity is imposed at its value at the origin."""
        blocks = self.spec.blocks
        f, h = self.bg.f, self.bg.h
        jordan2 = (len(blocks) == 1 and blocks[0][1] == 2 and np.allclose(self.spec.similarity, np.eye(2)) and s0 is None
                   and not self.branch.signs
                   and f.is_affine() and h.is_affine() and f.slope() == -1.0 and h.slope() == 1.0)
        if jordan2:
            self.source = Jordan2Field(blocks[0][0], pi0, jmat, self.bg)
            self.triple = self.source.triple
            return
        a00 = explicit_a_origin(self.spec, self.bg, self.branch)
        self.triple = GbdtTriple.from_identity(a00, pi0, jmat, self.spec) if s0 is None \
            else GbdtTriple(a00, s0, pi0, jmat, self.spec)

    def _build_pair(self, cfg: RunConfig, jmat, problems):
        hc = cfg.hamiltonians
        try:
            self.pair = seed_hamiltonians(
                HamiltonianFamily(hc.family), jmat.shape[0], jmat,
                decode_matrix(hc.H, "H") if hc.H else None,
                decode_matrix(hc.Hcal, "Hcal") if hc.Hcal else None,
                ScalarProfile(tuple(hc.profile)) if hc.profile else None)
        except GbdtError as e:
            problems.append(f"hamiltonians: {e}")


def load_config(path: str) -> RunConfig:
    with open(path) as fh:
        return RunConfig.model_validate(json.load(fh))

# ============================================================================
# MODES
# ============================================================================

def _sample_points(run: Run, count: int = 5) -> List[Tuple[float, float]]:
    g = run.grid
    xs = np.linspace(g.xi_min, g.xi_max, count + 2)[1:-1]
    ys = np.linspace(g.eta_min, g.eta_max, count + 2)[1:-1]
    return [(float(x), float(y)) for x in xs for y in ys]


def seed_checks(run: Run, jmat) -> List[CheckResult]:
    pts = _sample_points(run)
    z = z_ring([complex(v) for v in run.spec.eigenvalues()] if run.spec is not None else [], run.cfg.z_samples)
    return [
        check_seed_sigma(run.bg, pts, run.cfg.fd_step),
        check_seed_conservation(run.bg, jmat, pts),
        check_zero_curvature(background_stencils(run.bg, pts, run.cfg.fd_step), run.bg, run.cfg.fd_step, z),
    ]


def core_checks(run: Run) -> List[CheckResult]:
    tol = run.cfg.tolerances
    flow = GbdtFlow(run.triple, run.bg, run.cfg.paths.step)
    states = [run.triple.initial_state()]
    for target in run.cfg.paths.targets:
        try:
            states.append(flow.along(PathSpec.l_path(target, run.cfg.paths.step)))
        except GbdtError as e:
            logger.warning(f"identity path to {target} failed: {e}")
            states.append(e.flag)
    return [
        check_identity(states, run.triple.jmat, tol.identity),
        check_compatibility(run.triple, run.bg, run.cfg.paths.targets, run.cfg.paths.step, tol.compatibility),
    ]


def transformed_checks(run: Run) -> List[CheckResult]:
    """u^ against q^, Q^ and the zero-curvature form of the transformed system."""
    tol, fd, step = run.cfg.tolerances, run.cfg.fd_step, run.cfg.paths.step
    pts = _sample_points(run, 3)
    z = z_ring([complex(v) for v in np.linalg.eigvals(run.triple.curly_a)], run.cfg.z_samples)
    return [
        check_transformed_flow(run.triple, run.bg, pts, fd, tol.pde, step),
        check_zero_curvature(transformed_stencils(run.triple, run.bg, pts, fd, step), run.bg, fd, z, tol.pde,
                             name="zero_curvature_transformed"),
    ]


def run_sigma(run: Run, threads: int, seed_only: bool) -> Tuple[ResidualReport, Dict[str, str], Dict, float]:
    tol = run.cfg.tolerances
    report = ResidualReport()
    if seed_only:
        report.add(*seed_checks(run, run.triple.jmat))
        return report, {}, {}, 1.0
    sol = transform_sigma(run.triple, run.bg, run.grid, run.source, threads, run.cfg.fd_step)
    report.add(
        check_pde_sigma(sol.grid, tol=tol.pde, floor=tol.coverage_floor),
        check_j_unitarity(sol.grid, run.triple.jmat, tol.unitarity, tol.coverage_floor),
        *core_checks(run),
        *transformed_checks(run),
        *seed_checks(run, run.triple.jmat),
    )
    extra = {"grid_residual": _grid_residual(sol.grid)}
    return report, {"field": field_to_csv(sol.grid)}, extra, sol.grid.coverage()


def run_grav(run: Run, threads: int, seed_only: bool):
    tol = run.cfg.tolerances
    report = ResidualReport()
    if seed_only:
        report.add(*seed_checks(run, run.triple.jmat))
        return report, {}, {}, 1.0
    sol = transform_grav(run.triple, run.bg, run.grid, run.source, threads, run.cfg.fd_step)
    report.add(
        check_realness(sol.grid, tol.unitarity, tol.coverage_floor),
        check_det_alpha(sol.grid, tol.det, tol.coverage_floor),
        check_det_constant(sol.hat, sol.d, tol.det, tol.coverage_floor),
        check_pde_sigma(sol.grid, tol=tol.pde, floor=tol.coverage_floor),
        check_trace_identity(sol.grid, tol.pde, tol.coverage_floor),
        *core_checks(run),
        *transformed_checks(run),
        *seed_checks(run, run.triple.jmat),
    )
    extra = {"d": sol.d, "grid_residual": _grid_residual(sol.grid),
             "det_alpha_max": sol.det_ratio_error(), "det_hat_spread": sol.det_hat_spread()}
    return report, {"field": field_to_csv(sol.grid)}, extra, sol.grid.coverage()


def run_ernst(run: Run, threads: int, seed_only: bool):
    tol = run.cfg.tolerances
    z = z_ring([complex(v) for v in run.spec.eigenvalues()], run.cfg.z_samples)
    report = ResidualReport()
    if seed_only:
        report.add(*check_ernst(hamiltonian_grid(run.pair, run.grid, run.cfg.fd_step), z, prefix="ernst_seed"))
        return report, {}, {}, 1.0
    hgrid = transform_ernst(run.triple, run.pair, run.grid, threads, run.cfg.fd_step)
    pts = _sample_points(run)
    report.add(
        *check_ernst(hgrid.seed, z, derivative_tol=tol.pde, floor=tol.coverage_floor, prefix="ernst_seed"),
        *check_ernst(hgrid, z, derivative_tol=tol.pde, floor=tol.coverage_floor),
        *check_ernst_transform(hgrid, floor=tol.coverage_floor),
        check_darboux_ernst(run.triple, run.pair, pts, z, run.cfg.fd_step, tol.darboux, run.cfg.paths.step),
        check_w0_closed_form(run.triple, run.pair, run.cfg.paths.targets, run.cfg.paths.step, tol.compatibility),
        check_ernst_compatibility(run.triple, run.pair, run.cfg.paths.targets, run.cfg.paths.step, tol.compatibility),
    )
    files = {"H": field_to_csv(hgrid.h), "Hcal": field_to_csv(hgrid.hcal)}
    return report, files, {}, hgrid.coverage()


def run_verify(run: Run, threads: int, seed_only: bool):
    tol = run.cfg.tolerances
    grid = load_field_csv(run.cfg.field, run.bg.alpha)
    jmat = run.triple.jmat if run.triple is not None else J_SELECTORS["offdiag"](grid.m // 2)
    pde = check_pde_sigma(grid, floor=tol.coverage_floor, name="pde_sigma_grid")
    report = ResidualReport().add(pde)
    if run.cfg.field_kind == "sigma":
        report.add(check_j_unitarity(grid, jmat, tol.unitarity, tol.coverage_floor))
    else:
        report.add(check_realness(grid, tol.unitarity, tol.coverage_floor),
                   check_det_alpha(grid, tol.det, tol.coverage_floor))
    sidecar = os.path.splitext(run.cfg.field)[0] + ".json"
    if os.path.exists(sidecar):
        with open(sidecar) as fh:
            recorded = json.load(fh).get("diagnostics", {}).get("grid_residual")
        if recorded is not None:
            report.add(CheckResult.from_residuals("roundtrip", [abs(pde.max_residual - recorded)], 1e-12))
    return report, {}, {"grid_residual": pde.max_residual}, grid.coverage()


def run_sqrt_demo(run: Run, threads: int, seed_only: bool):
    shifts = [complex(s[0], s[1]) if isinstance(s, (list, tuple)) else complex(s) for s in run.cfg.shifts]
    if not shifts:
        eta, xi = 0.1, 0.2
        shifts = [2 * eta, -2 * xi]
    header = ["xi", "eta", "flag"] + [f"entry_{r}{c}_{part}" for r in range(run.spec.size)
                                      for c in range(run.spec.size) for part in ("re", "im")]
    lines = [",".join(header)]
    for mu in shifts:
        try:
            r = shifted_sqrt(run.spec, mu, run.branch)
        except GbdtError as e:
            err(f"R({mu}) : {e}")
            lines.append(",".join([repr(mu.real), repr(mu.imag), e.flag.value] + [""] * (2 * run.spec.size ** 2)))
            continue
        info(f"R({mu:.6g}) =\n{np.array2string(r, precision=12)}")
        lines.append(",".join([repr(mu.real), repr(mu.imag), PointFlag.OK.value]
                              + [repr(float(v)) for z in r.reshape(-1) for v in (z.real, z.imag)]))
    report = ResidualReport().add(check_sqrt(run.spec, shifts, run.branch))
    return report, {"field": "\n".join(lines) + "\n"}, {}, 1.0


MODES = {"sigma": run_sigma, "grav": run_grav, "ernst": run_ernst, "verify": run_verify, "sqrt-demo": run_sqrt_demo}


def _grid_residual(grid) -> Optional[float]:
    """Grid-differenced PDE residual, recorded so a re-ingested export can be compared."""
    try:
        return check_pde_sigma(grid, use_stencils=False, floor=0.0, name="pde_sigma_grid").max_residual
    except GbdtError:
        return None

# ============================================================================
# OUTPUT
# ============================================================================

def atomic_write(path: str, text: str):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_outputs(out_dir: str, mode: str, cfg: RunConfig, report: ResidualReport, files: Dict[str, str],
                  extra: Dict) -> List[str]:
    written = []
    stem = mode.replace("-", "_")
    for key, text in files.items():
        name = f"{stem}.csv" if key == "field" else f"{stem}_{key}.csv"
        path = os.path.join(out_dir, name)
        atomic_write(path, text)
        written.append(path)
    sidecar = {"version": __version__, "config": cfg.model_dump(mode="json"), "report": report.to_dict(),
               "diagnostics": extra}
    path = os.path.join(out_dir, f"{stem}.json")
    atomic_write(path, json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    written.append(path)
    return written

# ============================================================================
# MAIN
# ============================================================================

def setup_logging():
    log_dir = os.getenv("LOG_DIR", "./logs")
    os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(
        level=logging.INFO,
        format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
        handlers=[
            logging.FileHandler(f"{log_dir}/gbdt.log"),
            logging.StreamHandler(sys.stderr),
        ],
    )


def run(cfg: RunConfig, out_dir: Optional[str] = None, threads: int = 1,
        seed_only: bool = False) -> int:
    """Run one config; returns the exit status."""
    built = Run(cfg)
    say(f"{C.BOLD}{C.CYAN}GBDT v{__version__} | mode={cfg.mode} | threads={threads}{C.RESET}")
    report, files, extra, coverage = MODES[cfg.mode](built, threads, seed_only)
    out_dir = out_dir or cfg.output_dir
    for path in write_outputs(out_dir, cfg.mode, cfg, report, files, extra):
        info(f"wrote {path}")
    for c in report.checks:
        (ok if c.passed else err)(f"{c.name}: max {c.max_residual:.3e} / tol {c.tolerance:.0e}, "
                                  f"coverage {c.coverage:.3f}")
    verdict = "pass" if report.passed and coverage >= cfg.tolerances.coverage_floor else "fail"
    print(f"RESULT {verdict} {report.max_residual:.6e}")
    if coverage < cfg.tolerances.coverage_floor:
        err(f"coverage {coverage:.3f} below floor {cfg.tolerances.coverage_floor}")
        return 2
    return 0 if report.passed else 3


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv(find_dotenv(usecwd=True))
    ap = argparse.ArgumentParser(prog="gbdt", description=f"GBDT v{__version__} explicit solutions",
                                 formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("mode", choices=sorted(MODES))
    ap.add_argument("--config", required=True, help="JSON run config")
    ap.add_argument("--out", default=None, help="output directory (overrides config)")
    ap.add_argument("--threads", type=int, default=env_threads(), help="grid columns evaluated in parallel")
    ap.add_argument("--seed-check-only", action="store_true", help="check the seed only, no transformation")
    a = ap.parse_args(argv)
    setup_logging()

    try:
        cfg = load_config(a.config)
        if cfg.mode != a.mode:
            raise ConfigError([f"config mode {cfg.mode!r} does not match command {a.mode!r}"])
    except (ValidationError, ConfigError, json.JSONDecodeError, OSError) as e:
        err(f"invalid configuration: {e}")
        print("RESULT fail nan")
        return 1

    try:
        return run(cfg, a.out, max(1, a.threads), a.seed_check_only)
    except ConfigError as e:
        err(f"invalid configuration: {e}")
        print("RESULT fail nan")
        return 1
    except GbdtError as e:
        logger.error(f"run aborted: {e}")
        print("RESULT fail nan")
        return 2
    except OSError as e:
        logger.error(f"i/o failure: {e}")
        err(f"i/o failure: {e}")
        print("RESULT fail nan")
        return 2


if __name__ == "__main__":
    sys.exit(main())
