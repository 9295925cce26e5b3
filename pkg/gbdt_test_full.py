#!/usr/bin/env python3
"""
GBDT v1.0 - Acceptance Test Suite
==================================
End-to-end checks on full grids, randomized sweeps and the command line runner.

Run options:
  python -m pytest gbdt_test_full.py -v            # everything
  python -m pytest gbdt_test_full.py -k cli        # command line only
"""

import copy
import json
import os

import numpy as np
import pytest

os.environ["LOG_DIR"] = "./test_logs"

from gbdt_branchsqrt import JordanSpec
from gbdt_core import (
    Background, GbdtFlow, GbdtTriple, GridSpec, PathSpec, ScalarProfile, explicit_a_origin, explicit_A,
    explicit_pi_jordan2, j_offdiag, pauli2, propagate, propagate_pi, propagate_S, recover_S_jordan2, z_ring,
)
from gbdt_ernst import ernst_triple, seed_hamiltonians, transform_ernst
from gbdt_main import main
from gbdt_matcore import dagger, fro
from gbdt_sigma import transform_grav, transform_sigma
from gbdt_verify import (
    check_compatibility, check_darboux_ernst, check_det_alpha, check_det_constant, check_ernst, check_ernst_compatibility,
    check_ernst_transform, check_explicit_A, check_fundamental, check_identity, check_j_unitarity,
    check_lambda_odes, check_mixed_partials, check_pde_sigma, check_realness, check_scaling_covariance, check_sqrt,
    check_w0_closed_form, check_w0_flow,
)

os.makedirs("./test_logs", exist_ok=True)


def offset_background() -> Background:
    return Background.exp_diag(ScalarProfile((1.0, -1.0)), ScalarProfile((0.0, 1.0)))


def sigma_triple() -> GbdtTriple:
    return GbdtTriple(JordanSpec.jordan_block(0.3 + 0.4j, 1), [[1.25]], [[1.0, 0.5]], j_offdiag(1))


def grav_triple() -> GbdtTriple:
    return GbdtTriple(JordanSpec.jordan_block(0.3, 1), [[1.0]], [[1.0, 0.0]], pauli2())


# ╔═══════════════════════════════════════════════════════════════════╗
# ║  MODULE 1: COMMUTING SQUARE ROOTS                                 ║
# ╚═══════════════════════════════════════════════════════════════════╝

class TestSquareRoots:
    def test_random_jordan_specs(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            sizes = [int(k) for k in rng.integers(1, 5, size=rng.integers(1, 4))]
            while sum(sizes) > 6:
                sizes.pop()
            blocks = tuple((complex(rng.uniform(1.0, 3.0), rng.uniform(-1.0, 1.0)), k) for k in sizes)
            n = sum(sizes)
            sim = np.eye(n) + 0.1 * np.triu(rng.standard_normal((n, n)), 1)
            spec = JordanSpec(blocks, sim)
            shifts = [float(v) for v in rng.uniform(-0.5, 0.5, size=5)]
            result = check_sqrt(spec, shifts)
            assert result.passed, f"blocks={blocks}: {result.max_residual:.3e}"

# ╔═══════════════════════════════════════════════════════════════════╗
# ║  MODULE 2: EXPLICIT A-FIELD + JORDAN CLOSED FORMS                 ║
# ╚═══════════════════════════════════════════════════════════════════╝

class TestExplicitField:
    points = [(0.1, 0.05), (-0.15, 0.1), (0.2, -0.2), (-0.05, -0.1)]

    def test_explicit_a_solves_flow(self):
        spec = JordanSpec.jordan_block(2 + 1j, 3)
        assert check_explicit_A(spec, offset_background(), self.points, fd_step=1e-4).passed

    def test_mixed_partials(self):
        spec = JordanSpec.jordan_block(2 + 1j, 3)
        assert check_mixed_partials(spec, offset_background(), self.points, fd_step=1e-4).passed

    def test_explicit_a_matches_propagated(self):
        spec = JordanSpec.jordan_block(2 + 1j, 2)
        bg = offset_background()
        a00 = explicit_a_origin(spec, bg)
        triple = GbdtTriple.from_identity(a00, [[1.0, 0.5], [0.2, 1.0]], j_offdiag(1), spec)
        for target in ((0.2, 0.1), (-0.1, 0.2)):
            st = propagate(triple, bg, PathSpec.l_path(target))
            assert fro(st.a - explicit_A(*target, spec, bg)) <= 1e-8 * fro(st.a)

    def test_anchored_pi_matches_propagated(self):
        bg = offset_background()
        spec = JordanSpec.jordan_block(2.0, 2)
        pi0 = np.array([[1.0, 1j], [1.0, 1j]])
        # Pi0 J Pi0* = 0, so S(0,0) = 0 satisfies the identity for the real A(0,0)
        triple = GbdtTriple(explicit_a_origin(spec, bg), np.zeros((2, 2)), pi0, j_offdiag(1), spec)
        for target in ((0.2, 0.1), (-0.1, 0.15)):
            closed = explicit_pi_jordan2(target, 2.0, pi0, 1, bg, anchored=True)
            flowed = propagate_pi(triple, bg, PathSpec.l_path(target))
            assert fro(closed - flowed) <= 1e-8 * fro(closed)

    def test_recovered_s_matches_propagated(self):
        bg = offset_background()
        c = 2 + 1j
        spec = JordanSpec.jordan_block(c, 2)
        pi0 = np.array([[1.0, 0.5], [0.2, 1.0]])
        jm = j_offdiag(1)
        triple = GbdtTriple.from_identity(explicit_a_origin(spec, bg), pi0, jm, spec)
        target = (0.15, 0.1)
        a = explicit_A(*target, spec, bg)
        pi = explicit_pi_jordan2(target, c, pi0, 1, bg, anchored=True)
        s = recover_S_jordan2(a[0, 0], a[0, 1], 1j * pi @ jm @ dagger(pi))
        flowed = propagate_S(triple, bg, PathSpec.l_path(target))
        assert fro(s - flowed) <= 1e-7 * fro(s)

# ╔═══════════════════════════════════════════════════════════════════╗
# ║  MODULE 3: TRIPLE TRANSPORT + SPECTRAL PARAMETER                  ║
# ╚═══════════════════════════════════════════════════════════════════╝

class TestTransport:
    def test_identity_on_random_targets(self):
        rng = np.random.default_rng(11)
        bg = offset_background()
        flow = GbdtFlow(sigma_triple(), bg)
        states = [flow.along(PathSpec.l_path(tuple(t))) for t in rng.uniform(-0.25, 0.25, size=(10, 2))]
        assert check_identity(states, j_offdiag(1)).passed

    def test_compatibility_on_random_targets(self):
        rng = np.random.default_rng(13)
        targets = [tuple(float(v) for v in t) for t in rng.uniform(-0.25, 0.25, size=(20, 2))]
        result = check_compatibility(sigma_triple(), offset_background(), targets)
        assert result.passed and result.coverage == 1.0

    def test_lambda_odes_random(self):
        rng = np.random.default_rng(17)
        samples = [(float(rng.uniform(-0.2, 0.2)), float(rng.uniform(-0.2, 0.2)),
                    complex(rng.uniform(-3.0, 3.0), rng.uniform(0.5, 3.0))) for _ in range(100)]
        result = check_lambda_odes(offset_background(), samples)
        assert result.passed and result.coverage == 1.0

    def test_fundamental_solution_transformed(self):
        z = z_ring([0.3 + 0.4j], 9)
        assert len(z) == 10
        assert check_fundamental(sigma_triple(), offset_background(), (0.1, 0.05), z).passed

# ╔═══════════════════════════════════════════════════════════════════╗
# ║  MODULE 4: SIGMA-MODEL + GRAVITATIONAL GRIDS                      ║
# ╚═══════════════════════════════════════════════════════════════════╝

@pytest.fixture(scope="module")
def sigma_grid():
    return transform_sigma(sigma_triple(), offset_background(), GridSpec(-0.3, 0.3, -0.3, 0.3, 0.01), fd_step=1e-3)


class TestSigmaGrid:
    def test_full_grid(self, sigma_grid):
        assert sigma_grid.grid.values.shape == (61, 61, 2, 2)
        assert sigma_grid.grid.coverage() == 1.0

    def test_pde(self, sigma_grid):
        assert check_pde_sigma(sigma_grid.grid, fd_step=1e-3).passed

    def test_j_unitarity(self, sigma_grid):
        assert check_j_unitarity(sigma_grid.grid, j_offdiag(1)).passed

    def test_perturbed_stencil_fails(self, sigma_grid):
        broken = copy.deepcopy(sigma_grid.grid)
        broken.stencils[30, 30, 2, 2] += 0.1
        assert not check_pde_sigma(broken, fd_step=1e-3).passed

    def test_scaling_covariance(self, sigma_grid):
        c = np.array([[2.0, 0.5j], [0.3, 1.0]])
        result = check_scaling_covariance(sigma_grid.grid, c, use_stencils=False)
        assert result.passed and result.coverage == 1.0


class TestGravGrid:
    @pytest.fixture(scope="class")
    def grav(self):
        return transform_grav(grav_triple(), offset_background(), GridSpec(-0.3, 0.3, -0.3, 0.3, 0.05))

    def test_constant_d(self, grav):
        assert grav.d == pytest.approx(1.0)

    def test_real(self, grav):
        assert check_realness(grav.grid).passed

    def test_det_alpha(self, grav):
        assert check_det_alpha(grav.grid).passed
        assert grav.det_ratio_error() <= 1e-8

    def test_det_constant(self, grav):
        assert check_det_constant(grav.hat, grav.d).passed

    def test_pde(self, grav):
        assert check_pde_sigma(grav.grid).passed

# ╔═══════════════════════════════════════════════════════════════════╗
# ║  MODULE 5: ERNST-TYPE EQUATIONS                                   ║
# ╚═══════════════════════════════════════════════════════════════════╝

class TestErnstGrid:
    jm = j_offdiag(1)
    points = [(float(x), float(y)) for x in np.linspace(-0.16, 0.16, 5) for y in np.linspace(-0.16, 0.16, 5)]
    z = z_ring([2 + 1j])
    cases = {
        "constant": (JordanSpec.jordan_block(2 + 1j, 1), [[1.0, 0.5]], "constant", None),
        "shift_profile_jordan2": (JordanSpec.jordan_block(2 + 1j, 2), [[1.0, 0.5], [0.2, 1.0]], "shift-profile",
                                  np.diag([2.0, 1.0])),
    }

    @pytest.fixture(scope="class", params=sorted(cases))
    def setup(self, request):
        spec, pi0, family, h = self.cases[request.param]
        triple = ernst_triple(spec, pi0, self.jm)
        pair = seed_hamiltonians(family, 2, self.jm, h)
        return triple, pair, transform_ernst(triple, pair, GridSpec(-0.2, 0.2, -0.2, 0.2, 0.05))

    def test_seed_pair_solves(self, setup):
        _, _, hgrid = setup
        for result in check_ernst(hgrid.seed, self.z):
            assert result.passed, result.name

    def test_transformed_pair_solves(self, setup):
        _, _, hgrid = setup
        assert hgrid.coverage() >= 0.9
        for result in check_ernst(hgrid, self.z, derivative_tol=1e-5):
            assert result.passed, result.name

    def test_transform_invariants(self, setup):
        _, _, hgrid = setup
        for result in check_ernst_transform(hgrid):
            assert result.passed, result.name

    def test_darboux_matrix(self, setup):
        triple, pair, _ = setup
        assert check_darboux_ernst(triple, pair, self.points, self.z).passed

    def test_w0_closed_form(self, setup):
        triple, pair, _ = setup
        assert check_w0_closed_form(triple, pair, [(0.2, 0.1), (-0.1, 0.2)]).passed
        assert check_w0_flow(triple, pair, self.points).passed

    def test_path_independence(self, setup):
        triple, pair, _ = setup
        assert check_ernst_compatibility(triple, pair, [(0.2, 0.1), (-0.15, 0.1), (0.1, -0.2)]).passed

# ╔═══════════════════════════════════════════════════════════════════╗
# ║  MODULE 6: COMMAND LINE                                           ║
# ╚═══════════════════════════════════════════════════════════════════╝

SIGMA = {
    "mode": "sigma",
    "triple": {"blocks": [[0.3, 0.4, 1]], "Pi0": [[1.0, 0.5]], "S0": [[1.25]], "J": "offdiag"},
    "background": {"f": [1.0, -1.0], "h": [0.0, 1.0]},
    "domain": {"xi": [-0.2, 0.2], "eta": [-0.2, 0.2], "step": 0.05},
    "paths": {"step": 0.005, "targets": [[0.15, 0.1], [-0.1, 0.15]]},
}


def write_config(tmp_path, name: str, cfg: dict, out: str = "out") -> str:
    cfg = dict(cfg, output_dir=str(tmp_path / out))
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def result_line(capsys) -> str:
    return capsys.readouterr().out.strip().splitlines()[-1]


class TestCli:
    def test_cli_sigma(self, tmp_path, capsys):
        assert main(["sigma", "--config", write_config(tmp_path, "sigma", SIGMA)]) == 0
        assert result_line(capsys).startswith("RESULT pass ")
        sidecar = json.loads((tmp_path / "out" / "sigma.json").read_text())
        assert sidecar["report"]["passed"] is True
        assert (tmp_path / "out" / "sigma.csv").read_text().startswith("xi,eta,flag,")

    def test_cli_sigma_trivial(self, tmp_path, capsys):
        cfg = dict(SIGMA, triple={"blocks": [[0.3, 0.0, 1]], "Pi0": [[0.0, 0.0]], "S0": [[1.0]]})
        assert main(["sigma", "--config", write_config(tmp_path, "trivial", cfg)]) == 0

    def test_cli_sigma_jordan_explicit(self, tmp_path, capsys):
        cfg = dict(SIGMA, triple={"blocks": [[2.0, 1.0, 2]], "Pi0": [[1.0, 0.5], [0.2, 1.0]],
                                  "a_field": "explicit"},
                   domain={"xi": [-0.1, 0.1], "eta": [-0.1, 0.1], "step": 0.05})
        assert main(["sigma", "--config", write_config(tmp_path, "jordan", cfg)]) == 0

    def test_cli_seed_check_only(self, tmp_path, capsys):
        assert main(["sigma", "--config", write_config(tmp_path, "seed", SIGMA), "--seed-check-only"]) == 0
        assert not (tmp_path / "out" / "sigma.csv").exists()

    def test_cli_grav(self, tmp_path, capsys):
        cfg = dict(SIGMA, mode="grav", triple={"blocks": [[0.3, 0.0, 1]], "Pi0": [[1.0, 0.0]], "S0": [[1.0]],
                                               "J": "pauli2"})
        assert main(["grav", "--config", write_config(tmp_path, "grav", cfg)]) == 0
        sidecar = json.loads((tmp_path / "out" / "grav.json").read_text())
        assert sidecar["diagnostics"]["d"] == pytest.approx(1.0)

    def test_cli_ernst(self, tmp_path, capsys):
        cfg = {"mode": "ernst", "triple": {"blocks": [[2.0, 1.0, 1]], "Pi0": [[1.0, 0.5]]},
               "hamiltonians": {"family": "constant"},
               "domain": {"xi": [-0.2, 0.2], "eta": [-0.2, 0.2], "step": 0.1},
               "paths": {"step": 0.005, "targets": [[0.1, 0.1]]}}
        assert main(["ernst", "--config", write_config(tmp_path, "ernst", cfg)]) == 0
        assert (tmp_path / "out" / "ernst_H.csv").exists()
        assert (tmp_path / "out" / "ernst_Hcal.csv").exists()

    def test_cli_sqrt_demo(self, tmp_path, capsys):
        cfg = {"mode": "sqrt-demo", "triple": {"blocks": [[2.0, 0.0, 2]]}, "shifts": [0.2, -0.4, [0.1, 0.3]]}
        assert main(["sqrt-demo", "--config", write_config(tmp_path, "sqrt", cfg)]) == 0
        rows = (tmp_path / "out" / "sqrt_demo.csv").read_text().strip().splitlines()
        assert len(rows) == 4

    def test_cli_verify_roundtrip(self, tmp_path, capsys):
        assert main(["sigma", "--config", write_config(tmp_path, "sigma", SIGMA)]) == 0
        cfg = {"mode": "verify", "triple": SIGMA["triple"], "background": SIGMA["background"],
               "field": str(tmp_path / "out" / "sigma.csv"), "field_kind": "sigma"}
        assert main(["verify", "--config", write_config(tmp_path, "verify", cfg, "verify")]) == 0
        report = json.loads((tmp_path / "verify" / "verify.json").read_text())["report"]
        names = [c["name"] for c in report["checks"]]
        assert "roundtrip" in names and "pde_sigma_grid" in names

    def test_cli_invalid_block_size(self, tmp_path, capsys):
        cfg = dict(SIGMA, triple={"blocks": [[0.3, 0.4, 0]], "Pi0": [[1.0, 0.5]]})
        assert main(["sigma", "--config", write_config(tmp_path, "bad", cfg)]) == 1
        assert result_line(capsys) == "RESULT fail nan"

    def test_cli_unknown_key(self, tmp_path, capsys):
        cfg = dict(SIGMA, colour="blue")
        assert main(["sigma", "--config", write_config(tmp_path, "bad", cfg)]) == 1

    def test_cli_mode_mismatch(self, tmp_path, capsys):
        assert main(["grav", "--config", write_config(tmp_path, "sigma", SIGMA)]) == 1

    def test_cli_missing_config(self, tmp_path, capsys):
        assert main(["sigma", "--config", str(tmp_path / "nope.json")]) == 1

    def test_cli_grav_complex_triple(self, tmp_path, capsys):
        cfg = dict(SIGMA, mode="grav")
        assert main(["grav", "--config", write_config(tmp_path, "grav", cfg)]) == 1

    def test_cli_alpha_zero_domain(self, tmp_path, capsys):
        cfg = dict(SIGMA, background={"f": [0.0, -1.0], "h": [0.0, 1.0]})
        assert main(["sigma", "--config", write_config(tmp_path, "zero", cfg)]) == 2
        assert result_line(capsys).startswith("RESULT fail ")

    def test_cli_deterministic(self, tmp_path, capsys):
        path = write_config(tmp_path, "sigma", SIGMA)
        assert main(["sigma", "--config", path, "--out", str(tmp_path / "a"), "--threads", "1"]) == 0
        assert main(["sigma", "--config", path, "--out", str(tmp_path / "b"), "--threads", "2"]) == 0
        for name in ("sigma.csv", "sigma.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_cli_dotenv_sets_coverage_floor(self, tmp_path, capsys, monkeypatch):
        monkeypatch.delenv("GBDT_COVERAGE_FLOOR", raising=False)
        monkeypatch.chdir(tmp_path)
        (tmp_path / ".env").write_text("GBDT_COVERAGE_FLOOR=0.5\n")
        try:
            assert main(["sigma", "--config", write_config(tmp_path, "sigma", SIGMA)]) == 0
        finally:
            os.environ.pop("GBDT_COVERAGE_FLOOR", None)
        sidecar = json.loads((tmp_path / "out" / "sigma.json").read_text())
        assert sidecar["config"]["tolerances"]["coverage_floor"] == 0.5

    def test_cli_unwritable_output(self, tmp_path, capsys):
        blocker = tmp_path / "blocker"
        blocker.write_text("")
        path = write_config(tmp_path, "sigma", SIGMA)
        assert main(["sigma", "--config", path, "--out", str(blocker / "out")]) == 2
        captured = capsys.readouterr()
        assert captured.out.strip().splitlines()[-1] == "RESULT fail nan"
        assert "i/o failure" in captured.err
        assert "invalid configuration" not in captured.err
