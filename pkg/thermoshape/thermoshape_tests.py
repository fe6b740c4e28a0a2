# ThermoShape - Sistema de Testes Automatizados
# Testes unitários, de integração da CLI e de aceitação (pytest -m acceptance)

import json
import math
from dataclasses import replace
from unittest.mock import patch

import meshio
import numpy as np
import pandas as pd
import pytest
from pydantic import ValidationError

from cli import main as cli_main
from thermoshape.thermoshape_config import Command, RunConfig, Settings
from thermoshape.thermoshape_datagen import (
    ExperimentSpec,
    InclusionShape,
    builtin_experiments,
    resolve_experiment,
    shared_vertex_fraction,
    simulate_measurement,
)
from thermoshape.thermoshape_errors import (
    ClearanceError,
    ConfigError,
    InversionError,
    MeshError,
    SolverError,
)
from thermoshape.thermoshape_estimators import (
    IndicatorSet,
    adjoint_residual,
    estimate,
    indicators_frame,
    interface_flux_jump,
    mark_cells,
    objective_indicators,
    residual_functional,
    signed_interface_jump,
    state_residual,
)
from thermoshape.thermoshape_fem import (
    BoundaryProfile,
    ComplexNodalField,
    ManufacturedSolution,
    PhysicalCoefficients,
    adjoint_form,
    assemble_ccbm_state,
    assemble_mass,
    assemble_p1,
    ccbm_form,
    cell_gradients,
    h1_seminorm,
    h1_seminorm_error,
    l2_error,
    l2_norm,
    solve_adjoint,
    solve_ccbm_state,
    solve_forward_real,
)
from thermoshape.thermoshape_io import (
    read_json,
    read_mesh,
    read_profile,
    write_json,
    write_mesh,
    write_profile,
    write_vtk,
)
from thermoshape.thermoshape_main import TaskStatus, run
from thermoshape.thermoshape_mesh import (
    REMESH_RETRIES,
    BoundaryTag,
    DeformationField,
    build_rect_mesh,
    build_structured_rect_mesh,
    circle_polygon,
    deform,
    deformation_gradient,
    element_geometry,
    hausdorff_distance,
    prolongate,
    refine_uniform,
    remesh,
    validate_polygon,
)
from thermoshape.thermoshape_monitoring import reset_collector
from thermoshape.thermoshape_sensitivity import (
    FiniteDifferenceEntry,
    SensitivityReport,
    bump_field,
    cb_effect_sweep,
    edge_rate_bound_ratio,
    fd_oracle,
    fd_order,
    grad_norm_spread,
    material_derivative,
    reports_frame,
    rough_field,
    stability_sweep,
    stable_step_check,
)
from thermoshape.thermoshape_shapeopt import (
    CCBMProblem,
    ObjectiveReport,
    OptConfig,
    ReconstructionTrace,
    RhoMode,
    RieszMap,
    TerminationReason,
    TraceEntry,
    balance_rho,
    fit_profile_peak,
    init_guess_from_profile,
    initial_step,
    line_search,
    objective,
    reconstruct,
    shape_gradient,
    volume_gradient,
)

WIDTH, HEIGHT = 0.09, 0.03
EXACT_CENTER, EXACT_RADIUS = (0.045, 0.020), 0.005
GUESS_CENTER, GUESS_RADIUS = (0.048, 0.018), 0.004


def polygon_area(points: np.ndarray) -> float:
    x, y = points[:, 0], points[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def relabel_left_side(mesh):
    """Marca o lado x = 0 como Γb, fora da regra geométrica dos rótulos"""
    left = np.all(mesh.vertices[mesh.boundary_edges, 0] == 0.0, axis=1)
    tags = np.array(mesh.boundary_tags)
    tags[left] = int(BoundaryTag.GAMMA_B)
    return replace(mesh, boundary_tags=tags)


def p1_square_integrals(mesh, values: np.ndarray) -> np.ndarray:
    local = values[mesh.cells]
    return mesh.cell_areas / 12.0 * (np.sum(local ** 2, axis=1) + local.sum(axis=1) ** 2)


# Fixtures para testes

@pytest.fixture(scope="module")
def coeffs():
    """Parâmetros fisiológicos de referência"""
    return PhysicalCoefficients.tissue_defaults()


@pytest.fixture(scope="module")
def constant_coeffs():
    """Coeficientes cuja solução exata é u ≡ 37"""
    return PhysicalCoefficients(sigma=(1.0, 1.0), perfusion=(2.0, 2.0), source=(74.0, 74.0),
                                alpha=10.0, T_a=37.0, T_b=37.0)


@pytest.fixture(scope="module")
def structured_mesh():
    """Malha estruturada sem inclusão"""
    return build_structured_rect_mesh(WIDTH, HEIGHT, 18, 6)


@pytest.fixture(scope="module")
def circle_mesh():
    """Malha com inclusão circular de 64 lados"""
    return build_rect_mesh(WIDTH, HEIGHT, circle_polygon(EXACT_CENTER, EXACT_RADIUS, 64), 0.002)


@pytest.fixture(scope="module")
def measured_profile(coeffs):
    """Traço em Γu do problema direto P1 com a inclusão exata"""
    mesh = build_rect_mesh(WIDTH, HEIGHT, circle_polygon(EXACT_CENTER, EXACT_RADIUS, 32), 0.002)
    _, profile = solve_forward_real(mesh, coeffs, order=1)
    return profile


@pytest.fixture(scope="module")
def guess_mesh():
    """Malha do chute inicial deslocado da inclusão exata"""
    return build_rect_mesh(WIDTH, HEIGHT, circle_polygon(GUESS_CENTER, GUESS_RADIUS, 32), 0.003)


@pytest.fixture(scope="module")
def guess_state(coeffs, measured_profile, guess_mesh):
    """Estado e adjunto CCBM no chute inicial"""
    problem = CCBMProblem(coeffs, measured_profile)
    state = problem.solve(guess_mesh)
    return problem, state, problem.adjoint(state)


@pytest.fixture
def bump_theta(guess_mesh):
    """Campo suave de suporte compacto em torno do chute"""
    return DeformationField.from_function(guess_mesh, bump_field(GUESS_CENTER, 0.007, (1.0, 0.5)))


@pytest.fixture
def small_spec():
    """Experimento leve para testes de ponta a ponta"""
    return ExperimentSpec(
        name="small_circle",
        inclusions=[InclusionShape(kind="circle", center=EXACT_CENTER, radius=EXACT_RADIUS,
                                   n_vertices=32)],
        fine_h=0.002,
        coarse_h=0.004,
        forward_order=1,
    )


@pytest.fixture
def small_spec_path(tmp_path, small_spec):
    """Experimento leve gravado em JSON"""
    path = tmp_path / "small_circle.json"
    path.write_text(small_spec.model_dump_json(), encoding="utf-8")
    return path


# Testes Unitários - Erros e Configuração

class TestErrors:
    """Testes da hierarquia de erros"""

    def test_exit_codes(self):
        """Testa códigos de saída por tipo de erro"""
        assert ConfigError("x").exit_code == 2
        assert MeshError("x").exit_code == 3
        assert SolverError("x").exit_code == 3
        assert issubclass(ClearanceError, InversionError)
        assert issubclass(InversionError, MeshError)

    def test_solver_error_details(self):
        """Testa diagnóstico de resíduo e condicionamento na mensagem"""
        error = SolverError("falhou", residual=1e-3, condition_estimate=1e12)
        assert "residual=1.000e-03" in str(error)
        assert error.condition_estimate == 1e12


class TestConfig:
    """Testes de configuração de execução e settings"""

    def test_list_split_for_sweep(self, tmp_path):
        """Testa leitura de listas separadas por vírgula"""
        config = RunConfig(command="sweep", spec="test1", output_dir=tmp_path, r0="0.004,0.005")
        assert config.r0 == [0.004, 0.005]
        assert config.first("r0") == 0.004
        assert config.first("cb") is None

    def test_list_rejected_outside_sweep(self, tmp_path):
        """Testa rejeição de listas fora do comando sweep"""
        with pytest.raises(ValidationError):
            RunConfig(command="reconstruct", spec="test1", output_dir=tmp_path, delta="0.01,0.02")

    def test_beta_and_rho_exclusive(self, tmp_path):
        """Testa exclusão mútua entre β e ρ"""
        with pytest.raises(ValidationError):
            RunConfig(command="reconstruct", spec="test1", output_dir=tmp_path, beta=2.0, rho=1e-5)

    def test_opt_overrides(self, tmp_path):
        """Testa tradução das opções da CLI para OptConfig"""
        config = RunConfig(command=Command.RECONSTRUCT, spec="test1", output_dir=tmp_path,
                           cb="0.3", beta=3.0, kmax=7)
        overrides = config.opt_overrides()
        assert overrides == {"c_b": 0.3, "rho_mode": "balancing", "beta": 3.0, "K_max": 7}
        cfg = OptConfig(**overrides)
        assert cfg.K_max == 7

    def test_opt_config_beta_validation(self):
        """Testa β > 1 no modo de balanceamento"""
        with pytest.raises(ValidationError):
            OptConfig(rho_mode="balancing", beta=1.0)

    def test_settings_from_environment(self, monkeypatch):
        """Testa leitura das variáveis THERMOSHAPE_*"""
        monkeypatch.setenv("THERMOSHAPE_THREADS", "4")
        monkeypatch.setenv("THERMOSHAPE_LOG_LEVEL", "debug")
        settings = Settings()
        assert settings.threads == 4
        assert settings.log_level == "DEBUG"

    def test_settings_rejects_unknown_level(self, monkeypatch):
        """Testa nível de log inválido"""
        monkeypatch.setenv("THERMOSHAPE_LOG_LEVEL", "verbose")
        with pytest.raises(ValidationError):
            Settings()


# Testes Unitários - Malha

class TestMesh:
    """Testes do núcleo geométrico"""

    def test_inclusion_loop_preserved(self, circle_mesh):
        """Testa laço de interface com os 64 vértices do polígono"""
        assert len(circle_mesh.interface_loops) == 1
        assert len(circle_mesh.interface_loop) == 64
        polygon = circle_polygon(EXACT_CENTER, EXACT_RADIUS, 64)
        assert circle_mesh.tumor_volume == pytest.approx(polygon_area(polygon), rel=1e-12)
        circle_mesh.validate()

    def test_boundary_tags(self, circle_mesh):
        """Testa rótulos Γu no topo e Γb na base"""
        top = circle_mesh.vertices[circle_mesh.vertices_with_tag(BoundaryTag.GAMMA_U)]
        bottom = circle_mesh.vertices[circle_mesh.vertices_with_tag(BoundaryTag.GAMMA_B)]
        assert np.allclose(top[:, 1], HEIGHT)
        assert np.allclose(bottom[:, 1], 0.0)
        arcs = circle_mesh.arc_positions(circle_mesh.gamma_u_vertices)
        assert arcs[0] == pytest.approx(0.0) and arcs[-1] == pytest.approx(WIDTH)
        assert np.all(np.diff(arcs) > 0)

    def test_validate_polygon_errors(self):
        """Testa polígonos degenerados, auto-intersectantes e próximos da fronteira"""
        with pytest.raises(MeshError):
            validate_polygon(np.array([[0.04, 0.01], [0.05, 0.01]]), WIDTH, HEIGHT)
        bowtie = np.array([[0.04, 0.01], [0.05, 0.02], [0.05, 0.01], [0.04, 0.02]])
        with pytest.raises(MeshError):
            validate_polygon(bowtie, WIDTH, HEIGHT)
        with pytest.raises(MeshError):
            validate_polygon(circle_polygon((0.045, 0.027), 0.002), WIDTH, HEIGHT)

    def test_validate_polygon_orientation(self):
        """Testa reorientação anti-horária"""
        clockwise = circle_polygon(EXACT_CENTER, EXACT_RADIUS, 16)[::-1]
        fixed = validate_polygon(clockwise, WIDTH, HEIGHT)
        x, y = fixed[:, 0], fixed[:, 1]
        assert np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)) > 0

    def test_element_geometry_identities(self, structured_mesh):
        """Testa E⁻¹E = I, Σ∇λ = 0 e coordenadas baricêntricas dos vértices"""
        for cell in range(structured_mesh.n_cells):
            geo = element_geometry(structured_mesh, cell)
            assert np.allclose(geo.inv_edge_matrix @ geo.edge_matrix, np.eye(2))
            assert np.allclose(geo.barycentric_gradients.sum(axis=0), 0.0, atol=1e-9)
            assert np.allclose(geo.barycentric_gradients, structured_mesh.barycentric_gradients[cell])
            corners = structured_mesh.vertices[structured_mesh.cells[cell]]
            assert np.allclose(geo.barycentric(corners), np.eye(3), atol=1e-12)
            assert geo.area == pytest.approx(structured_mesh.cell_areas[cell])
            assert geo.a_K <= geo.h_K
        with pytest.raises(IndexError):
            element_geometry(structured_mesh, structured_mesh.n_cells)

    def test_deform_zero_field(self, circle_mesh):
        """Testa deformação nula: mesmos vértices, nova identidade"""
        moved = deform(circle_mesh, DeformationField.zeros(circle_mesh), 1.0)
        assert np.array_equal(moved.vertices, circle_mesh.vertices)
        assert moved.topology_id == circle_mesh.topology_id
        assert moved.mesh_id != circle_mesh.mesh_id
        assert np.allclose(deformation_gradient(circle_mesh, moved), np.eye(2))

    def test_deform_inversion(self, structured_mesh):
        """Testa rejeição de passo que inverte células"""
        vectors = np.zeros((structured_mesh.n_vertices, 2))
        interior = np.flatnonzero(~structured_mesh.boundary_mask)[0]
        vectors[interior] = (0.05, 0.0)
        field = DeformationField(vectors, structured_mesh.topology_id)
        with pytest.raises(InversionError):
            deform(structured_mesh, field, 1.0)

    def test_deform_clearance(self, circle_mesh):
        """Testa violação da distância mínima da interface a ∂Ω"""
        field = DeformationField.from_function(circle_mesh, bump_field(EXACT_CENTER, 0.008, (0.0, 1.0)))
        with pytest.raises(ClearanceError):
            deform(circle_mesh, field, 1e-6, clearance=0.01)

    def test_deform_reversible(self, circle_mesh):
        """Testa T_{-t} ∘ T_t = identidade"""
        field = DeformationField.from_function(circle_mesh, bump_field(EXACT_CENTER, 0.008, (1.0, 0.0)))
        there = deform(circle_mesh, field, 1e-4)
        back = deform(there, field, -1e-4)
        assert np.allclose(back.vertices, circle_mesh.vertices, rtol=0.0, atol=1e-15)

    def test_field_boundary_admissibility(self, circle_mesh):
        """Testa campo não nulo em ∂Ω"""
        field = DeformationField(np.ones((circle_mesh.n_vertices, 2)), circle_mesh.topology_id)
        with pytest.raises(MeshError):
            deform(circle_mesh, field, 1e-6)

    def test_refine_uniform(self, circle_mesh):
        """Testa filhos com um quarto da área e interface preservada"""
        fine = refine_uniform(circle_mesh)
        assert fine.n_cells == 4 * circle_mesh.n_cells
        children = fine.cell_areas.reshape(-1, 4)
        assert np.allclose(children, circle_mesh.cell_areas[:, None] / 4.0)
        assert len(fine.interface_loops) == 1
        assert len(fine.interface_loop) == 128
        assert fine.tumor_volume == pytest.approx(circle_mesh.tumor_volume, rel=1e-12)

    def test_prolongate_linear_field(self, circle_mesh):
        """Testa interpolação exata de campo linear"""
        fine = refine_uniform(circle_mesh)
        linear = lambda p: 2.0 * p[:, 0] + 3.0 * p[:, 1] + 1.0
        assert np.allclose(prolongate(circle_mesh, linear(circle_mesh.vertices)), linear(fine.vertices))

    def test_remesh_keeps_interface(self, circle_mesh):
        """Testa remalhamento com a mesma interface"""
        new_mesh = remesh(circle_mesh)
        assert new_mesh.topology_id != circle_mesh.topology_id
        assert len(new_mesh.interface_loops) == 1
        assert new_mesh.tumor_volume == pytest.approx(circle_mesh.tumor_volume, rel=1e-10)
        assert new_mesh.min_quality > 0.0
        assert new_mesh.min_quality >= 0.5 * circle_mesh.min_quality

    def test_refine_keeps_boundary_tags(self, circle_mesh):
        """Testa que arestas filhas herdam o rótulo da aresta pai"""
        relabeled = relabel_left_side(circle_mesh)
        fine = refine_uniform(relabeled)
        assert len(fine.boundary_edges) == 2 * len(relabeled.boundary_edges)
        for tag in BoundaryTag:
            assert len(fine.edges_with_tag(tag)) == 2 * len(relabeled.edges_with_tag(tag))
        left = np.all(fine.vertices[fine.boundary_edges, 0] == 0.0, axis=1)
        assert np.all(fine.boundary_tags[left] == int(BoundaryTag.GAMMA_B))
        assert len(fine.interface_edges) == 2 * len(relabeled.interface_edges)

    def test_remesh_keeps_boundary_tags(self, circle_mesh):
        """Testa que o remalhamento preserva os rótulos de cada segmento externo"""
        relabeled = relabel_left_side(circle_mesh)
        new_mesh = remesh(relabeled)
        for tag in BoundaryTag:
            assert len(new_mesh.edges_with_tag(tag)) == len(relabeled.edges_with_tag(tag))
        left = np.all(new_mesh.vertices[new_mesh.boundary_edges, 0] == 0.0, axis=1)
        assert np.all(new_mesh.boundary_tags[left] == int(BoundaryTag.GAMMA_B))

    def test_remesh_retries_on_quality_loss(self, circle_mesh):
        """Testa nova triangulação com h menor quando a qualidade cai pela metade"""
        poor = build_structured_rect_mesh(WIDTH, HEIGHT, 2, 60)
        assert poor.min_quality < 0.5 * circle_mesh.min_quality
        with patch("thermoshape.thermoshape_mesh._triangulate",
                   side_effect=[poor, circle_mesh]) as triangulate:
            result = remesh(circle_mesh)
        assert result is circle_mesh
        assert triangulate.call_count == 2
        first, second = (call.args[2] for call in triangulate.call_args_list)
        assert second == pytest.approx(0.5 * first)

    def test_remesh_rejects_quality_loss(self, circle_mesh):
        """Testa erro quando nenhuma tentativa preserva a qualidade mínima"""
        poor = build_structured_rect_mesh(WIDTH, HEIGHT, 2, 60)
        with patch("thermoshape.thermoshape_mesh._triangulate", return_value=poor) as triangulate:
            with pytest.raises(MeshError):
                remesh(circle_mesh)
        assert triangulate.call_count == REMESH_RETRIES + 1

    def test_hausdorff_shifted_circle(self):
        """Testa distância de Hausdorff entre círculos transladados"""
        a = circle_polygon((0.0, 0.0), 1.0, 128)
        b = a + np.array([0.1, 0.0])
        assert hausdorff_distance(a, b) == pytest.approx(0.1, rel=1e-2)
        assert hausdorff_distance(a, a) == pytest.approx(0.0, abs=1e-12)

    def test_multiple_inclusions(self):
        """Testa duas inclusões disjuntas e rejeição de inclusões sobrepostas"""
        polygons = [circle_polygon((0.030, 0.020), 0.004, 32), circle_polygon((0.060, 0.018), 0.004, 32)]
        mesh = build_rect_mesh(WIDTH, HEIGHT, polygons, 0.003)
        assert len(mesh.interface_loops) == 2
        assert mesh.tumor_volume == pytest.approx(sum(polygon_area(p) for p in polygons), rel=1e-12)
        overlapping = [circle_polygon((0.045, 0.015), 0.004), circle_polygon((0.048, 0.015), 0.004)]
        with pytest.raises(MeshError):
            build_rect_mesh(WIDTH, HEIGHT, overlapping, 0.003)


# Testes Unitários - Elementos Finitos

class TestFEM:
    """Testes de montagem e solução do estado e do adjunto"""

    def test_coefficient_validation(self):
        """Testa coeficientes não positivos"""
        with pytest.raises(ValueError):
            PhysicalCoefficients(sigma=(0.0, 0.5), perfusion=(1.0, 1.0), source=(0.0, 0.0),
                                 alpha=10.0, T_a=25.0, T_b=37.0)

    def test_constant_solution(self, circle_mesh, constant_coeffs):
        """Testa u ≡ T quando os dados são compatíveis com a constante"""
        h = BoundaryProfile([0.0, WIDTH], [37.0, 37.0])
        system = assemble_ccbm_state(circle_mesh, constant_coeffs, h)
        u = solve_ccbm_state(system)
        assert np.allclose(u.values, 37.0, atol=1e-9)
        p = solve_adjoint(circle_mesh, constant_coeffs, u, system)
        assert np.allclose(p.values, 0.0, atol=1e-9)
        assert objective(circle_mesh, u, h, 0.0).J == pytest.approx(0.0, abs=1e-18)

    def test_constant_solution_p2(self, circle_mesh, constant_coeffs):
        """Testa solver direto P2 com solução constante"""
        values, profile = solve_forward_real(circle_mesh, constant_coeffs, order=2)
        assert np.allclose(values, 37.0, atol=1e-9)
        assert np.allclose(profile.values, 37.0, atol=1e-9)

    def test_consistent_data_has_zero_imaginary_part(self, circle_mesh, coeffs):
        """Testa uⁱ ≈ 0 quando h é o traço da solução real na mesma malha"""
        values, profile = solve_forward_real(circle_mesh, coeffs, order=1)
        u = solve_ccbm_state(assemble_ccbm_state(circle_mesh, coeffs, profile))
        assert np.allclose(u.real, values, rtol=1e-9)
        assert np.max(np.abs(u.imag)) < 1e-8

    def test_dirichlet_values_exact(self, circle_mesh, coeffs, measured_profile):
        """Testa u = T_b exatamente em Γb"""
        u = solve_ccbm_state(assemble_ccbm_state(circle_mesh, coeffs, measured_profile))
        nodes = circle_mesh.vertices_with_tag(BoundaryTag.GAMMA_B)
        assert np.all(u.values[nodes] == coeffs.T_b)

    def test_homogeneous_data_gives_zero(self, circle_mesh, coeffs):
        """Testa solução nula para dados nulos"""
        h = BoundaryProfile([0.0, WIDTH], [0.0, 0.0])
        u = solve_ccbm_state(assemble_ccbm_state(circle_mesh, coeffs.scaled_data(0.0), h))
        assert np.allclose(u.values, 0.0, atol=1e-14)

    def test_linearity_in_data(self, circle_mesh, coeffs, measured_profile):
        """Testa u(2·dados) = 2·u(dados)"""
        u = solve_ccbm_state(assemble_ccbm_state(circle_mesh, coeffs, measured_profile))
        doubled = measured_profile.with_values(2.0 * measured_profile.values)
        u2 = solve_ccbm_state(assemble_ccbm_state(circle_mesh, coeffs.scaled_data(2.0), doubled))
        assert np.allclose(u2.values, 2.0 * u.values, rtol=1e-10)

    def test_coercivity(self, circle_mesh, coeffs, measured_profile):
        """Testa Re a(φ, φ) ≥ min σ |φ|²_H1 e a_adj(φ, φ) = conj(a(φ, φ))"""
        system = assemble_ccbm_state(circle_mesh, coeffs, measured_profile)
        rng = np.random.default_rng(7)
        for _ in range(100):
            phi = np.zeros(circle_mesh.n_vertices, dtype=complex)
            phi[system.dof_map] = rng.standard_normal(len(system.dof_map)) \
                + 1j * rng.standard_normal(len(system.dof_map))
            form = ccbm_form(system, phi, phi)
            assert form.real >= min(coeffs.sigma) * h1_seminorm(circle_mesh, phi) ** 2 * (1 - 1e-12)
            assert form.imag >= 0.0
            assert adjoint_form(system, phi, phi) == pytest.approx(np.conj(form), rel=1e-12)

    def test_field_mesh_mismatch(self, circle_mesh, structured_mesh, coeffs):
        """Testa campo nodal de outra malha"""
        u = ComplexNodalField(np.zeros(structured_mesh.n_vertices), structured_mesh.mesh_id)
        with pytest.raises(ValueError):
            solve_adjoint(circle_mesh, coeffs, u)

    def test_profile_must_cover_gamma_u(self, circle_mesh, coeffs):
        """Testa perfil que não cobre Γu"""
        short = BoundaryProfile([0.01, 0.05], [37.0, 37.0])
        with pytest.raises(ValueError):
            assemble_ccbm_state(circle_mesh, coeffs, short)

    def test_manufactured_convergence(self):
        """Testa ordens 1 (H¹) e 2 (L²) com solução fabricada"""
        coeffs = PhysicalCoefficients(sigma=(0.5, 0.5), perfusion=(2000.0, 2000.0), source=(0.0, 0.0),
                                      alpha=10.0, T_a=25.0, T_b=37.0)
        exact = ManufacturedSolution.skin_profile(WIDTH, coeffs.T_b)
        h1_errors, l2_errors = [], []
        for level in range(3):
            mesh = build_structured_rect_mesh(WIDTH, HEIGHT, 12 * 2 ** level, 4 * 2 ** level)
            values, _ = solve_forward_real(mesh, coeffs, order=1, manufactured=exact)
            h1_errors.append(h1_seminorm_error(mesh, values, exact))
            l2_errors.append(l2_error(mesh, values, exact))
        assert h1_errors[1] / h1_errors[2] > 1.7
        assert l2_errors[1] / l2_errors[2] > 3.2


# Testes Unitários - Otimização de Forma

class TestShapeOptimization:
    """Testes do funcional, gradiente de forma, Riesz e busca linear"""

    def test_objective_values(self, structured_mesh):
        """Testa J = |Ω|/2 para uⁱ = 1 e J_LS para desvio unitário"""
        u = ComplexNodalField(np.full(structured_mesh.n_vertices, 37.0 + 1.0j), structured_mesh.mesh_id)
        report = objective(structured_mesh, u, BoundaryProfile([0.0, WIDTH], [36.0, 36.0]), 0.0)
        assert report.J == pytest.approx(0.5 * WIDTH * HEIGHT, rel=1e-12)
        assert report.J_LS == pytest.approx(0.5 * WIDTH, rel=1e-12)
        assert report.combined == pytest.approx(report.J + report.J_LS)

    def test_balance_rho(self):
        """Testa J + ρ vol = β J"""
        rho = balance_rho(2.0, 4.0, 3.0)
        assert rho == pytest.approx(1.0)
        assert 2.0 + rho * 4.0 == pytest.approx(3.0 * 2.0)
        with pytest.raises(ValueError):
            balance_rho(2.0, 4.0, 1.0)

    def test_volume_gradient(self, circle_mesh):
        """Testa dV[x] = 2ρ|Ω₀| e dV[constante] = 0"""
        rho = 1e-3
        gradient = volume_gradient(circle_mesh, rho)
        identity = DeformationField.from_function(circle_mesh, lambda p: p)
        constant = DeformationField.from_function(circle_mesh, lambda p: np.tile([1.0, -2.0], (len(p), 1)))
        assert gradient(identity) == pytest.approx(2.0 * rho * circle_mesh.tumor_volume, rel=1e-10)
        assert abs(gradient(constant)) < 1e-12 * rho

    def test_volume_gradient_finite_difference(self, guess_mesh, bump_theta):
        """Testa dV contra diferença central do volume"""
        t = 1e-5
        plus = deform(guess_mesh, bump_theta, t).tumor_volume
        minus = deform(guess_mesh, bump_theta, -t).tumor_volume
        assert volume_gradient(guess_mesh, 1.0)(bump_theta) == pytest.approx((plus - minus) / (2 * t), rel=1e-8)

    def test_shape_gradient_matches_material_derivative(self, coeffs, guess_mesh, guess_state, bump_theta):
        """Testa dJ[θ] = ∫uⁱ u̇ⁱ + ½∫(uⁱ)² div θ"""
        _, state, p = guess_state
        udot = material_derivative(guess_mesh, coeffs, state.u, bump_theta, state.system)
        divergence = np.einsum("cid,cid->c", bump_theta.vectors[guess_mesh.cells],
                               guess_mesh.barycentric_gradients)
        expected = (float(state.u.imag @ (assemble_mass(guess_mesh) @ udot.imag))
                    + 0.5 * float(np.sum(p1_square_integrals(guess_mesh, state.u.imag) * divergence)))
        dJ = shape_gradient(guess_mesh, coeffs, state.u, p)(bump_theta)
        assert dJ == pytest.approx(expected, rel=1e-6)

    def test_shape_gradient_finite_difference(self, coeffs, guess_mesh, guess_state, bump_theta):
        """Testa dJ[θ] contra diferença central de J"""
        problem, state, p = guess_state
        t = 1e-5
        plus = problem.objective(problem.solve(deform(guess_mesh, bump_theta, t)), 0.0).J
        minus = problem.objective(problem.solve(deform(guess_mesh, bump_theta, -t)), 0.0).J
        dJ = shape_gradient(guess_mesh, coeffs, state.u, p)(bump_theta)
        assert abs(dJ) > 0.0
        assert dJ == pytest.approx((plus - minus) / (2 * t), rel=1e-3)

    def test_riesz_descent_identity(self, guess_mesh, guess_state):
        """Testa b(θ, θ) + dJ[θ] = 0 e θ = 0 em ∂Ω"""
        problem, state, p = guess_state
        gradient = problem.gradient(state, p, 1e-5)
        riesz = RieszMap(guess_mesh, 0.5)
        theta = riesz.representative(gradient)
        b = riesz.inner(theta, theta)
        assert b > 0.0
        assert b + gradient(theta) == pytest.approx(0.0, abs=1e-8 * b)
        assert np.all(theta.vectors[guess_mesh.boundary_mask] == 0.0)

    def test_riesz_interface_term(self, guess_mesh, guess_state):
        """Testa termo tangencial nulo para c_b = 1"""
        problem, state, p = guess_state
        gradient = problem.gradient(state, p, 0.0)
        full_h1 = RieszMap(guess_mesh, 1.0)
        assert full_h1.interface_term(full_h1.representative(gradient)) == 0.0
        with pytest.raises(ValueError):
            RieszMap(guess_mesh, 0.0)

    def test_initial_step(self):
        """Testa t = s J / √b(θ, θ)"""
        assert initial_step(2.0, 0.5, 4.0) == pytest.approx(0.5)

    def test_line_search_zero_field(self, structured_mesh):
        """Testa θ = 0: nenhum passo aceito"""
        result = line_search(structured_mesh, DeformationField.zeros(structured_mesh), 1.0, 0.5,
                             lambda mesh: 0.0, b_norm2=0.0)
        assert not result.accepted
        assert result.t == 0.0

    def test_line_search_accepts_first_decrease(self, structured_mesh):
        """Testa aceitação no primeiro passo com decréscimo"""
        theta = DeformationField.from_function(structured_mesh, bump_field((0.045, 0.015), 0.01))
        result = line_search(structured_mesh, theta, 1.0, 1e-4, lambda mesh: 0.5, b_norm2=1.0)
        assert result.accepted
        assert result.t == pytest.approx(1e-4)
        assert result.trials == 1
        assert result.value == 0.5
        assert result.mesh.topology_id == structured_mesh.topology_id

    def test_line_search_halves_after_inversion(self, structured_mesh):
        """Testa bisseção após passos que invertem células"""
        collector = reset_collector()
        theta = DeformationField.from_function(structured_mesh, bump_field((0.045, 0.015), 0.01))
        result = line_search(structured_mesh, theta, 1.0, 1.0, lambda mesh: 0.5, b_norm2=1.0)
        assert result.accepted
        assert result.t < result.initial_t
        assert collector.registry.get_sample_value(
            "thermoshape_line_search_trials_total", {"outcome": "inverted"}) >= 1

    def test_line_search_exhausted(self, structured_mesh):
        """Testa parada abaixo de t_min sem decréscimo"""
        collector = reset_collector()
        theta = DeformationField.from_function(structured_mesh, bump_field((0.045, 0.015), 0.01))
        result = line_search(structured_mesh, theta, 1.0, 1e-4, lambda mesh: 2.0, b_norm2=1.0, t_min=1e-6)
        assert not result.accepted
        assert result.t < 1e-6
        assert result.trials == 7
        assert collector.registry.get_sample_value(
            "thermoshape_line_search_trials_total", {"outcome": "no_decrease"}) == 7

    def test_fit_profile_peak(self):
        """Testa pico de perfil gaussiano"""
        arc = np.linspace(0.0, WIDTH, 181)
        centered = BoundaryProfile(arc, 37.0 + np.exp(-((arc - 0.045) / 0.03) ** 2))
        assert fit_profile_peak(centered).position == pytest.approx(0.045, abs=1e-4)
        shifted = BoundaryProfile(arc, 37.0 + np.exp(-((arc - 0.040) / 0.03) ** 2))
        peak = fit_profile_peak(shifted)
        assert peak.position == pytest.approx(0.040, abs=1e-3)
        assert not peak.flat

    def test_fit_flat_profile(self):
        """Testa perfil plano: centro de Γu"""
        flat = BoundaryProfile(np.linspace(0.0, WIDTH, 50), np.full(50, 37.0))
        peak = fit_profile_peak(flat)
        assert peak.flat
        assert peak.position == pytest.approx(WIDTH / 2)
        with pytest.raises(ValueError):
            fit_profile_peak(BoundaryProfile(np.linspace(0.0, WIDTH, 5), np.arange(5.0)))

    def test_init_guess(self, measured_profile):
        """Testa círculo sob o pico, na profundidade dada"""
        polygon = init_guess_from_profile(measured_profile, depth=0.01, r0=0.005, top=HEIGHT)
        center = polygon.mean(axis=0)
        assert center[1] == pytest.approx(HEIGHT - 0.01, abs=1e-12)
        assert center[0] == pytest.approx(EXACT_CENTER[0], abs=2e-3)
        assert np.allclose(np.linalg.norm(polygon - center, axis=1), 0.005)

    def test_reconstruction_decreases_objective(self, coeffs, measured_profile, guess_mesh):
        """Testa decréscimo estrito do funcional penalizado a cada passo aceito"""
        cfg = OptConfig(K_max=3, remesh_every=2)
        trace = reconstruct(guess_mesh, coeffs, measured_profile, cfg)
        assert trace.termination in (TerminationReason.K_MAX, TerminationReason.STAGNATION,
                                     TerminationReason.T_MIN)
        for entry in trace.entries[1:]:
            assert entry.value_after < entry.value_before
            assert entry.t > 0.0
        frame = trace.history_frame()
        assert list(frame.columns[:8]) == ["iter", "J", "J_LS", "vol", "rho", "t", "initial_t", "grad_norm"]
        assert len(frame) == len(trace.entries)
        assert trace.selected.report.combined == min(e.report.combined for e in trace.entries)
        summary = trace.summary([circle_polygon(EXACT_CENTER, EXACT_RADIUS)])
        assert summary["hausdorff"] > 0.0
        assert summary["selected_iteration"] == trace.selected.iteration

    def test_selected_shape_from_history(self, guess_mesh, circle_mesh):
        """Testa escolha do iterado de menor J + J_LS quando o último não é o melhor"""
        trace = ReconstructionTrace()
        for iteration, (cost, mesh) in enumerate(zip([3.0, 1.0, 2.0], [guess_mesh, circle_mesh, guess_mesh])):
            report = ObjectiveReport(J=cost, J_LS=0.0, vol=mesh.tumor_volume, rho=0.0, combined=cost)
            trace.append(TraceEntry(iteration=iteration, mesh=mesh, report=report))
        assert trace.selected.iteration == 1
        assert trace.from_history
        summary = trace.summary([circle_polygon(EXACT_CENTER, EXACT_RADIUS, 64)])
        assert summary["selected_iteration"] == 1
        assert summary["selected_from_history"] is True
        assert summary["selected_combined"] == 1.0
        assert summary["final_J"] == 2.0
        assert summary["hausdorff"] == pytest.approx(0.0, abs=1e-12)
        assert summary["final_hausdorff"] > 0.0

    def test_selected_shape_is_last_when_decreasing(self, guess_mesh):
        """Testa que histórico decrescente seleciona o último iterado"""
        trace = ReconstructionTrace()
        for iteration, cost in enumerate([3.0, 2.0, 1.0]):
            report = ObjectiveReport(J=cost, J_LS=0.0, vol=guess_mesh.tumor_volume, rho=0.0, combined=cost)
            trace.append(TraceEntry(iteration=iteration, mesh=guess_mesh, report=report))
        assert trace.selected is trace.final
        assert not trace.from_history

    def test_first_trial_step_raw_and_normalized(self, coeffs, measured_profile, guess_mesh):
        """Testa t0 = s·J/√b sem normalização e t0 = s·(J/J_ref)/√b com normalização"""
        for normalize in (False, True):
            cfg = OptConfig(K_max=1, rho=0.0, normalize_cost=normalize)
            trace = reconstruct(guess_mesh, coeffs, measured_profile, cfg)
            assert len(trace.entries) == 2
            start, first = trace.entries
            j_ref = start.report.penalized if normalize else 1.0
            expected = cfg.s * (start.report.penalized / j_ref) / first.grad_norm
            assert first.initial_t == pytest.approx(expected, rel=1e-12)


# Testes Unitários - Sensibilidade à Malha

class TestSensitivity:
    """Testes da derivada material e do oráculo de diferenças finitas"""

    def test_zero_velocity(self, coeffs, guess_mesh, guess_state):
        """Testa u̇ = 0 para Ẋ = 0"""
        _, state, _ = guess_state
        udot = material_derivative(guess_mesh, coeffs, state.u, DeformationField.zeros(guess_mesh))
        assert np.all(udot.values == 0.0)

    def test_linearity_in_velocity(self, coeffs, guess_mesh, guess_state, bump_theta):
        """Testa u̇(2Ẋ) = 2u̇(Ẋ)"""
        _, state, _ = guess_state
        once = material_derivative(guess_mesh, coeffs, state.u, bump_theta, state.system)
        twice = material_derivative(guess_mesh, coeffs, state.u, bump_theta.scaled(2.0), state.system)
        assert np.allclose(twice.values, 2.0 * once.values, rtol=1e-12, atol=1e-12)
        nodes = guess_mesh.vertices_with_tag(BoundaryTag.GAMMA_B)
        assert np.all(once.values[nodes] == 0.0)

    def test_fd_oracle_first_order(self, coeffs, guess_mesh, measured_profile, bump_theta):
        """Testa erro do oráculo decrescendo como O(t)"""
        entries = fd_oracle(guess_mesh, coeffs, measured_profile, bump_theta, t_list=(1e-4, 5e-5, 2.5e-5))
        errors = [e.error for e in entries]
        assert not any(e.inverted for e in entries)
        assert errors[0] > errors[1] > errors[2]
        assert 0.7 < fd_order(entries) < 1.3

    def test_edge_rate_bound(self, circle_mesh):
        """Testa ‖Ė_K‖ ≤ √2 h_K ‖∇Ẋ‖_∞ para campo suave"""
        bump = bump_field(EXACT_CENTER, 0.008, (1.0, -0.5))
        assert 0.0 < edge_rate_bound_ratio(circle_mesh, bump) <= 1.0

    def test_rough_field(self, circle_mesh):
        """Testa campo rugoso: norma sup unitária e nulo em ∂Ω"""
        field = rough_field(circle_mesh, np.random.default_rng(0))
        assert np.linalg.norm(field.vectors, axis=1).max() == pytest.approx(1.0)
        assert np.all(field.vectors[circle_mesh.boundary_mask] == 0.0)
        assert not field.smooth_flag

    def test_stable_step_check(self):
        """Testa critério t‖∇u̇‖ ≤ ε₁"""
        report = SensitivityReport(grad_norm=10.0)
        assert stable_step_check(report, 1e-4)
        assert not stable_step_check(report, 1e-3)

    def test_report_requires_decreasing_t(self):
        """Testa valores de t em ordem estritamente decrescente"""
        with pytest.raises(ValueError):
            SensitivityReport(grad_norm=1.0, fd_errors=[FiniteDifferenceEntry(1e-5, 1.0),
                                                        FiniteDifferenceEntry(1e-4, 1.0)])

    def test_stability_sweep(self, coeffs, guess_mesh, measured_profile):
        """Testa relatórios suave e rugoso por nível de malha"""
        bump = bump_field(GUESS_CENTER, 0.007, (1.0, 0.5))
        reports = stability_sweep([guess_mesh], coeffs, measured_profile, bump, seed=3, t_list=(1e-4, 5e-5))
        assert [r.field_kind for r in reports] == ["smooth", "rough"]
        assert all(r.mesh_level == 0 and r.grad_norm > 0.0 for r in reports)
        assert [e.t for e in reports[0].fd_errors] == [1e-4, 5e-5]
        frame = reports_frame(reports)
        assert len(frame) == 4
        assert set(frame["field_kind"]) == {"smooth", "rough"}

    def test_cb_effect_sweep(self, coeffs, guess_mesh, measured_profile):
        """Testa tabela de efeito de c_b"""
        frame = cb_effect_sweep([guess_mesh], coeffs, {0.0: measured_profile}, (0.5, 1.0))
        assert list(frame["c_b"]) == [0.5, 1.0]
        assert np.all(frame["grad_theta"] > 0.0)
        assert np.all(frame["material_norm"] > 0.0)


# Testes Unitários - Estimadores

class TestEstimators:
    """Testes dos indicadores a posteriori e da marcação"""

    def test_equal_indicators(self):
        """Testa κ = 1 e ξ = η quando η = μ"""
        eta = np.array([0.1, 0.4, 0.2])
        xi, kappa = objective_indicators(eta, eta)
        assert kappa == pytest.approx(1.0)
        assert np.allclose(xi, eta)

    def test_kappa_scaling(self):
        """Testa κ/2 ao multiplicar μ por 4"""
        eta = np.array([0.1, 0.4, 0.2])
        _, kappa = objective_indicators(eta, 4.0 * eta)
        assert kappa == pytest.approx(0.5)

    def test_zero_adjoint_indicators(self):
        """Testa μ ≡ 0: κ indefinido e ξ = η"""
        eta = np.array([0.1, 0.4])
        xi, kappa = objective_indicators(eta, np.zeros(2))
        assert math.isnan(kappa)
        assert np.array_equal(xi, eta)

    def test_mark_cells(self):
        """Testa conjunto mínimo de Dörfler com desempate pelo índice"""
        indicators = np.array([1.0, 2.0, 2.0, 1.0])
        assert mark_cells(indicators, 0.5).tolist() == [1, 2]
        assert mark_cells(indicators, 0.5).tolist() == mark_cells(indicators, 0.5).tolist()
        assert mark_cells(np.array([0.0, 3.0, 0.0, 1.0]), 1.0).tolist() == [1, 3]
        assert mark_cells(np.zeros(3), 0.5).size == 0
        with pytest.raises(ValueError):
            mark_cells(indicators, 0.0)

    def test_global_values(self):
        """Testa valores globais como raiz da soma dos quadrados"""
        indicators = IndicatorSet(eta=np.array([3.0, 4.0]), mu=np.array([0.0, 1.0]),
                                  xi=np.array([1.0, 1.0]), kappa=1.0)
        assert indicators.eta_global == pytest.approx(5.0)
        assert indicators.summary()["n_cells"] == 2

    def test_state_residual_orthogonality(self, coeffs, guess_mesh, guess_state, measured_profile):
        """Testa r(ψ_i) ≈ 0 nos nós livres para o estado discreto"""
        _, state, _ = guess_state
        r = residual_functional(guess_mesh, state_residual(guess_mesh, coeffs, state.u, measured_profile))
        free = np.setdiff1d(np.arange(guess_mesh.n_vertices), guess_mesh.vertices_with_tag(BoundaryTag.GAMMA_B))
        scale = np.abs(assemble_p1(guess_mesh, coeffs).source_load).max()
        assert np.max(np.abs(r[free])) < 1e-7 * scale

    def test_adjoint_residual_orthogonality(self, coeffs, guess_mesh, guess_state):
        """Testa r^a(ψ_i) ≈ 0 nos nós livres para o adjunto discreto"""
        _, state, p = guess_state
        r = residual_functional(guess_mesh, adjoint_residual(guess_mesh, coeffs, p, state.u))
        free = np.setdiff1d(np.arange(guess_mesh.n_vertices), guess_mesh.vertices_with_tag(BoundaryTag.GAMMA_B))
        scale = np.abs(assemble_mass(guess_mesh) @ state.u.imag).max()
        assert np.max(np.abs(r[free])) < 1e-7 * scale

    def test_interface_jump_symmetric(self, coeffs, guess_mesh, guess_state):
        """Testa o mesmo salto de fluxo visto dos dois lados da interface"""
        _, state, _ = guess_state
        pairs = guess_mesh.edge_cells
        interior = pairs[:, 1] >= 0
        regions = guess_mesh.cell_region
        crossing = np.flatnonzero(interior & (regions[pairs[:, 0]] != regions[np.maximum(pairs[:, 1], 0)]))
        edge = int(crossing[0])
        left, right = (int(c) for c in pairs[edge])
        assert interface_flux_jump(guess_mesh, coeffs, state.u, edge, left) == pytest.approx(
            interface_flux_jump(guess_mesh, coeffs, state.u, edge, right))
        boundary_edge = int(np.flatnonzero(~interior)[0])
        with pytest.raises(MeshError):
            interface_flux_jump(guess_mesh, coeffs, state.u, boundary_edge, int(pairs[boundary_edge, 0]))

    def test_signed_interface_jump_antisymmetric(self, coeffs, guess_mesh, guess_state):
        """Testa salto com normal fixa: lado saudável é o oposto do lado tumoral"""
        _, state, _ = guess_state
        pairs = guess_mesh.edge_cells
        regions = guess_mesh.cell_region
        for edge in guess_mesh.interface_edges[:5]:
            index = int(np.flatnonzero(np.all(guess_mesh.edges == np.sort(edge), axis=1))[0])
            first, second = (int(c) for c in pairs[index])
            tumor, healthy = (first, second) if regions[first] == 0 else (second, first)
            from_tumor = signed_interface_jump(guess_mesh, coeffs, state.u, index, tumor)
            from_healthy = signed_interface_jump(guess_mesh, coeffs, state.u, index, healthy)
            assert from_healthy == pytest.approx(-from_tumor, rel=1e-12, abs=1e-15)
            assert from_tumor == pytest.approx(interface_flux_jump(guess_mesh, coeffs, state.u, index, tumor))
            assert abs(from_healthy) == pytest.approx(
                abs(interface_flux_jump(guess_mesh, coeffs, state.u, index, healthy)))

    def test_signed_interface_jump_requires_interface(self, coeffs, guess_mesh, guess_state):
        """Testa rejeição de aresta interior sem troca de região"""
        _, state, _ = guess_state
        pairs = guess_mesh.edge_cells
        regions = guess_mesh.cell_region
        same = np.flatnonzero((pairs[:, 1] >= 0) & (regions[pairs[:, 0]] == regions[np.maximum(pairs[:, 1], 0)]))
        edge = int(same[0])
        with pytest.raises(MeshError):
            signed_interface_jump(guess_mesh, coeffs, state.u, edge, int(pairs[edge, 0]))

    def test_exact_solution_has_zero_indicators(self, circle_mesh, constant_coeffs):
        """Testa η = 0 quando a solução discreta é exata"""
        h = BoundaryProfile([0.0, WIDTH], [37.0, 37.0])
        system = assemble_ccbm_state(circle_mesh, constant_coeffs, h)
        u = solve_ccbm_state(system)
        p = solve_adjoint(circle_mesh, constant_coeffs, u, system)
        indicators = estimate(circle_mesh, constant_coeffs, u, p, h)
        assert indicators.eta.max() < 1e-8

    def test_indicators_frame(self, coeffs, guess_mesh, guess_state, measured_profile):
        """Testa tabela de indicadores com marcação"""
        _, state, p = guess_state
        indicators = estimate(guess_mesh, coeffs, state.u, p, measured_profile)
        marked = mark_cells(indicators.xi, 0.5)
        frame = indicators_frame(guess_mesh, indicators, marked)
        assert len(frame) == guess_mesh.n_cells
        assert frame["marked"].sum() == len(marked)
        assert np.all(frame["xi"] >= 0.0)
        assert indicators.kappa > 0.0


# Testes Unitários - Geração de Dados

class TestDataGeneration:
    """Testes de experimentos e medições sintéticas"""

    def test_builtin_experiments(self):
        """Testa parâmetros dos experimentos predefinidos"""
        experiments = builtin_experiments()
        shallow = experiments["test1_shallow_circle"]
        assert shallow.inclusions[0].center == (0.045, 0.020)
        assert shallow.inclusions[0].radius == 0.005
        assert shallow.delta == 0.01
        assert len(experiments["multi2_circles"].inclusions) == 2
        assert experiments["test3_nonconvex_b"].opt_overrides == {"c_b": 1.0}

    def test_resolve_experiment(self, small_spec_path):
        """Testa resolução por nome, prefixo e arquivo JSON"""
        assert resolve_experiment("test2").name == "test2_deep_small_circle"
        assert resolve_experiment(str(small_spec_path)).name == "small_circle"
        with pytest.raises(ConfigError):
            resolve_experiment("test3")
        with pytest.raises(ConfigError):
            resolve_experiment("nonexistent")

    def test_invalid_spec(self):
        """Testa fine_h ≥ coarse_h e inclusão fora do domínio"""
        circle = InclusionShape(kind="circle", center=EXACT_CENTER, radius=EXACT_RADIUS)
        with pytest.raises(ValidationError):
            ExperimentSpec(name="x", inclusions=[circle], fine_h=0.003, coarse_h=0.002)
        with pytest.raises(ValidationError):
            ExperimentSpec(name="x", inclusions=[InclusionShape(kind="circle", center=(0.045, 0.028),
                                                               radius=0.005)])

    def test_noise_free_measurement(self, small_spec):
        """Testa δ = 0: perfil ruidoso igual ao limpo"""
        measurement = simulate_measurement(small_spec.with_overrides(delta=0.0))
        assert np.array_equal(measurement.noisy.values, measurement.clean.values)

    def test_noise_model(self, small_spec):
        """Testa ruído δ·max|h|·z com z da semente informada"""
        measurement = simulate_measurement(small_spec.with_overrides(delta=0.01, seed=3))
        z = np.random.default_rng(3).standard_normal(len(measurement.clean.values))
        expected = 0.01 * np.abs(measurement.clean.values).max() * z
        assert np.allclose(measurement.noise, expected)
        doubled = simulate_measurement(small_spec.with_overrides(delta=0.02, seed=3))
        assert np.allclose(doubled.noise, 2.0 * measurement.noise)
        again = simulate_measurement(small_spec.with_overrides(delta=0.01, seed=3))
        assert np.array_equal(again.noisy.values, measurement.noisy.values)

    def test_shared_vertex_fraction(self):
        """Testa fração de vértices coincidentes entre malhas"""
        coarse = build_rect_mesh(WIDTH, HEIGHT, None, 0.004)
        assert shared_vertex_fraction(coarse, refine_uniform(coarse)) == 1.0
        other = build_rect_mesh(WIDTH, HEIGHT, None, 0.0017)
        assert shared_vertex_fraction(coarse, other) < 0.5


# Testes Unitários - Entrada e Saída

class TestIO:
    """Testes de persistência de malhas, perfis e resumos"""

    def test_mesh_round_trip(self, tmp_path, circle_mesh):
        """Testa gravação e leitura de malha com rótulos e interface idênticos"""
        loaded = read_mesh(write_mesh(circle_mesh, tmp_path / "mesh.txt"))
        assert np.array_equal(loaded.vertices, circle_mesh.vertices)
        assert np.array_equal(loaded.cells, circle_mesh.cells)
        assert np.array_equal(loaded.cell_region, circle_mesh.cell_region)
        assert np.array_equal(loaded.boundary_edges, circle_mesh.boundary_edges)
        assert np.array_equal(loaded.boundary_tags, circle_mesh.boundary_tags)
        assert np.array_equal(loaded.interface_edges, circle_mesh.interface_edges)
        assert len(loaded.interface_loops) == len(circle_mesh.interface_loops)
        assert loaded.target_h == circle_mesh.target_h
        assert loaded.tumor_volume == circle_mesh.tumor_volume

    def test_mesh_header_counts(self, tmp_path, circle_mesh):
        """Testa cabeçalho nv nc nb ni"""
        path = write_mesh(circle_mesh, tmp_path / "mesh.txt")
        header = path.read_text(encoding="utf-8").splitlines()[0]
        assert header.split() == [str(circle_mesh.n_vertices), str(circle_mesh.n_cells),
                                  str(len(circle_mesh.boundary_edges)),
                                  str(len(circle_mesh.interface_edges))]

    def test_mesh_tags_not_recomputed(self, tmp_path, circle_mesh):
        """Testa que rótulos fora da regra geométrica sobrevivem à leitura"""
        tags = np.array(circle_mesh.boundary_tags)
        tags[tags == int(BoundaryTag.GAMMA_W)] = int(BoundaryTag.GAMMA_B)
        relabeled = replace(circle_mesh, boundary_tags=tags)
        loaded = read_mesh(write_mesh(relabeled, tmp_path / "mesh.txt"))
        assert np.array_equal(loaded.boundary_tags, tags)
        assert len(loaded.edges_with_tag(BoundaryTag.GAMMA_W)) == 0

    def test_mesh_hand_written_file(self, tmp_path):
        """Testa leitura de um arquivo escrito à mão, sem target_h"""
        path = tmp_path / "square.txt"
        path.write_text(
            "4 2 4 0\n"
            "0 0\n1 0\n1 1\n0 1\n"
            "0 1 2 1\n0 2 3 1\n"
            "0 1 2\n1 2 1\n2 3 0\n3 0 1\n",
            encoding="utf-8",
        )
        mesh = read_mesh(path)
        assert mesh.n_cells == 2
        assert mesh.target_h == 0.0
        assert mesh.boundary_tags.tolist() == [2, 1, 0, 1]
        assert mesh.gamma_u_vertices.tolist() == [3, 2]
        assert len(mesh.interface_loops) == 0

    def test_mesh_inconsistent_interface(self, tmp_path):
        """Testa rejeição de interface que não separa regiões"""
        path = tmp_path / "square.txt"
        path.write_text(
            "4 2 4 1\n"
            "0 0\n1 0\n1 1\n0 1\n"
            "0 1 2 1\n0 2 3 1\n"
            "0 1 2\n1 2 1\n2 3 0\n3 0 1\n"
            "0 2\n",
            encoding="utf-8",
        )
        with pytest.raises(MeshError):
            read_mesh(path)

    def test_mesh_boundary_must_cover_domain(self, tmp_path):
        """Testa rejeição de fronteira incompleta"""
        path = tmp_path / "square.txt"
        path.write_text(
            "4 2 3 0\n"
            "0 0\n1 0\n1 1\n0 1\n"
            "0 1 2 1\n0 2 3 1\n"
            "0 1 2\n1 2 1\n2 3 0\n",
            encoding="utf-8",
        )
        with pytest.raises(MeshError):
            read_mesh(path)

    def test_mesh_bad_header(self, tmp_path):
        """Testa cabeçalho de malha inválido"""
        path = tmp_path / "bad.txt"
        path.write_text("not a mesh\n", encoding="utf-8")
        with pytest.raises(MeshError):
            read_mesh(path)

    def test_profile_csv(self, tmp_path, measured_profile):
        """Testa perfil em CSV sem perda de precisão"""
        loaded = read_profile(write_profile(measured_profile, tmp_path / "profile.csv"))
        assert np.array_equal(loaded.arc, measured_profile.arc)
        assert np.array_equal(loaded.values, measured_profile.values)
        header = (tmp_path / "profile.csv").read_text(encoding="utf-8").splitlines()[0]
        assert header == "arc_position_m,temperature_C"

    def test_json_sorted_and_numpy_aware(self, tmp_path):
        """Testa JSON com chaves ordenadas e tipos numpy"""
        path = write_json({"b": np.float64(1.5), "a": np.arange(3), "c": TerminationReason.K_MAX},
                          tmp_path / "summary.json")
        assert read_json(path) == {"a": [0, 1, 2], "b": 1.5, "c": "K_max"}
        text = path.read_text(encoding="utf-8")
        assert text.index('"a"') < text.index('"b"')

    def test_vtk_complex_fields(self, tmp_path, circle_mesh, coeffs, measured_profile):
        """Testa VTK com campos complexos separados"""
        u = solve_ccbm_state(assemble_ccbm_state(circle_mesh, coeffs, measured_profile))
        path = write_vtk(circle_mesh, tmp_path / "field.vtk", {"u": u})
        loaded = meshio.read(path)
        assert np.allclose(loaded.point_data["u_re"], u.real)
        assert np.allclose(loaded.point_data["u_im"], u.imag)


# Testes Unitários - Monitoramento

class TestMonitoring:
    """Testes das métricas Prometheus"""

    def test_solve_counters(self, tmp_path, coeffs, guess_mesh, measured_profile):
        """Testa contagem de solves por tipo e exportação"""
        collector = reset_collector()
        problem = CCBMProblem(coeffs, measured_profile)
        state = problem.solve(guess_mesh)
        problem.adjoint(state)
        assert collector.solve_count("state") == 1.0
        assert collector.solve_count("adjoint") == 1.0
        path = tmp_path / "metrics.prom"
        collector.write_textfile(path)
        assert "thermoshape_linear_solves_total" in path.read_text(encoding="utf-8")


# Testes de Integração - CLI e Executor

class TestCLI:
    """Testes da linha de comando e do executor de experimentos"""

    def test_list_option_outside_sweep(self, tmp_path, capsys):
        """Testa lista em comando que não é sweep: código 2"""
        code = cli_main(["forward", "--spec", "test1", "--out", str(tmp_path), "--r0", "0.004,0.005"])
        assert code == 2
        assert "error=config" in capsys.readouterr().err

    def test_unknown_option(self, tmp_path):
        """Testa opção desconhecida: código 2"""
        assert cli_main(["forward", "--spec", "test1", "--out", str(tmp_path), "--bogus", "1"]) == 2

    def test_unknown_experiment(self, tmp_path, capsys):
        """Testa experimento inexistente: código 2"""
        assert cli_main(["forward", "--spec", "nonexistent", "--out", str(tmp_path)]) == 2
        assert "error=config" in capsys.readouterr().err

    def test_forward_is_deterministic(self, tmp_path, small_spec_path):
        """Testa artefatos idênticos em execuções repetidas e no replay"""
        first, second, replayed = tmp_path / "a", tmp_path / "b", tmp_path / "c"
        assert cli_main(["forward", "--spec", str(small_spec_path), "--out", str(first)]) == 0
        assert cli_main(["forward", "--spec", str(small_spec_path), "--out", str(second)]) == 0
        for name in ("measurement.csv", "run_manifest.json"):
            assert (first / name).read_bytes() == (second / name).read_bytes()
        assert cli_main(["replay", str(first / "run_manifest.json"), "--out", str(replayed)]) == 0
        assert (first / "measurement.csv").read_bytes() == (replayed / "measurement.csv").read_bytes()

    def test_estimate_command(self, tmp_path, small_spec_path):
        """Testa comando estimate e seus artefatos"""
        config = RunConfig(command="estimate", spec=str(small_spec_path), output_dir=tmp_path, fraction=0.3)
        result = run(config)
        assert result.status == TaskStatus.COMPLETED
        assert {"indicators.csv", "marked_cells.csv", "indicators_summary.json"} <= set(result.artifacts)
        frame = pd.read_csv(tmp_path / "indicators.csv")
        assert frame["marked"].sum() == result.result["n_marked"] > 0

    def test_reconstruct_command(self, tmp_path, small_spec_path):
        """Testa comando reconstruct com poucas iterações"""
        code = cli_main(["reconstruct", "--spec", str(small_spec_path), "--out", str(tmp_path),
                         "--kmax", "2", "--metrics"])
        assert code == 0
        for name in ("history.csv", "final_mesh.txt", "selected_mesh.txt", "final.vtk", "summary.json", "metrics.prom"):
            assert (tmp_path / name).exists()
        summary = json.loads((tmp_path / "summary.json").read_text(encoding="utf-8"))
        assert summary["termination"] in {"stagnation", "t_min", "K_max"}
        assert 0.0 <= summary["shared_vertex_fraction"] <= 1.0
        assert (tmp_path / "history.csv").read_text(encoding="utf-8").splitlines()[0].startswith(
            "iter,J,J_LS,vol,rho,t,initial_t,grad_norm")

    def test_noise_seed_drives_measurement(self, tmp_path, small_spec):
        """Testa que noise_seed define o ruído da medição reconstruída e o manifesto"""
        spec = small_spec.with_overrides(delta=0.01, opt_overrides={"noise_seed": 5, "K_max": 1})
        config = RunConfig(command="reconstruct", spec="small_circle", output_dir=tmp_path)
        result = run(config, experiment=spec)
        assert result.status == TaskStatus.COMPLETED
        manifest = read_json(tmp_path / "run_manifest.json")
        assert manifest["seeds"]["noise"] == 5
        assert manifest["opt_config"]["noise_seed"] == 5
        loaded = read_profile(tmp_path / "measurement.csv")
        expected = simulate_measurement(spec.with_overrides(seed=5)).noisy
        assert np.array_equal(loaded.values, expected.values)
        assert not np.array_equal(loaded.values, simulate_measurement(spec).noisy.values)

    def test_seed_option_sets_noise_seed(self, tmp_path):
        """Testa --seed refletido em noise_seed"""
        config = RunConfig(command="reconstruct", spec="test1", output_dir=tmp_path, seed=7)
        assert config.opt_overrides()["noise_seed"] == 7


# Testes de Aceitação

@pytest.mark.acceptance
class TestAcceptance:
    """Reproduções numéricas mais longas"""

    def test_ccbm_consistency_exact_inclusion(self):
        """Testa ‖uⁱ‖/‖uʳ‖ ≤ 0,05 com inclusão exata e dados sem ruído, decrescente sob refinamento"""
        spec = builtin_experiments()["test1_shallow_circle"].with_overrides(delta=0.0)
        h = simulate_measurement(spec).noisy
        mesh = build_rect_mesh(spec.width, spec.height, spec.exact_polygons(), spec.coarse_h)
        ratios = []
        for _ in range(2):
            u = solve_ccbm_state(assemble_ccbm_state(mesh, spec.coeffs, h))
            ratios.append(l2_norm(mesh, u.imag) / l2_norm(mesh, u.real))
            mesh = refine_uniform(mesh)
        assert ratios[0] <= 0.05
        assert ratios[1] < ratios[0]

    def test_gradient_random_fields(self, coeffs, guess_mesh, guess_state):
        """Testa dJ[θ] contra diferenças centrais e progressivas em 5 campos aleatórios"""
        problem, state, p = guess_state
        gradient = shape_gradient(guess_mesh, coeffs, state.u, p)
        J0 = problem.objective(state, 0.0).J

        def J(theta, t):
            return problem.objective(problem.solve(deform(guess_mesh, theta, t)), 0.0).J

        rng = np.random.default_rng(11)
        steps = np.array([1e-4, 5e-5, 2.5e-5])
        for _ in range(5):
            center = np.array(GUESS_CENTER) + rng.uniform(-0.002, 0.002, size=2)
            angle = rng.uniform(0.0, 2.0 * math.pi)
            bump = bump_field(center, rng.uniform(0.006, 0.008), (math.cos(angle), math.sin(angle)))
            theta = DeformationField.from_function(guess_mesh, bump)
            dJ = gradient(theta)
            t = 1e-6
            assert dJ == pytest.approx((J(theta, t) - J(theta, -t)) / (2 * t), rel=1e-3)
            errors = [abs((J(theta, s) - J0) / s - dJ) for s in steps]
            slope = np.polyfit(np.log(steps), np.log(errors), 1)[0]
            assert slope == pytest.approx(1.0, abs=0.2)

    def test_material_derivative_fd_order(self, coeffs, guess_mesh, measured_profile, bump_theta):
        """Testa erro do oráculo decrescente com ordem ≥ 0,9 em t ∈ {1e-4, 1e-5, 1e-6}"""
        entries = fd_oracle(guess_mesh, coeffs, measured_profile, bump_theta, t_list=(1e-4, 1e-5, 1e-6))
        errors = [e.error for e in entries]
        assert errors[0] > errors[1] > errors[2]
        assert fd_order(entries) >= 0.9

    def test_mesh_sensitivity_dichotomy(self, coeffs, measured_profile):
        """Testa ‖∇u̇_h‖ estável (≤ 3×) para campo suave e crescente para campo rugoso"""
        mesh = build_rect_mesh(WIDTH, HEIGHT, circle_polygon(EXACT_CENTER, EXACT_RADIUS, 32), 0.004)
        meshes = [mesh, refine_uniform(mesh)]
        meshes.append(refine_uniform(meshes[-1]))
        reports = stability_sweep(meshes, coeffs, measured_profile, bump_field(EXACT_CENTER, 0.008),
                                  seed=3, t_list=())
        assert grad_norm_spread(reports, "smooth") <= 3.0
        rough = [r.grad_norm for r in reports if r.field_kind == "rough"]
        assert rough[0] < rough[1] < rough[2]

    def test_shallow_circle_reconstruction(self):
        """Testa Hausdorff ≤ 0,5·r e decréscimo estrito do funcional penalizado (δ = 1%, r₀ = 0,005)"""
        spec = builtin_experiments()["test1_shallow_circle"].with_overrides(delta=0.01)
        h = simulate_measurement(spec).noisy
        guess = init_guess_from_profile(h, spec.depth, 0.005, top=spec.height)
        mesh0 = build_rect_mesh(spec.width, spec.height, guess, spec.coarse_h)
        trace = reconstruct(mesh0, spec.coeffs, h, OptConfig(K_max=60))
        assert trace.termination != TerminationReason.ERROR
        for entry in trace.entries[1:]:
            assert entry.value_after < entry.value_before
        assert trace.summary(spec.exact_polygons())["hausdorff"] <= 0.5 * 0.005

    def test_true_radius_has_lowest_final_cost(self, tmp_path):
        """Testa que r₀ = 0,005 atinge o menor custo final entre {0,004; 0,005; 0,006}"""
        config = RunConfig(command="sweep", spec="test1", output_dir=tmp_path,
                           r0="0.004,0.005,0.006", delta="0.01", kmax=60)
        result = run(config)
        assert result.status == TaskStatus.COMPLETED
        table = pd.read_csv(tmp_path / "sweep.csv")
        assert len(table) == 3
        assert table.loc[table["final_J"].idxmin(), "r0"] == pytest.approx(0.005)
        assert result.result["best"]["r0"] == pytest.approx(0.005)

    def test_balancing_principle(self):
        """Testa (β - 1)J - ρ|Ω₀| = 0 a cada atualização e Hausdorff balanceado ≤ não penalizado"""
        spec = builtin_experiments()["test2_deep_small_circle"]
        h = simulate_measurement(spec).noisy
        exact = spec.exact_polygons()
        beta = 2.0
        for r0 in (0.0025, 0.003):
            guess = init_guess_from_profile(h, spec.depth, r0, top=spec.height)
            mesh0 = build_rect_mesh(spec.width, spec.height, guess, spec.coarse_h)
            balanced = reconstruct(mesh0, spec.coeffs, h,
                                   OptConfig(K_max=60, rho_mode=RhoMode.BALANCING, beta=beta))
            first = balanced.entries[0].report
            assert (beta - 1.0) * first.J - first.rho * first.vol == pytest.approx(0.0, abs=1e-12 * first.J)
            for previous, entry in zip(balanced.entries, balanced.entries[1:]):
                source = previous.report
                residual = (beta - 1.0) * source.J - entry.report.rho * source.vol
                assert residual == pytest.approx(0.0, abs=1e-12 * source.J)
            plain = reconstruct(mesh0, spec.coeffs, h, OptConfig(K_max=60, rho=0.0))
            assert balanced.summary(exact)["hausdorff"] <= plain.summary(exact)["hausdorff"]

    def test_estimator_rates_and_ranking(self, coeffs, measured_profile, guess_mesh):
        """Testa taxas O(h) de η e μ, identidade de κ e correlação de postos com o erro verdadeiro"""
        problem = CCBMProblem(coeffs, measured_profile)
        meshes = [guess_mesh, refine_uniform(guess_mesh)]
        meshes.append(refine_uniform(meshes[-1]))
        states = [problem.solve(mesh) for mesh in meshes]
        sets = [estimate(mesh, coeffs, state.u, problem.adjoint(state), measured_profile)
                for mesh, state in zip(meshes, states)]

        sizes = np.array([mesh.h_K.max() for mesh in meshes])
        for name in ("eta_global", "mu_global"):
            values = np.array([getattr(s, name) for s in sets])
            assert np.all(np.diff(values) < 0)
            rate = np.polyfit(np.log(sizes), np.log(values), 1)[0]
            assert 0.7 <= rate <= 1.3

        for s in sets:
            assert s.kappa * s.mu.max() == pytest.approx(s.eta.max() / s.kappa, rel=1e-12)
            assert np.allclose(s.xi ** 2, 0.5 * s.kappa * s.eta ** 2 + 0.5 / s.kappa * s.mu ** 2,
                               rtol=1e-12, atol=0.0)

        coarse, middle, fine = meshes
        lifted = prolongate(middle, prolongate(coarse, states[0].u.values))
        grads = cell_gradients(fine, states[2].u.values - lifted)
        local = fine.cell_areas * np.sum(np.abs(grads) ** 2, axis=1)
        true_error = np.sqrt(local.reshape(coarse.n_cells, 16).sum(axis=1))
        rank = pd.Series(sets[0].eta).corr(pd.Series(true_error), method="spearman")
        assert rank >= 0.5


# Configuração de pytest

def pytest_configure(config):
    """Configuração do pytest"""
    import warnings
    warnings.filterwarnings("ignore", category=DeprecationWarning)
    config.addinivalue_line("markers", "acceptance: reproduções longas e sensíveis a tolerância")
