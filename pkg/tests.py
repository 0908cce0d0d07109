"""
Tests for otlab
Suite de pruebas para validar geometría, solvers, campos, cantidades locales y experimentos
"""

import unittest
import pandas as pd
import numpy as np
import os
import sys
import tempfile
import json
from unittest.mock import Mock, patch

# Añadir el directorio raíz al path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import Config
from geometry.torus import (TorusDomain, wrap, periodic_displacement, periodic_dist2, in_ball, ball_volume,
                            cost_matrix)
from measures.measures import (DiscreteMeasure, sample_poisson, lebesgue_grid, discretization_bound, restrict,
                               measure_from_atoms, density_family)
from transport.solvers import (solve_exact, solve_entropic, brute_force_oracle, linear_program_oracle,
                               check_monotonicity, plan_from_arrays, ball_cells, disk_rectangle_overlap,
                               local_wasserstein, SolveReport)
from fields.field_solvers import (ScalarField, solve_periodic_poisson, heat_smooth, eval_gradient,
                                  mollifier_average, solve_disk_neumann, disk_derivatives_at_origin,
                                  fourier_from_samples)
from eulerian.eulerian_local import (PairCloud, trajectory, density_pairing, flux_pairing, local_energy_E,
                                     local_data_terms, linf_check, boundary_flux, flux_balance)
from harmonic.harmonic_approx import (default_candidates, select_good_radius, harmonic_residual,
                                      orthogonality_terms, pareto_curve, candidate_flux_energies)
from regularity.map_regularity import (affine_map, harmonic_test_map, sample_map, check_coverage, map_excess,
                                       tracefree_exponential, one_step, campanato_decay, AffineFrame)
from matching.matching_campanato import (MatchingRecord, run_matching, residual_vs_gradient,
                                         averaged_displacement, shift_h, dyadic_radii, empirical_rstar,
                                         campanato_cascade, linf_microscopic, field_resolution)
from experiments import experiment_runner
from experiments.experiment_runner import ExperimentConfig, ExperimentRunner, load_config, run, fit_prefactor
from utils import (InvalidInputError, ResourceLimitError, DomainError, SamplingError, ResolutionError,
                   ConfigError, content_hash, canonical_json, convert_numpy, atomic_write_text, bootstrap_ci,
                   setup_logging, safe_divide)

def _uniform_measure(points, dom, mass=1.0):
    points = np.asarray(points, dtype=float)
    return DiscreteMeasure(points, np.full(points.shape[0], mass), dom)

class TestTorusGeometry(unittest.TestCase):
    """Tests para la geometría del toro"""

    def setUp(self):
        self.dom = TorusDomain(10.0, 2)

    def test_wrap_to_fundamental_domain(self):
        """Test de reducción a [-L/2, L/2)"""
        wrapped = wrap([[5.0, -5.0], [12.5, -7.5]], self.dom)
        np.testing.assert_allclose(wrapped, [[-5.0, -5.0], [2.5, 2.5]])
        self.assertTrue(self.dom.contains(wrapped))

    def test_wrap_examples(self):
        """Test de reducción en una y dos dimensiones"""
        line = TorusDomain(10.0, 1)
        np.testing.assert_allclose(wrap([12.3], line), [2.3])
        np.testing.assert_allclose(wrap([-2.1, 3.0], TorusDomain(4.0, 2)), [1.9, -1.0])
        once = wrap([[17.25, -33.5]], self.dom)
        np.testing.assert_array_equal(wrap(once, self.dom), once)

    def test_periodic_displacement_minimal(self):
        """Test del representante mínimo del desplazamiento"""
        disp = periodic_displacement([4.5, 0.0], [-4.5, 0.0], self.dom)
        np.testing.assert_allclose(disp, [1.0, 0.0])
        self.assertAlmostEqual(periodic_dist2([4.5, 0.0], [-4.5, 0.0], self.dom), 1.0)
        line = TorusDomain(10.0, 1)
        np.testing.assert_allclose(periodic_displacement([4.8], [-4.8], line), [0.4])
        self.assertAlmostEqual(periodic_dist2([4.8], [-4.8], line), 0.16)
        self.assertAlmostEqual(periodic_dist2([1.0, 1.0], [-1.0, -1.0], TorusDomain(4.0, 2)), 8.0)

    def test_invalid_domain(self):
        """Test de dominio inválido"""
        with self.assertRaises(InvalidInputError):
            TorusDomain(0.0, 2)
        with self.assertRaises(InvalidInputError):
            wrap([[np.nan, 0.0]], self.dom)

    def test_in_ball_is_strict(self):
        """Test de la bola abierta con distancia periódica"""
        mask = in_ball(np.array([[1.0, 0.0], [4.9, 0.0], [-4.9, 0.0]]), [4.9, 0.0], 1.0, self.dom)
        self.assertEqual(mask.tolist(), [False, True, True])

    def test_cost_matrix_blocks(self):
        """Test de la matriz de costes por bloques"""
        rng = np.random.default_rng(3)
        x = rng.uniform(-5, 5, size=(7, 2))
        y = rng.uniform(-5, 5, size=(5, 2))
        full = cost_matrix(x, y, self.dom, 'periodic')
        blocked = cost_matrix(x, y, self.dom, 'periodic', block_rows=2)
        np.testing.assert_array_equal(full, blocked)
        self.assertAlmostEqual(ball_volume(2.0, 2), 4.0 * np.pi)

class TestMeasures(unittest.TestCase):
    """Tests para medidas discretas y muestreo"""

    def setUp(self):
        self.dom = TorusDomain(8.0, 2)

    def test_poisson_determinism(self):
        """Test de reproducibilidad de la muestra de Poisson"""
        first = sample_poisson(self.dom, 1.0, 42)
        second = sample_poisson(self.dom, 1.0, 42)
        np.testing.assert_array_equal(first.points, second.points)
        self.assertEqual(first.metadata['rng_algorithm'], Config.SAMPLING_CONFIG['rng_algorithm'])
        self.assertTrue(self.dom.contains(first.points))

    def test_poisson_empty_rejection_cap(self):
        """Test del límite de remuestreos vacíos"""
        with self.assertRaises(ResourceLimitError):
            sample_poisson(TorusDomain(1.0, 2), 1e-9, 0, reject_empty=True)

    def test_lebesgue_grid(self):
        """Test de la Lebesgue discretizada"""
        grid = lebesgue_grid(self.dom, 16, 64.0)
        self.assertEqual(len(grid), 256)
        self.assertAlmostEqual(grid.total_mass, 64.0)
        self.assertAlmostEqual(discretization_bound(self.dom, 16), 2 * 0.25 / 4.0)

    def test_small_grids(self):
        """Test de los centros de celda en mallas pequeñas"""
        dom = TorusDomain(4.0, 2)
        grid = lebesgue_grid(dom, 2, 16.0)
        np.testing.assert_allclose(np.abs(grid.points), 1.0)
        np.testing.assert_allclose(grid.masses, 4.0)
        single = lebesgue_grid(dom, 1, 16.0)
        np.testing.assert_allclose(single.points, [[0.0, 0.0]])
        self.assertAlmostEqual(single.total_mass, 16.0)

    def test_restrict(self):
        """Test de restricción a una bola"""
        grid = lebesgue_grid(self.dom, 16, 64.0)
        restricted = restrict(grid, [0.0, 0.0], 1.0)
        self.assertTrue(np.all(np.sum(restricted.points ** 2, axis=1) < 1.0))
        with self.assertRaises(InvalidInputError):
            restrict(grid, [0.0, 0.0], 4.0)
        nine = lebesgue_grid(TorusDomain(6.0, 2), 3, 36.0)
        center_only = restrict(nine, [0.0, 0.0], 1.5)
        np.testing.assert_allclose(center_only.points, [[0.0, 0.0]])

    def test_invalid_masses(self):
        """Test de masas no positivas"""
        with self.assertRaises(InvalidInputError):
            DiscreteMeasure(np.zeros((2, 2)), np.array([1.0, -1.0]), self.dom)

    def test_binary_format(self):
        """Test del formato OTM1"""
        mu = measure_from_atoms([[0.5, -1.0, 2.0], [3.0, 1.0, 0.5]], self.dom)
        payload = mu.to_bytes()
        self.assertEqual(payload[:4], b'OTM1')
        restored = DiscreteMeasure.from_bytes(payload)
        np.testing.assert_array_equal(restored.points, mu.points)
        np.testing.assert_array_equal(restored.masses, mu.masses)

    def test_density_family(self):
        """Test de la familia 1 + δ sin(2πx₁/L)"""
        flat = density_family(self.dom, 16, 0.0)
        np.testing.assert_allclose(flat.points, lebesgue_grid(self.dom, 16, 64.0).points)
        bumped = density_family(self.dom, 16, 0.05)
        self.assertAlmostEqual(bumped.total_mass, 64.0)
        column = bumped.points[::16, 0]
        self.assertTrue(np.all(np.diff(column) > 0))

class TestTransportSolvers(unittest.TestCase):
    """Tests para los solvers de transporte"""

    def setUp(self):
        self.dom = TorusDomain(4.0, 2)

    def test_two_atom_periodic(self):
        """Test del ejemplo periódico de dos átomos"""
        src = _uniform_measure([[1.5, 0.0], [0.0, 0.0]], self.dom)
        tgt = _uniform_measure([[-2.0, 0.0], [0.5, 0.0]], self.dom)
        plan, report = solve_exact(src, tgt, 'periodic')
        self.assertAlmostEqual(plan.total_cost, 0.5, places=12)
        self.assertTrue(report.certificate_ok)
        self.assertAlmostEqual(brute_force_oracle(src, tgt, 'periodic').total_cost, 0.5, places=12)

    def test_crossed_line_matching(self):
        """Test: en la recta periódica de lado 4 el emparejamiento cruzado cuesta 0.5"""
        line = TorusDomain(4.0, 1)
        src = _uniform_measure([[0.0], [1.0]], line)
        tgt = _uniform_measure([[0.5], [3.5]], line)
        plan, _ = solve_exact(src, tgt, 'periodic')
        self.assertAlmostEqual(plan.total_cost, 0.5, places=12)
        self.assertEqual(sorted(zip(plan.source_index.tolist(), plan.target_index.tolist())), [(0, 1), (1, 0)])
        entropic, report = solve_entropic(src, tgt, 'periodic', [1.0, 0.1, 0.01, 0.001], marginal_tol=1e-6)
        self.assertGreaterEqual(entropic.total_cost, 0.5 - 1e-5)
        self.assertLessEqual(entropic.total_cost, 0.52)

    def test_entropic_identical_measures(self):
        """Test: medidas idénticas dan coste acotado por el sesgo entrópico"""
        rng = np.random.default_rng(9)
        points = rng.uniform(-2, 2, size=(6, 2))
        plan, _ = solve_entropic(_uniform_measure(points, self.dom), _uniform_measure(points, self.dom), 'periodic',
                                 [1.0, 0.1, 0.01], marginal_tol=1e-6)
        self.assertLessEqual(plan.total_cost, 0.01 * np.log(6) * 6.0 + 1e-9)

    def test_exact_matches_brute_force(self):
        """Test de equivalencia con el oráculo exhaustivo en 200 instancias con n <= 7"""
        rng = np.random.default_rng(11)
        for _ in range(200):
            n = int(rng.integers(2, 8))
            src = _uniform_measure(rng.uniform(-2, 2, size=(n, 2)), self.dom)
            tgt = _uniform_measure(rng.uniform(-2, 2, size=(n, 2)), self.dom)
            plan, _ = solve_exact(src, tgt, 'periodic')
            oracle = brute_force_oracle(src, tgt, 'periodic')
            self.assertLessEqual(abs(plan.total_cost - oracle.total_cost), 1e-9 * (1.0 + oracle.total_cost))

    def test_mass_scaling(self):
        """Test: multiplicar las masas por s multiplica el coste por s y conserva el soporte"""
        rng = np.random.default_rng(4)
        x = rng.uniform(-2, 2, size=(6, 2))
        y = rng.uniform(-2, 2, size=(6, 2))
        masses = rng.uniform(0.5, 2.0, size=6)
        masses_y = rng.permutation(masses)
        base, _ = solve_exact(DiscreteMeasure(x, masses, self.dom), DiscreteMeasure(y, masses_y, self.dom), 'periodic')
        for s in (0.25, 4.0):
            scaled, _ = solve_exact(DiscreteMeasure(x, s * masses, self.dom),
                                    DiscreteMeasure(y, s * masses_y, self.dom), 'periodic')
            self.assertAlmostEqual(scaled.total_cost, s * base.total_cost, delta=1e-9 * (1.0 + s * base.total_cost))
            self.assertEqual(set(zip(scaled.source_index.tolist(), scaled.target_index.tolist())),
                             set(zip(base.source_index.tolist(), base.target_index.tolist())))

    def test_linear_program_oracle(self):
        """Test del oráculo lineal con masas arbitrarias"""
        src = measure_from_atoms([[0.0, 0.0, 0.5], [1.0, 1.0, 1.5]], self.dom)
        tgt = measure_from_atoms([[0.5, 0.0, 1.0], [-1.0, 1.0, 0.25], [1.5, -1.0, 0.75]], self.dom)
        plan, _ = solve_exact(src, tgt, 'periodic')
        oracle = linear_program_oracle(src, tgt, 'periodic')
        self.assertAlmostEqual(plan.total_cost, oracle.total_cost, places=9)
        self.assertLess(plan.marginal_error(), 1e-9)

    def test_unequal_mass_rejected(self):
        """Test de masas totales distintas"""
        src = _uniform_measure([[0.0, 0.0]], self.dom)
        tgt = _uniform_measure([[1.0, 0.0]], self.dom, mass=2.0)
        with self.assertRaises(InvalidInputError):
            solve_exact(src, tgt)

    def test_crossed_plan_violation(self):
        """Test de monotonicidad sobre un plan cruzado"""
        plan = plan_from_arrays([[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [0.0, 0.0]], [1.0, 1.0],
                                TorusDomain(10.0, 2), cost='euclidean')
        report = check_monotonicity(plan)
        self.assertEqual(report.violations, 1)
        self.assertAlmostEqual(report.worst_inner, -1.0)

    def test_exact_plan_is_monotone(self):
        """Test de soporte monótono del plan óptimo euclídeo"""
        rng = np.random.default_rng(5)
        dom = TorusDomain(100.0, 2)
        src = _uniform_measure(rng.uniform(-5, 5, size=(30, 2)), dom)
        tgt = _uniform_measure(rng.uniform(-5, 5, size=(30, 2)), dom)
        plan, _ = solve_exact(src, tgt, 'euclidean')
        self.assertEqual(check_monotonicity(plan).violations, 0)

    def test_shift_gauge_keeps_permutation(self):
        """Test: trasladar el objetivo no cambia el emparejamiento euclídeo"""
        rng = np.random.default_rng(8)
        dom = TorusDomain(100.0, 2)
        x = rng.uniform(-5, 5, size=(6, 2))
        y = rng.uniform(-5, 5, size=(6, 2))
        plan, _ = solve_exact(_uniform_measure(x, dom), _uniform_measure(y, dom), 'euclidean')
        shifted, _ = solve_exact(_uniform_measure(x, dom), _uniform_measure(y + [3.0, -2.0], dom), 'euclidean')
        self.assertEqual(plan.target_index[np.argsort(plan.source_index)].tolist(),
                         shifted.target_index[np.argsort(shifted.source_index)].tolist())

    def test_entropic_close_to_exact(self):
        """Test de Sinkhorn frente al plan exacto"""
        rng = np.random.default_rng(2)
        src = _uniform_measure(rng.uniform(-2, 2, size=(5, 2)), self.dom)
        tgt = _uniform_measure(rng.uniform(-2, 2, size=(5, 2)), self.dom)
        exact, _ = solve_exact(src, tgt)
        plan, report = solve_entropic(src, tgt, 'periodic', [1.0, 0.5, 0.25, 0.1], marginal_tol=1e-6)
        self.assertLessEqual(report.marginal_error, 1e-6)
        self.assertGreaterEqual(plan.total_cost, exact.total_cost - 1e-4)
        self.assertLessEqual(plan.total_cost, exact.total_cost + 2.0 * report.entropic_bias + 1e-6)

    def test_ball_cells_area(self):
        """Test de las celdas intersecadas con el disco"""
        _, areas = ball_cells(1.5, 16)
        self.assertAlmostEqual(areas.sum(), np.pi * 1.5 ** 2, places=10)
        self.assertAlmostEqual(disk_rectangle_overlap(-2, 2, -2, 2, 1.0), np.pi, places=12)

    def test_local_wasserstein_single_atom(self):
        """Test: un átomo central frente a la bola uniforme da W² ≈ πR⁴/2"""
        dom = TorusDomain(16.0, 2)
        radius = 2.0
        mu = measure_from_atoms([[0.0, 0.0, np.pi * radius ** 2]], dom)
        w, kappa = local_wasserstein(mu, [0.0, 0.0], radius, 32)
        self.assertAlmostEqual(w ** 2, np.pi * radius ** 4 / 2.0, delta=1e-2 * np.pi * radius ** 4 / 2.0)
        self.assertAlmostEqual(kappa, 1.0)

    def test_local_wasserstein_unit_ball(self):
        """Test: en R = 1 con m_local = 64 el átomo central da π/2 al 2%"""
        mu = measure_from_atoms([[0.0, 0.0, np.pi]], TorusDomain(16.0, 2))
        w, _ = local_wasserstein(mu, [0.0, 0.0], 1.0, 64)
        self.assertAlmostEqual(w ** 2, np.pi / 2.0, delta=0.02 * np.pi / 2.0)

    def test_local_wasserstein_empty(self):
        """Test de restricción vacía"""
        mu = measure_from_atoms([[5.0, 5.0, 1.0]], TorusDomain(16.0, 2))
        with self.assertRaises(DomainError):
            local_wasserstein(mu, [0.0, 0.0], 1.0, 8)

class TestFieldSolvers(unittest.TestCase):
    """Tests para Poisson periódico, molificador y Neumann en disco"""

    def setUp(self):
        self.dom = TorusDomain(2.0 * np.pi, 2)
        self.m = 64
        h = self.dom.side_length / self.m
        axis = -self.dom.half + (np.arange(self.m) + 0.5) * h
        self.X, self.Y = np.meshgrid(axis, axis, indexing='ij')

    def test_single_mode_poisson(self):
        """Test de la solución analítica de un modo"""
        rhs = np.cos(self.X) * np.cos(2.0 * self.Y)
        phi = solve_periodic_poisson(rhs, domain=self.dom)
        np.testing.assert_allclose(phi.values, -rhs / 5.0, atol=1e-10)
        self.assertLess(phi.metadata['residual'], 1e-10)

    def test_poisson_validation(self):
        """Test de media no nula y resolución no potencia de dos"""
        with self.assertRaises(InvalidInputError):
            solve_periodic_poisson(np.ones((8, 8)), domain=self.dom)
        with self.assertRaises(InvalidInputError):
            solve_periodic_poisson(np.zeros((6, 6)), domain=self.dom)

    def test_eval_gradient(self):
        """Test del gradiente interpolado fuera de los nodos"""
        phi = ScalarField(np.sin(self.X), self.dom)
        points = np.array([[0.3, -1.1], [2.0, 0.7]])
        grads = eval_gradient(phi, points)
        np.testing.assert_allclose(grads[:, 0], np.cos(points[:, 0]), atol=1e-5)
        np.testing.assert_allclose(grads[:, 1], 0.0, atol=1e-10)

    def test_green_function_energy(self):
        """Test: la energía de δ₀ - 1/L² coincide con la suma directa de la función de Green de la malla"""
        dom = TorusDomain(8.0, 2)
        m = 64
        h = dom.side_length / m
        rhs = np.full((m, m), -1.0 / dom.volume)
        rhs[m // 2, m // 2] += 1.0 / h ** 2
        phi = solve_periodic_poisson(rhs, domain=dom)
        energy = -float(np.sum(phi.values * rhs)) * h ** 2

        step = 2.0 * np.pi / dom.side_length
        oracle = 0.0
        for k1 in range(-m // 2, m // 2):
            for k2 in range(-m // 2, m // 2):
                if k1 or k2:
                    oracle += 1.0 / (step ** 2 * (k1 * k1 + k2 * k2))
        oracle /= dom.volume
        self.assertAlmostEqual(energy, oracle, delta=1e-6 * oracle)

    def test_gradient_central_difference(self):
        """Test: gradiente interpolado frente a diferencias centradas con h = L/m en 100 puntos"""
        rng = np.random.default_rng(21)
        modes = [(k1, k2) for k1 in range(-3, 4) for k2 in range(0, 4) if k2 > 0 or k1 > 0]
        amplitudes = rng.normal(size=(len(modes), 2))

        def field(x, y):
            total = np.zeros_like(np.asarray(x, dtype=float))
            for (k1, k2), (c, d) in zip(modes, amplitudes):
                total = total + c * np.cos(k1 * x + k2 * y) + d * np.sin(k1 * x + k2 * y)
            return total

        phi = ScalarField(field(self.X, self.Y), self.dom)
        points = rng.uniform(-np.pi, np.pi, size=(100, 2))
        h = self.dom.side_length / self.m
        px, py = points[:, 0], points[:, 1]
        central = np.column_stack([(field(px + h, py) - field(px - h, py)) / (2.0 * h),
                                   (field(px, py + h) - field(px, py - h)) / (2.0 * h)])
        bound = h ** 2 * sum((abs(c) + abs(d)) * (abs(k1) + abs(k2)) ** 3
                             for (k1, k2), (c, d) in zip(modes, amplitudes))
        self.assertLessEqual(float(np.max(np.abs(eval_gradient(phi, points) - central))), bound)

    def test_mollifier_single_mode_damping(self):
        """Test: la media molificada de ∇ sin(kx₁) es k·η̂(kR), con η̂ por cuadratura radial"""
        from scipy import integrate
        from scipy.special import j0

        dom = TorusDomain(8.0, 2)
        m = 256
        h = dom.side_length / m
        axis = -dom.half + (np.arange(m) + 0.5) * h
        X, _ = np.meshgrid(axis, axis, indexing='ij')
        k = 2.0 * np.pi * 2 / dom.side_length
        radius = 1.5
        result = mollifier_average(ScalarField(np.sin(k * X), dom), [0.0, 0.0], radius)

        def eta(r):
            return np.exp(-1.0 / (1.0 - r * r))

        numerator, _ = integrate.quad(lambda r: eta(r) * j0(k * radius * r) * r, 0.0, 1.0, epsabs=1e-14)
        denominator, _ = integrate.quad(lambda r: eta(r) * r, 0.0, 1.0, epsabs=1e-14)
        np.testing.assert_allclose(result.value, [k * numerator / denominator, 0.0], atol=1e-4)

    def test_heat_smooth(self):
        """Test del suavizado por calor de un modo"""
        phi = ScalarField(np.sin(self.X), self.dom)
        self.assertIs(heat_smooth(phi, 0.0), phi)
        smoothed = heat_smooth(phi, 0.5)
        np.testing.assert_allclose(smoothed.values, np.exp(-0.5) * np.sin(self.X), atol=1e-12)
        with self.assertRaises(InvalidInputError):
            heat_smooth(phi, -1.0)

    def test_mollifier_linear_field(self):
        """Test: la media molificada de un gradiente constante es la constante"""
        phi = ScalarField(np.zeros((self.m, self.m)), self.dom, linear_part=[0.3, -0.2])
        result = mollifier_average(phi, [0.1, 0.2], 1.0)
        np.testing.assert_allclose(result.value, [0.3, -0.2], atol=1e-12)
        with self.assertRaises(ResolutionError):
            mollifier_average(phi, [0.0, 0.0], 0.1)

    def test_disk_neumann_cos2(self):
        """Test: flujo cos 2θ en R = 3.5 da Hessiano diag(1, -1)/3.5"""
        theta = 2.0 * np.pi * (np.arange(256) + 0.5) / 256
        phi = solve_disk_neumann(np.cos(2.0 * theta), 3.5)
        gradient, hessian = disk_derivatives_at_origin(phi)
        np.testing.assert_allclose(gradient, [0.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(hessian, np.diag([1.0, -1.0]) / 3.5, atol=1e-12)
        self.assertAlmostEqual(phi.dirichlet_energy(), np.pi * 3.5 ** 2 / 2.0, places=9)

    def test_disk_neumann_with_mean(self):
        """Test: flujo 1 + cos 2θ en R = 4 da Hessiano diag(0.5, 0)"""
        theta = 2.0 * np.pi * (np.arange(256) + 0.5) / 256
        phi = solve_disk_neumann(1.0 + np.cos(2.0 * theta), 4.0)
        _, hessian = disk_derivatives_at_origin(phi)
        np.testing.assert_allclose(hessian, np.diag([0.5, 0.0]), atol=1e-12)
        np.testing.assert_allclose(phi.boundary_normal_derivative(theta[:4]), 1.0 + np.cos(2.0 * theta[:4]),
                                   atol=1e-12)

    def test_disk_neumann_cos1(self):
        """Test: flujo cos θ da gradiente (1, 0) y Hessiano nulo"""
        theta = 2.0 * np.pi * (np.arange(128) + 0.5) / 128
        phi = solve_disk_neumann(np.cos(theta), 2.0)
        gradient, hessian = disk_derivatives_at_origin(phi)
        self.assertAlmostEqual(phi.c, 0.0, places=12)
        np.testing.assert_allclose(gradient, [1.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(hessian, np.zeros((2, 2)), atol=1e-12)

    def test_neumann_kmax_validation(self):
        """Test de K_max frente al número de muestras"""
        with self.assertRaises(InvalidInputError):
            solve_disk_neumann(np.ones(16), 1.0, k_max=9)
        g0, a, _ = fourier_from_samples(np.full(32, 2.0), 4)
        self.assertAlmostEqual(g0, 2.0)
        np.testing.assert_allclose(a, 0.0, atol=1e-12)

class TestEulerianLocal(unittest.TestCase):
    """Tests para trayectorias, energías locales y flujo de frontera"""

    def test_energy_scaling_under_radius_doubling(self):
        """Test: con todos los pares en B_{6R}, duplicar R divide E por 2⁴"""
        rng = np.random.default_rng(12)
        x = rng.uniform(-3.0, 3.0, size=(40, 2))
        cloud = PairCloud(x, rng.normal(0.0, 0.3, size=(40, 2)), np.ones(40), side_length=64.0)
        self.assertTrue(np.all(cloud.window_mask(6.0)))
        self.assertAlmostEqual(local_energy_E(cloud, None, 2.0), local_energy_E(cloud, None, 1.0) / 16.0,
                               delta=1e-12 * local_energy_E(cloud, None, 1.0))

    def test_trajectory_seam(self):
        """Test de la trayectoria que cruza la costura del toro"""
        dom = TorusDomain(10.0, 2)
        position = trajectory([4.5, 0.0], [-4.5, 0.0], 0.5, dom)
        np.testing.assert_allclose(position, [-5.0, 0.0])
        with self.assertRaises(InvalidInputError):
            trajectory([0.0, 0.0], [1.0, 0.0], 1.5, dom)

    def test_continuity_equation(self):
        """Test: d/dt ∫ζ dρ_t = ∫∇ζ·dj_t"""
        dom = TorusDomain(10.0, 2)
        rng = np.random.default_rng(4)
        x = rng.uniform(-3, 3, size=(20, 2))
        plan = plan_from_arrays(x, x + rng.normal(0, 0.5, size=(20, 2)), np.ones(20), dom, cost='periodic')
        k = 2.0 * np.pi / 10.0
        zeta = lambda p: np.sin(k * p[:, 0])
        grad_zeta = lambda p: np.column_stack([k * np.cos(k * p[:, 0]), np.zeros(p.shape[0])])
        step = 1e-5
        derivative = (density_pairing(plan, zeta, 0.5 + step) - density_pairing(plan, zeta, 0.5 - step)) / (2 * step)
        self.assertAlmostEqual(derivative, flux_pairing(plan, grad_zeta, 0.5), places=6)

    def test_translation_energy(self):
        """Test: traslación uniforme por ε da E ≈ 36πε²"""
        dom = TorusDomain(32.0, 2)
        grid = lebesgue_grid(dom, 128, dom.volume)
        eps = 0.01
        plan = plan_from_arrays(grid.points, grid.points + [eps, 0.0], grid.masses, dom, cost='periodic')
        E = local_energy_E(plan, [0.0, 0.0], 1.0)
        self.assertAlmostEqual(E, 36.0 * np.pi * eps ** 2, delta=2e-2 * 36.0 * np.pi * eps ** 2)

    def test_intensity_term(self):
        """Test: intensidad local κ = 2 aporta (κ-1)²/κ = 1/2"""
        dom = TorusDomain(16.0, 2)
        mu = lebesgue_grid(dom, 32, 2.0 * dom.volume)
        lam = lebesgue_grid(dom, 32, dom.volume)
        terms = local_data_terms(mu, lam, [0.0, 0.0], 1.0, m_local=16)
        self.assertAlmostEqual(terms['kappa_mu'], 2.0, delta=0.05)
        self.assertAlmostEqual(terms['intensity_mu'], 0.5, delta=0.05)
        self.assertAlmostEqual(terms['intensity_lambda'], 0.0, delta=0.01)

    def test_linf_check_requires_energy(self):
        """Test de E + D = 0"""
        cloud = PairCloud(np.zeros((1, 2)), np.zeros((1, 2)), np.ones(1))
        with self.assertRaises(InvalidInputError):
            linf_check(cloud, None, 1.0, 0.0, 0.0)

    def test_one_pair_flux(self):
        """Test: un par que sale de B₁ cruza en t = 0.5 con ángulo 0"""
        cloud = PairCloud(np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]]), np.array([1.0]))
        flux = boundary_flux(cloud, None, 1.0, n_angle=8, n_time=4)
        self.assertEqual(flux.event_times.tolist(), [0.5])
        self.assertAlmostEqual(float(flux.event_angles[0]), 0.0)
        self.assertAlmostEqual(flux.net_mass, 1.0)
        self.assertEqual(flux.bins[0, 2], 1.0)
        self.assertAlmostEqual(flux_balance(cloud, None, 1.0), flux.net_mass)

    def test_flux_frame(self):
        """Test de la exportación tabular de bins"""
        cloud = PairCloud(np.array([[2.0, 0.0]]), np.array([[-4.0, 0.0]]), np.array([0.5]))
        flux = boundary_flux(cloud, None, 1.0, n_angle=4, n_time=2)
        frame = flux.to_frame()
        self.assertEqual(list(frame.columns), ['angle_lo', 'angle_hi', 't_lo', 't_hi', 'mass'])
        self.assertAlmostEqual(frame['mass'].sum(), 0.0)
        self.assertEqual(len(frame), 8)

class TestHarmonicApprox(unittest.TestCase):
    """Tests para la aproximación armónica"""

    def setUp(self):
        spacing = 0.25
        axis = np.arange(-7.875, 8.0, spacing)
        X, Y = np.meshgrid(axis, axis, indexing='ij')
        x = np.column_stack([X.reshape(-1), Y.reshape(-1)])
        self.eps = 0.02
        v = self.eps * np.column_stack([2.0 * x[:, 0], -2.0 * x[:, 1]])
        self.cloud = PairCloud(x, v, np.full(x.shape[0], spacing ** 2), side_length=32.0)

    def test_default_candidates(self):
        """Test de los radios candidatos"""
        candidates = default_candidates()
        self.assertEqual(candidates.size, 8)
        self.assertTrue(np.all((candidates > 3.0) & (candidates < 4.0)))
        with self.assertRaises(InvalidInputError):
            candidate_flux_energies(self.cloud, None, [3.5])

    def test_orthogonality_identity(self):
        """Test de la identidad de la expansión ortogonal"""
        radius = select_good_radius(self.cloud)
        self.assertTrue(3.0 < radius < 4.0)
        phi = solve_disk_neumann(boundary_flux(self.cloud, None, radius), radius)
        terms = orthogonality_terms(self.cloud, phi)
        scale = max(terms.kinetic_energy, terms.field_pairing, 1e-300)
        self.assertLess(abs(terms.identity_defect()), 1e-9 * scale)

    def test_residual_report(self):
        """Test del informe de residuo y de la curva de Pareto"""
        radius = select_good_radius(self.cloud)
        flux = boundary_flux(self.cloud, None, radius)
        phi = solve_disk_neumann(flux, radius)
        report = harmonic_residual(self.cloud, phi, None, 1.0, D=0.0, flux=flux)
        self.assertTrue(report.cauchy_schwarz_ok)
        self.assertGreater(report.window_pairs, 0)
        self.assertGreater(report.E, 0.0)
        curve = pareto_curve(report, [0.0, 1.0])
        self.assertEqual(list(curve.columns), ['C', 'tau'])
        self.assertAlmostEqual(curve['tau'].iloc[0], report.residual / report.E)

    def test_scaling_covariance_at_fixed_radius(self):
        """Test: a radio fijo, escalar desplazamientos y flujo por s escala ∇Φ por s y E, residuo por s²"""
        norms = np.sqrt(np.sum(self.cloud.x ** 2, axis=1))
        cloud = self.cloud.select((norms < 5.0) & ((norms < 0.85) | (norms > 1.15)))
        radius, s = 3.5, 2.0
        g0, a, b = boundary_flux(cloud, None, radius).fourier_coefficients(8)
        phi = solve_disk_neumann({'mean': g0, 'a': a, 'b': b}, radius)
        scaled_phi = solve_disk_neumann({'mean': s * g0, 'a': s * a, 'b': s * b}, radius)
        points = cloud.x[:5]
        np.testing.assert_allclose(scaled_phi.gradient(points), s * phi.gradient(points), rtol=1e-12, atol=1e-15)

        base = harmonic_residual(cloud, phi)
        scaled = harmonic_residual(cloud.with_displacements(s * cloud.v), scaled_phi)
        self.assertEqual(scaled.window_pairs, base.window_pairs)
        self.assertGreater(base.residual, 0.0)
        self.assertAlmostEqual(scaled.E / base.E, s ** 2, delta=1e-9 * s ** 2)
        self.assertAlmostEqual(scaled.residual / base.residual, s ** 2, delta=1e-9 * s ** 2)

class TestMapRegularity(unittest.TestCase):
    """Tests para el paso de mejora y el decaimiento de Campanato"""

    def test_tracefree_exponential(self):
        """Test: B = exp(-A/2) con A = diag(a, -a)"""
        a = 0.3
        B = tracefree_exponential(-0.5 * np.diag([a, -a]))
        np.testing.assert_allclose(B, np.diag([np.exp(-a / 2.0), np.exp(a / 2.0)]), atol=1e-14)
        self.assertAlmostEqual(np.linalg.det(B), 1.0, places=12)

    def test_affine_frame_validation(self):
        """Test de det B = 1"""
        with self.assertRaises(InvalidInputError):
            AffineFrame(B=2.0 * np.eye(2), b=np.zeros(2), A=np.zeros((2, 2)), trace_removed=0.0, good_radius=3.5)

    def test_sample_map_weights(self):
        """Test de pesos iguales que suman |B_ρ|"""
        T = sample_map(harmonic_test_map(0.0), 2.0, 500, seed=1)
        self.assertAlmostEqual(T.weights.sum(), np.pi * 4.0)
        np.testing.assert_allclose(T.displacements, 0.0, atol=1e-15)

    def test_coverage_gap(self):
        """Test de huecos de muestreo"""
        T = sample_map(harmonic_test_map(0.0), 6.0, 50, seed=0)
        with self.assertRaises(SamplingError):
            check_coverage(T, 6.0, 0.125)

    def test_identity_decay(self):
        """Test: el mapa identidad tiene exceso nulo en todas las escalas"""
        T = sample_map(harmonic_test_map(0.0), 6.0, 40000, seed=0)
        trace = campanato_decay(T, steps=2)
        self.assertEqual(trace.excesses.tolist(), [0.0, 0.0, 0.0])
        with self.assertRaises(InvalidInputError):
            campanato_decay(T, theta=0.2)

    def test_affine_map_reduced(self):
        """Test: un paso reduce el exceso de un mapa afín al menos diez veces"""
        eps = 1e-3
        T = sample_map(affine_map(np.eye(2) + np.diag([eps, -eps]), [eps, 0.0]), 6.0, 40000, seed=3)
        frame, T_hat = one_step(T)
        before = map_excess(T, 1.0)
        after = map_excess(T_hat, T_hat.scale)
        self.assertLessEqual(after, 0.1 * before)
        np.testing.assert_allclose(frame.b, [eps, 0.0], atol=0.2 * eps)

    def test_translation_excess_scaling(self):
        """Test: una traslación b da E(T,R) = b²|B_{6R}|/R^{d+2}, es decir 36π b²/R²"""
        b = 1e-3
        for radius in (1.0, 2.0):
            T = sample_map(affine_map(np.eye(2), [b, 0.0]), 6.0 * radius, 40000, seed=2)
            self.assertAlmostEqual(map_excess(T, radius), 36.0 * np.pi * b ** 2 / radius ** 2,
                                   delta=1e-9 * 36.0 * np.pi * b ** 2)

class TestMatchingCampanato(unittest.TestCase):
    """Tests para emparejamientos de Poisson y la cascada de Campanato"""

    def _identity_record(self, side_length=32.0, m=32):
        dom = TorusDomain(side_length, 2)
        grid = lebesgue_grid(dom, m, dom.volume)
        plan = plan_from_arrays(grid.points, grid.points, grid.masses, dom, cost='periodic')
        phi = solve_periodic_poisson(np.zeros((m, m)), domain=dom)
        report = SolveReport(method='constructed', iterations=0, marginal_error=0.0, wall_time=0.0)
        return MatchingRecord(side_length=side_length, seed=0, n=len(grid), w2=0.0, wall_time=0.0, report=report,
                              plan=plan, phi=phi, m=m, field_m=m, kappa=1.0)

    def test_run_matching(self):
        """Test de un emparejamiento pequeño"""
        record = run_matching(8.0, 0)
        self.assertGreater(record.n, 0)
        self.assertGreaterEqual(record.w2, 0.0)
        self.assertLess(record.plan.marginal_error(), 1e-9)
        self.assertLess(record.phi.metadata['residual'], 1e-10)
        self.assertAlmostEqual(record.kappa, record.n / 64.0)
        residual = residual_vs_gradient(record)
        self.assertTrue(np.isfinite(residual.residual))
        self.assertAlmostEqual(residual.t, np.log(8.0) ** 4)

    def test_field_resolution(self):
        """Test de la resolución potencia de dos"""
        self.assertEqual(field_resolution(16), 16)
        self.assertEqual(field_resolution(24), 32)

    def test_radius_validation(self):
        """Test de radios fuera de rango"""
        record = self._identity_record()
        with self.assertRaises(InvalidInputError):
            averaged_displacement(record, [0.0, 0.0], 9.0)
        with self.assertRaises(InvalidInputError):
            shift_h(record, [0.0, 0.0], 8.0)

    def test_shift_of_linear_field(self):
        """Test: φ lineal con gradiente v da h = v"""
        dom = TorusDomain(32.0, 2)
        phi = ScalarField(np.zeros((32, 32)), dom, linear_part=[0.3, -0.2])
        np.testing.assert_allclose(shift_h(phi, [1.0, 2.0], 4.0), [0.3, -0.2], atol=1e-12)

    def test_empirical_rstar(self):
        """Test del radio r_* sobre perfiles dados"""
        self.assertEqual(dyadic_radii(64.0), [2.0, 4.0, 8.0, 16.0])
        profile = {2.0: 10.0, 4.0: 0.1, 8.0: 0.1, 16.0: 0.1}
        mu = lebesgue_grid(TorusDomain(64.0, 2), 4, 4096.0)
        self.assertEqual(empirical_rstar(mu, 0.5, profile=profile), 4.0)
        self.assertEqual(empirical_rstar(mu, 0.5, profile={2.0: 0.1, 4.0: 0.1}), 2.0)
        self.assertEqual(empirical_rstar(mu, 0.5, profile={2.0: 0.1, 4.0: 10.0}), float('inf'))

    def test_identity_cascade(self):
        """Test: el emparejamiento identidad da desplazamientos nulos en todas las escalas"""
        record = self._identity_record()
        trace = campanato_cascade(record, [0.0, 0.0], 2.0)
        self.assertEqual(trace.base_radii, [4.0, 2.0])
        self.assertEqual(trace.stopped_reason, 'target')
        np.testing.assert_array_equal(np.asarray(trace.shifts), 0.0)
        self.assertEqual(trace.h_gap, 0.0)
        np.testing.assert_array_equal(trace.restored_displacements(), trace.original_displacements)
        with self.assertRaises(InvalidInputError):
            linf_microscopic(record, [0.0, 0.0], trace, 1.0)

    def test_cascade_window_energy_counts_targets(self):
        """Test: la energía de ventana cuenta pares con x o y en B_R, como E"""
        dom = TorusDomain(32.0, 2)
        grid = lebesgue_grid(dom, 32, dom.volume)
        shift = np.array([0.75, 0.0])
        plan = plan_from_arrays(grid.points, wrap(grid.points + shift, dom), grid.masses, dom, cost='periodic')
        record = self._identity_record()
        record.plan = plan
        trace = campanato_cascade(record, [0.0, 0.0], 2.0)
        cloud = PairCloud.from_plan(plan, [0.0, 0.0])
        both = cloud.window_mask(4.0)
        sources_only = np.sum(cloud.x ** 2, axis=1) < 16.0
        self.assertGreater(both.sum(), sources_only.sum())
        self.assertAlmostEqual(trace.window_energy[0], 0.5625 * float(cloud.mass[both].sum()), places=9)

class TestExperimentRunner(unittest.TestCase):
    """Tests para configuración, ejecución idempotente y ajustes"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)

    def _rstar_config(self):
        return ExperimentConfig(kind='rstar-tail', side_lengths=[8.0], seeds=2, m_local=8,
                                bootstrap_samples=200, output_dir=self.tmp.name)

    def test_config_round_trip(self):
        """Test de serialización sin pérdidas"""
        config = ExperimentConfig(kind='harmonic-approx', side_lengths=[16], seeds=1, m=32,
                                  parameters={'deltas': [0.05]})
        restored = ExperimentConfig.from_dict(json.loads(json.dumps(config.to_dict())))
        self.assertEqual(restored, config)
        self.assertEqual(restored.config_hash(), config.config_hash())
        self.assertEqual(len(config.cells()), 1)
        self.assertEqual(config.group_keys(), ['L', 'delta'])

    def test_unknown_keys_rejected(self):
        """Test de claves desconocidas"""
        document = ExperimentConfig(kind='rstar-tail').to_dict()
        for section, key in ((None, 'typo'), ('seeds', 'cuont'), ('parameters', 'c_dta')):
            broken = json.loads(json.dumps(document))
            (broken if section is None else broken[section])[key] = 1
            with self.assertRaises(ConfigError):
                ExperimentConfig.from_dict(broken)
        with self.assertRaises(ConfigError):
            ExperimentConfig(kind='matching-scaling', solver='auction')

    def test_load_toml(self):
        """Test de lectura de TOML"""
        path = os.path.join(self.tmp.name, 'exp.toml')
        with open(path, 'w', encoding='utf-8') as f:
            f.write('schema_version = 1\nkind = "rstar-tail"\n\n[domain]\nside_lengths = [8, 16]\n\n'
                    '[seeds]\ncount = 3\n')
        config = load_config(path)
        self.assertEqual(config.side_lengths, [8.0, 16.0])
        self.assertEqual(len(config.cells()), 6)
        with self.assertRaises(ConfigError):
            load_config(os.path.join(self.tmp.name, 'missing.toml'))

    def test_idempotent_rerun(self):
        """Test: la segunda ejecución no recalcula y reproduce el resumen byte a byte"""
        config = self._rstar_config()
        first = run(config, max_threads=2)
        self.assertEqual((first.computed, first.skipped, first.failed), (2, 0, 0))
        for name in ('cells.csv', 'summary.csv', 'manifest.json', 'run_log.json'):
            self.assertTrue(os.path.exists(os.path.join(first.run_dir, name)))
        with open(os.path.join(first.run_dir, 'manifest.json'), encoding='utf-8') as f:
            manifest = json.load(f)
        self.assertIn('SOLVER_CONFIG', manifest['defaults'])
        self.assertNotIn('binary_magic', manifest['defaults']['SOLVER_CONFIG'])
        with open(os.path.join(first.run_dir, 'summary.csv'), 'rb') as f:
            summary_bytes = f.read()

        second = run(config, max_threads=2)
        self.assertEqual((second.computed, second.skipped), (0, 2))
        with open(os.path.join(second.run_dir, 'summary.csv'), 'rb') as f:
            self.assertEqual(f.read(), summary_bytes)

    def test_corrupted_cell_recomputed(self):
        """Test: solo la celda corrupta se recalcula"""
        config = self._rstar_config()
        runner = ExperimentRunner(config, max_threads=1)
        runner.run()
        with open(runner.cell_path(config.cells()[0]), 'w', encoding='utf-8') as f:
            f.write('{"status": "completed", "metrics": ')
        result = ExperimentRunner(config, max_threads=1).run()
        self.assertEqual((result.computed, result.skipped), (1, 1))

    def test_all_cells_failed(self):
        """Test del código de salida cuando fallan todas las celdas"""
        config = self._rstar_config()
        failing = Mock(side_effect=RuntimeError('fallo simulado'))
        with patch.dict(experiment_runner.CELL_RUNNERS, {'rstar-tail': failing}):
            result = run(config, max_threads=1)
        self.assertEqual(result.failed, 2)
        self.assertEqual(result.exit_code, 3)

    def test_matching_scaling_cells(self):
        """Test: matching-scaling con L = 8 y dos semillas"""
        config = ExperimentConfig(kind='matching-scaling', side_lengths=[8.0], seeds=2, bootstrap_samples=200,
                                  output_dir=self.tmp.name)
        result = run(config, max_threads=1)
        self.assertEqual(result.computed, 2)
        self.assertEqual(len(os.listdir(os.path.join(result.run_dir, 'cells'))), 2)
        summary = pd.read_csv(os.path.join(result.run_dir, 'summary.csv'))
        row = summary[summary['statistic'] == 'w2_over_volume']
        self.assertEqual(int(row['seeds'].iloc[0]), 2)
        self.assertLessEqual(float(row['ci_lo'].iloc[0]), float(row['mean'].iloc[0]))

        stem = os.path.join(result.run_dir, 'artifacts', 'L8_seed000000')
        measure = experiment_runner.inspect_artifact(stem + '.otm')
        self.assertEqual(measure['format'], 'OTM1')
        self.assertEqual((measure['L'], measure['d']), (8.0, 2))
        plan = experiment_runner.inspect_artifact(stem + '.otp')
        self.assertEqual(plan['format'], 'OTP1')
        self.assertGreater(plan['pairs'], 0)
        self.assertGreater(plan['total_cost'], 0.0)
        field_summary = experiment_runner.inspect_artifact(stem + '.otf')
        self.assertEqual(field_summary['format'], 'OTF1')
        self.assertEqual(field_summary['L'], 8.0)
        cell = experiment_runner.inspect_artifact(os.path.join(result.run_dir, 'cells', 'L8_seed000000.json'))
        self.assertEqual((cell['cell_id'], cell['kind'], cell['status']),
                         ('L8_seed000000', 'matching-scaling', 'completed'))
        self.assertIn('w2_over_volume', cell['metrics'])

        import main as otlab_main
        with patch.object(otlab_main, 'setup_logging'), patch.object(otlab_main, '_print_json') as printed:
            self.assertEqual(otlab_main.main(['inspect', stem + '.otp']), 0)
        self.assertEqual(printed.call_args[0][0]['pairs'], plan['pairs'])

    def test_inspect_unknown_format(self):
        """Test de artefacto con cabecera desconocida"""
        path = os.path.join(self.tmp.name, 'junk.bin')
        with open(path, 'wb') as f:
            f.write(b'XXXX' + bytes(16))
        with self.assertRaises(InvalidInputError):
            experiment_runner.inspect_artifact(path)

    def test_oracle_check_small_instance(self):
        """Test del oráculo exhaustivo sobre dos átomos en el toro de lado 4"""
        instance = {'L': 4.0, 'd': 2, 'cost': 'periodic', 'source': [[1.5, 0.0, 1.0], [0.0, 0.0, 1.0]],
                    'target': [[-2.0, 0.0, 1.0], [0.5, 0.0, 1.0]]}
        report = experiment_runner.oracle_check(instance)
        self.assertTrue(report['agree'])
        self.assertEqual(report['oracle'], 'brute_force')
        self.assertAlmostEqual(report['exact_cost'], 0.5, places=12)
        self.assertAlmostEqual(report['oracle_cost'], 0.5, places=12)

        weighted = dict(instance, source=[[1.5, 0.0, 1.0], [0.0, 0.0, 3.0]], target=[[-2.0, 0.0, 2.0], [0.5, 0.0, 2.0]])
        report = experiment_runner.oracle_check(weighted)
        self.assertEqual(report['oracle'], 'linear_program')
        self.assertTrue(report['agree'])

    def test_oracle_check_near_zero_cost(self):
        """Test: con coste casi nulo la tolerancia es absoluta"""
        instance = {'L': 8.0, 'd': 2, 'source': [[0.0, 0.0, 1.0], [2.0, 2.0, 1.0]],
                    'target': [[1e-10, 0.0, 1.0], [2.0, 2.0, 1.0]]}
        reference = Mock(total_cost=0.0, method='brute_force')
        with patch.object(experiment_runner, 'brute_force_oracle', return_value=reference):
            report = experiment_runner.oracle_check(instance)
        self.assertGreater(report['exact_cost'], 0.0)
        self.assertTrue(report['agree'])

    def test_cli_oracle_and_fit(self):
        """Test de los subcomandos oracle y fit"""
        import main as otlab_main
        instance_path = os.path.join(self.tmp.name, 'instance.json')
        with open(instance_path, 'w', encoding='utf-8') as f:
            json.dump({'L': 4.0, 'd': 2, 'source': [[1.5, 0.0, 1.0], [0.0, 0.0, 1.0]],
                       'target': [[-2.0, 0.0, 1.0], [0.5, 0.0, 1.0]]}, f)
        L = np.array([8.0, 16.0, 32.0, 64.0])
        means = 0.1592 * np.log(L)
        summary_path = os.path.join(self.tmp.name, 'summary.csv')
        pd.DataFrame({'L': L, 'statistic': 'w2_over_volume', 'seeds': 64, 'mean': means,
                      'ci_lo': means - 0.01, 'ci_hi': means + 0.01}).to_csv(summary_path, index=False)

        with patch.object(otlab_main, 'setup_logging'), patch.object(otlab_main, '_print_json') as printed:
            self.assertEqual(otlab_main.main(['oracle', instance_path]), 0)
            self.assertTrue(printed.call_args[0][0]['agree'])
            self.assertEqual(otlab_main.main(['fit', summary_path, '--bootstrap', '200']), 0)
            fitted = printed.call_args[0][0]
        self.assertEqual(fitted['model'], 'log')
        self.assertAlmostEqual(fitted['estimates']['a'], 0.1592, places=8)

    def test_harmonic_approx_cell(self):
        """Test: harmonic-approx con la familia de densidades, L = 16 y δ = 0.05"""
        config = ExperimentConfig(kind='harmonic-approx', side_lengths=[16.0], seeds=1, m=32, m_local=8,
                                  bootstrap_samples=100, parameters={'deltas': [0.05]}, output_dir=self.tmp.name)
        result = run(config, max_threads=1)
        self.assertEqual((result.computed, result.failed), (1, 0))
        cells = pd.read_csv(os.path.join(result.run_dir, 'cells.csv'))
        self.assertEqual(len(cells), 1)
        row = cells.iloc[0]
        self.assertAlmostEqual(float(row['delta']), 0.05)
        self.assertGreater(float(row['E']), 0.0)
        self.assertGreaterEqual(float(row['residual']), 0.0)
        self.assertTrue(3.0 < float(row['R']) < 4.0)
        self.assertTrue(np.isfinite(float(row['identity_defect'])))

    def test_epsreg_decay_cell(self):
        """Test: epsreg-decay sobre el mapa armónico de prueba con δ = 10⁻³"""
        config = ExperimentConfig(kind='epsreg-decay', side_lengths=[8.0], seeds=1, bootstrap_samples=100,
                                  parameters={'deltas': [1e-3], 'steps': 1}, output_dir=self.tmp.name)
        result = run(config, max_threads=1)
        self.assertEqual((result.computed, result.failed), (1, 0))
        cells = pd.read_csv(os.path.join(result.run_dir, 'cells.csv'))
        row = cells.iloc[0]
        self.assertGreater(float(row['E_0']), 0.0)
        self.assertTrue(np.isfinite(float(row['ratio_1'])))
        self.assertIn('decay_ok', cells.columns)
        artifacts = os.listdir(os.path.join(result.run_dir, 'artifacts'))
        self.assertTrue(any(name.endswith('_decay.csv') for name in artifacts))

    def test_cascade_cell(self):
        """Test: cascade en L = 32 con r_target recortado a L/8"""
        config = ExperimentConfig(kind='cascade', side_lengths=[32.0], seeds=1, m=32, m_local=8,
                                  bootstrap_samples=100,
                                  parameters={'r_target': 4.0, 'averaged_radii': [4.0, 8.0]},
                                  output_dir=self.tmp.name)
        result = run(config, max_threads=1)
        self.assertEqual((result.computed, result.failed), (1, 0))
        row = pd.read_csv(os.path.join(result.run_dir, 'cells.csv')).iloc[0]
        self.assertEqual(float(row['r_target']), 4.0)
        self.assertGreaterEqual(int(row['n_scales']), 1)
        self.assertLess(float(row['restore_error']), 1e-12)
        self.assertIn('avg_gap_R4', row.index)
        self.assertTrue(os.path.exists(os.path.join(result.run_dir, 'artifacts', 'L32_seed000000_cascade.csv')))

    def test_fit_exact_log_law(self):
        """Test: datos exactos y = 0.1592·log L dan pendiente 0.1592 y residuo nulo"""
        L = np.array([8.0, 16.0, 32.0, 64.0])
        means = 0.1592 * np.log(L)
        summary = pd.DataFrame({'L': L, 'statistic': 'w2_over_volume', 'seeds': 64, 'mean': means,
                                'ci_lo': means, 'ci_hi': means})
        fit = fit_prefactor(summary)
        self.assertAlmostEqual(fit.slope, 0.1592, places=10)
        self.assertLess(fit.residual_norm, 1e-10)
        lo, hi = fit.ci['a']
        self.assertLessEqual(lo, fit.slope)
        self.assertGreaterEqual(hi, fit.slope)
        self.assertAlmostEqual(fit.target, 1.0 / (2.0 * np.pi))
        self.assertAlmostEqual(fit.distance_to_target, abs(0.1592 - 1.0 / (2.0 * np.pi)))

    def test_fit_from_cells(self):
        """Test del bootstrap no paramétrico sobre semillas"""
        rng = np.random.default_rng(0)
        rows = [{'L': L, 'seed': s, 'w2_over_volume': 0.16 * np.log(L) + rng.normal(0, 0.01)}
                for L in (8.0, 16.0, 32.0) for s in range(16)]
        fit = fit_prefactor(pd.DataFrame(rows), n_bootstrap=300)
        self.assertEqual(fit.bootstrap, 'cells')
        lo, hi = fit.ci['a']
        self.assertTrue(lo <= fit.slope <= hi)
        self.assertAlmostEqual(fit.slope, 0.16, delta=0.02)

    def test_fit_degenerate_design(self):
        """Test de diseño con menos de tres valores de L"""
        summary = pd.DataFrame({'L': [8.0, 16.0], 'statistic': 'w2_over_volume', 'mean': [0.3, 0.4],
                                'ci_lo': [0.3, 0.4], 'ci_hi': [0.3, 0.4]})
        with self.assertRaises(InvalidInputError):
            fit_prefactor(summary)

    def test_cli_config_error_exit_code(self):
        """Test del código de salida 2 ante errores de configuración"""
        import main as otlab_main
        with patch.object(otlab_main, 'setup_logging'):
            code = otlab_main.main(['run', os.path.join(self.tmp.name, 'missing.toml')])
        self.assertEqual(code, 2)

    def test_cli_invalid_thread_env(self):
        """Test: OTLAB_THREADS no entero es un error de configuración (código 2)"""
        import main as otlab_main
        path = os.path.join(self.tmp.name, 'exp.toml')
        with open(path, 'w', encoding='utf-8') as f:
            f.write(f'schema_version = 1\nkind = "rstar-tail"\noutput_dir = "{self.tmp.name}"\n\n'
                    '[domain]\nside_lengths = [8]\n\n[seeds]\ncount = 1\n')
        with patch.object(otlab_main, 'setup_logging'), patch.dict(os.environ, {'OTLAB_THREADS': 'auto'}):
            code = otlab_main.main(['run', path])
        self.assertEqual(code, 2)

class TestUtils(unittest.TestCase):
    """Tests para utilidades"""

    def test_content_hash_canonical(self):
        """Test de hash independiente del orden de claves"""
        self.assertEqual(content_hash({'a': 1, 'b': [1.5, 2]}), content_hash({'b': [1.5, 2], 'a': 1}))
        self.assertEqual(canonical_json({'b': 1, 'a': np.float64(0.5)}), '{"a":0.5,"b":1}')

    def test_convert_numpy(self):
        """Test de conversión de tipos numpy"""
        converted = convert_numpy({'x': np.array([1, 2]), 'inf': np.inf, 'nan': np.nan, 'flag': np.bool_(True)})
        self.assertEqual(converted, {'x': [1, 2], 'inf': 'inf', 'nan': None, 'flag': True})

    def test_atomic_write(self):
        """Test de escritura atómica"""
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'nested', 'file.txt')
            atomic_write_text(path, 'hola')
            with open(path, encoding='utf-8') as f:
                self.assertEqual(f.read(), 'hola')
            self.assertEqual(os.listdir(os.path.dirname(path)), ['file.txt'])

    def test_bootstrap_ci(self):
        """Test del intervalo bootstrap determinista"""
        values = np.arange(20, dtype=float)
        lo, hi = bootstrap_ci(values, seed=1)
        self.assertLess(lo, values.mean())
        self.assertGreater(hi, values.mean())
        self.assertEqual((lo, hi), bootstrap_ci(values, seed=1))
        self.assertEqual(bootstrap_ci([3.0]), (3.0, 3.0))

    def test_setup_logging_invalid_level(self):
        """Test de nivel de logging inválido"""
        with self.assertRaises(ConfigError):
            setup_logging('VERBOSE')

    def test_max_threads_from_environment(self):
        """Test de OTLAB_THREADS"""
        with patch.dict(os.environ, {'OTLAB_THREADS': '3'}):
            self.assertEqual(Config.max_threads(), 3)
        self.assertEqual(safe_divide(1.0, 0.0, default=-1.0), -1.0)

    def test_max_threads_invalid_environment(self):
        """Test: valores no enteros o no positivos de OTLAB_THREADS"""
        for value in ('auto', '0', '-2'):
            with patch.dict(os.environ, {'OTLAB_THREADS': value}):
                with self.assertRaises(ConfigError):
                    Config.max_threads()
        with patch.dict(os.environ, {'OTLAB_THREADS': ''}):
            self.assertEqual(Config.max_threads(), Config.EXPERIMENT_CONFIG['max_threads'])
        self.assertIsInstance(Config.EXPERIMENT_CONFIG['max_threads'], int)

def run_all_tests():
    """Ejecuta todos los tests"""
    # Crear suite de tests
    test_classes = [
        TestTorusGeometry,
        TestMeasures,
        TestTransportSolvers,
        TestFieldSolvers,
        TestEulerianLocal,
        TestHarmonicApprox,
        TestMapRegularity,
        TestMatchingCampanato,
        TestExperimentRunner,
        TestUtils
    ]

    loader = unittest.TestLoader()
    suite = unittest.TestSuite()

    for test_class in test_classes:
        tests = loader.loadTestsFromTestCase(test_class)
        suite.addTests(tests)

    # Ejecutar tests
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    # Resumen
    print(f"\n{'='*60}")
    print(f"RESUMEN DE TESTS")
    print(f"{'='*60}")
    print(f"Tests ejecutados: {result.testsRun}")
    print(f"Errores: {len(result.errors)}")
    print(f"Fallos: {len(result.failures)}")
    print(f"Éxito: {result.wasSuccessful()}")

    if result.errors:
        print(f"\nERRORES:")
        for test, error in result.errors:
            print(f"- {test}: {error}")

    if result.failures:
        print(f"\nFALLOS:")
        for test, failure in result.failures:
            print(f"- {test}: {failure}")

    return result.wasSuccessful()

if __name__ == "__main__":
    success = run_all_tests()
    sys.exit(0 if success else 1)
