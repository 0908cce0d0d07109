"""
Harmonic Approximation for otlab
Aproximación armónica del desplazamiento: selección de radio bueno, problema de
Neumann con el flujo de frontera, residuo lagrangiano y descomposición ortogonal
"""

import os
import sys
import json
import logging
from dataclasses import dataclass, field, asdict
from typing import Dict, Any, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

# Añadir el directorio raíz al path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from config import Config
from eulerian.eulerian_local import (PairCloud, PairData, as_pair_cloud, boundary_flux, local_energy_E,
                                     local_data_D, BoundaryFlux)
from fields.field_solvers import DiskNeumannField, solve_disk_neumann
from measures.measures import DiscreteMeasure
from transport.solvers import TransportPlan, ball_cells
from utils import InvalidInputError, convert_numpy, safe_divide

logger = logging.getLogger(__name__)

@dataclass
class OrthogonalityTerms:
    """Términos de la expansión del cuadrado en B_R × (0,1)"""
    energy_gap: float
    cross_term: float
    density_term: float
    cross_term_prime: float
    kinetic_energy: float
    dirichlet_energy: float
    flux_pairing: float
    field_pairing: float
    residual_in_ball: float
    density_term_kde: Optional[float] = None
    kde_bandwidth: Optional[float] = None

    def identity_defect(self) -> float:
        """residuo en B_R - (gap + 2·cross' + densidad)"""
        return self.residual_in_ball - (self.energy_gap + 2.0 * self.cross_term_prime + self.density_term)

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy(asdict(self))

@dataclass
class HarmonicReport:
    """Resultado de la aproximación armónica a escala unidad"""
    radius: float
    E: float
    D: Optional[float]
    residual: float
    dirichlet_energy: float
    flux_energy: float
    window_energy: float
    field_window_energy: float
    outside_count: int
    window_pairs: int
    k_max: int
    cauchy_schwarz_ok: bool
    orthogonality: Optional[OrthogonalityTerms] = None
    candidate_energies: Dict[float, float] = field(default_factory=dict)

    @property
    def residual_ratio(self) -> float:
        return safe_divide(self.residual, self.E, default=float('nan'))

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy({
            'R': self.radius,
            'E': self.E,
            'D': self.D,
            'residual': self.residual,
            'residual_ratio': self.residual_ratio,
            'dirichlet_energy': self.dirichlet_energy,
            'flux_energy': self.flux_energy,
            'window_energy': self.window_energy,
            'field_window_energy': self.field_window_energy,
            'outside_count': self.outside_count,
            'window_pairs': self.window_pairs,
            'k_max': self.k_max,
            'cauchy_schwarz_ok': self.cauchy_schwarz_ok,
            'orthogonality': self.orthogonality.to_dict() if self.orthogonality else None,
            'candidate_energies': {f'{r:.6f}': e for r, e in self.candidate_energies.items()}
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

def default_candidates(n_candidates: Optional[int] = None, band: Optional[Tuple[float, float]] = None) -> np.ndarray:
    """Radios equiespaciados en el interior de la banda (3, 4)"""
    n_candidates = n_candidates or Config.HARMONIC_CONFIG['n_candidates']
    lo, hi = band or Config.HARMONIC_CONFIG['candidate_range']
    return lo + (hi - lo) * (np.arange(n_candidates) + 0.5) / n_candidates

def candidate_flux_energies(data: PairData, center=None, candidates: Optional[Sequence[float]] = None,
                            n_angle: Optional[int] = None, n_time: Optional[int] = None) -> Dict[float, float]:
    """∫_{∂B_R}∫₀¹ f² para cada radio candidato"""
    cloud = as_pair_cloud(data, center)
    radii = np.sort(np.asarray(default_candidates() if candidates is None else candidates, dtype=float))
    if radii.size < Config.HARMONIC_CONFIG['n_candidates']:
        raise InvalidInputError(f"Se requieren al menos {Config.HARMONIC_CONFIG['n_candidates']} radios candidatos")
    lo, hi = Config.HARMONIC_CONFIG['candidate_range']
    if np.any(radii <= lo) or np.any(radii >= hi):
        raise InvalidInputError(f"Los radios candidatos deben estar en ({lo}, {hi}) a escala unidad")
    return {float(r): boundary_flux(cloud, None, float(r), n_angle, n_time).flux_energy() for r in radii}

def _smallest_minimizer(energies: Dict[float, float]) -> float:
    best_radius, best_energy = None, np.inf
    for radius in sorted(energies):
        if energies[radius] < best_energy:
            best_radius, best_energy = radius, energies[radius]
    return best_radius

def select_good_radius(data: PairData, center=None, candidates: Optional[Sequence[float]] = None,
                       n_angle: Optional[int] = None, n_time: Optional[int] = None) -> float:
    """Candidato que minimiza la energía del flujo binado; empates al menor radio"""
    energies = candidate_flux_energies(data, center, candidates, n_angle, n_time)
    radius = _smallest_minimizer(energies)
    logger.debug(f"select_good_radius: R={radius:.4f}, energía de flujo {energies[radius]:.4g}")
    return radius

def harmonic_residual(data: PairData, phi: DiskNeumannField, center=None, window: float = 1.0,
                      E: Optional[float] = None, D: Optional[float] = None,
                      flux: Optional[BoundaryFlux] = None) -> HarmonicReport:
    """Σ masa·|y - x - ∇Φ(x)|² sobre los pares con x o y en B₁"""
    cloud = as_pair_cloud(data, center)
    window_cloud = cloud.select(cloud.window_mask(window))

    x = window_cloud.x
    norms = np.sqrt(np.sum(x ** 2, axis=1))
    outside = norms >= phi.radius
    evaluation = x.copy()
    evaluation[outside] = x[outside] * (phi.radius / norms[outside])[:, None]
    grads = phi.gradient(evaluation) if len(window_cloud) else np.empty((0, 2))

    mass = window_cloud.mass
    residual = float(np.sum(mass * np.sum((window_cloud.v - grads) ** 2, axis=1)))
    window_energy = float(np.sum(mass * np.sum(window_cloud.v ** 2, axis=1)))
    field_energy = float(np.sum(mass * np.sum(grads ** 2, axis=1)))
    bound = window_energy + field_energy + 2.0 * np.sqrt(window_energy * field_energy)

    if E is None:
        E = local_energy_E(cloud, None, 1.0)
    flux_energy = flux.mean_flux_energy() if flux is not None else phi.flux_energy()
    return HarmonicReport(
        radius=phi.radius,
        E=float(E),
        D=None if D is None else float(D),
        residual=residual,
        dirichlet_energy=phi.dirichlet_energy(),
        flux_energy=float(flux_energy),
        window_energy=window_energy,
        field_window_energy=field_energy,
        outside_count=int(outside.sum()),
        window_pairs=len(window_cloud),
        k_max=phi.k_max,
        cauchy_schwarz_ok=bool(residual <= bound * (1.0 + 1e-12) + 1e-300)
    )

def ball_time_intervals(cloud: PairCloud, radius: float) -> Tuple[np.ndarray, np.ndarray]:
    """Intervalo [t₀, t₁] ⊂ [0, 1] en que la trayectoria recta está en B_R (vacío si t₁ <= t₀)"""
    x, v = cloud.x, cloud.v
    A = np.sum(v * v, axis=1)
    B = 2.0 * np.sum(x * v, axis=1)
    C = np.sum(x * x, axis=1) - radius * radius
    moving = A > 0
    disc = np.where(moving, B * B - 4.0 * A * C, 0.0)
    root = np.sqrt(np.maximum(disc, 0.0))
    denom = np.where(moving, 2.0 * A, 1.0)
    t0 = np.where(moving, np.maximum((-B - root) / denom, 0.0), 0.0)
    t1 = np.where(moving, np.minimum((-B + root) / denom, 1.0), 1.0)

    static_inside = ~moving & (C < 0)
    empty = (moving & (disc <= 0)) | (~moving & ~static_inside)
    t0 = np.where(empty, 0.0, t0)
    t1 = np.where(empty, 0.0, t1)
    return t0, np.maximum(t1, t0)

def _density_term_kde(positions: np.ndarray, weights: np.ndarray, phi: DiskNeumannField,
                      bandwidth: float, step: float) -> float:
    """∫_{B_R}(ρ̄ - 1)|∇Φ|² con ρ̄ estimada por núcleo gaussiano desde las muestras de trayectoria"""
    from sklearn.neighbors import KernelDensity

    centroids, areas = ball_cells(phi.radius, max(4, int(np.ceil(2.0 * phi.radius / step))), 2)
    total = float(weights.sum())
    if total <= 0:
        density = np.zeros(areas.size)
    else:
        kde = KernelDensity(kernel='gaussian', bandwidth=bandwidth, rtol=1e-6)
        kde.fit(positions, sample_weight=weights)
        density = total * np.exp(kde.score_samples(centroids))
    grads = phi.gradient(centroids)
    return float(np.sum(areas * (density - 1.0) * np.sum(grads ** 2, axis=1)))

def orthogonality_terms(data: PairData, phi: DiskNeumannField, center=None, radius: Optional[float] = None,
                        n_nodes: Optional[int] = None, kde: bool = False,
                        kde_bandwidth: Optional[float] = None) -> OrthogonalityTerms:
    """Gap de energía, término cruzado y término de densidad por cuadratura en las trayectorias"""
    cloud = as_pair_cloud(data, center)
    radius = phi.radius if radius is None else float(radius)
    n_nodes = n_nodes or Config.FLUX_CONFIG['time_quadrature_nodes']

    t0, t1 = ball_time_intervals(cloud, radius)
    active = t1 > t0
    inner = cloud.select(active)
    t0, t1 = t0[active], t1[active]
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    half = 0.5 * (t1 - t0)
    times = t0[:, None] + half[:, None] * (nodes[None, :] + 1.0)
    quad_weights = half[:, None] * weights[None, :]

    positions = inner.x[:, None, :] + times[:, :, None] * inner.v[:, None, :]
    flat = positions.reshape(-1, 2)
    grads = phi.gradient(flat).reshape(positions.shape) if flat.size else np.empty(positions.shape)

    mass = inner.mass[:, None]
    speed2 = np.sum(inner.v ** 2, axis=1)[:, None]
    along = np.einsum('nqd,nd->nq', grads, inner.v)
    grad2 = np.sum(grads ** 2, axis=2)

    kinetic = float(np.sum(mass * quad_weights * speed2))
    flux_pair = float(np.sum(mass * quad_weights * along))
    field_pair = float(np.sum(mass * quad_weights * grad2))
    residual_in_ball = float(np.sum(mass * quad_weights * np.sum((inner.v[:, None, :] - grads) ** 2, axis=2)))
    dirichlet = phi.dirichlet_energy()

    # ∫_{B_R} Φ d(μ - λ) con Φ de media nula
    r2 = radius * radius
    start = cloud.select(np.sum(cloud.x ** 2, axis=1) < r2)
    end_mask = np.sum(cloud.y ** 2, axis=1) < r2
    cross = float(np.sum(start.mass * phi.normalized_value(start.x)) if len(start) else 0.0)
    if np.any(end_mask):
        cross -= float(np.sum(cloud.mass[end_mask] * phi.normalized_value(cloud.y[end_mask])))

    density_kde = bandwidth = None
    if kde:
        step = Config.HARMONIC_CONFIG['quadrature_step']
        bandwidth = kde_bandwidth or Config.HARMONIC_CONFIG['kde_bandwidth_cells'] * step
        density_kde = _density_term_kde(flat, (mass * quad_weights).reshape(-1), phi, bandwidth, step)

    return OrthogonalityTerms(
        energy_gap=kinetic - dirichlet,
        cross_term=cross,
        density_term=field_pair - dirichlet,
        cross_term_prime=dirichlet - flux_pair,
        kinetic_energy=kinetic,
        dirichlet_energy=dirichlet,
        flux_pairing=flux_pair,
        field_pairing=field_pair,
        residual_in_ball=residual_in_ball,
        density_term_kde=density_kde,
        kde_bandwidth=bandwidth
    )

def pareto_curve(report: HarmonicReport, c_grid: Optional[Sequence[float]] = None) -> pd.DataFrame:
    """(residuo - C·D)/E sobre una malla de constantes C"""
    c_grid = np.asarray(Config.HARMONIC_CONFIG['pareto_c_grid'] if c_grid is None else c_grid, dtype=float)
    D = report.D if report.D is not None else 0.0
    if report.E > 0:
        ratios = (report.residual - c_grid * D) / report.E
    else:
        ratios = np.full(c_grid.size, np.nan)
    return pd.DataFrame({'C': c_grid, 'tau': ratios})

def harmonic_approximation(plan: TransportPlan, mu: Optional[DiscreteMeasure] = None,
                           lam: Optional[DiscreteMeasure] = None, center=None, scale: float = 1.0,
                           candidates: Optional[Sequence[float]] = None, k_max: Optional[int] = None,
                           m_local: Optional[int] = None, with_orthogonality: bool = True,
                           kde: bool = False) -> Tuple[HarmonicReport, DiskNeumannField, BoundaryFlux]:
    """Experimento completo a escala física 'scale': se reescala a la unidad, se elige R y se resuelve Neumann"""
    center = np.zeros(plan.domain.dimension) if center is None else np.asarray(center, dtype=float)
    cloud = PairCloud.from_plan(plan, center).scaled(1.0 / scale)

    energies = candidate_flux_energies(cloud, None, candidates)
    radius = _smallest_minimizer(energies)
    flux = boundary_flux(cloud, None, radius)
    phi = solve_disk_neumann(flux, radius, k_max or Config.FIELD_CONFIG['k_max'])

    E = local_energy_E(cloud, None, 1.0)
    D = local_data_D(mu, lam, center, scale, m_local) if mu is not None and lam is not None else None
    report = harmonic_residual(cloud, phi, None, 1.0, E=E, D=D, flux=flux)
    report.candidate_energies = energies
    if with_orthogonality:
        report.orthogonality = orthogonality_terms(cloud, phi, None, radius, kde=kde)
    logger.info(f"Aproximación armónica: R={radius:.3f}, E={E:.4g}, residuo={report.residual:.4g}")
    return report, phi, flux
