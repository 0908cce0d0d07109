"""
Matching and Campanato Cascade for otlab
Emparejamiento Poisson-Lebesgue en el toro: escala de W², residuo frente a ∇φ_L,
desplazamiento promediado, desplazamiento h, cascada de Campanato y r_* empírico
"""

import os
import sys
import time
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Any, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

# Añadir el directorio raíz al path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from config import Config
from eulerian.eulerian_local import PairCloud, boundary_flux, local_energy_E
from fields.field_solvers import (ScalarField, solve_periodic_poisson, heat_smooth, eval_gradient,
                                  mollifier_average, bump, solve_disk_neumann, disk_derivatives_at_origin)
from geometry.torus import TorusDomain, periodic_displacement, wrap
from measures.measures import DiscreteMeasure, sample_poisson, lebesgue_grid, discretization_bound
from transport.solvers import TransportPlan, SolveReport, solve_exact, solve_entropic, local_wasserstein
from utils import InvalidInputError, DomainError, convert_numpy, safe_divide, timing

logger = logging.getLogger(__name__)

@dataclass
class MatchingRecord:
    """Emparejamiento de una muestra de Poisson con la Lebesgue discretizada"""
    side_length: float
    seed: int
    n: int
    w2: float
    wall_time: float
    report: SolveReport
    plan: TransportPlan
    phi: ScalarField
    m: int
    field_m: int
    kappa: float
    empty_resamples: int = 0

    def __post_init__(self):
        if self.n <= 0:
            raise InvalidInputError("El emparejamiento requiere n > 0")
        if self.w2 < 0:
            raise InvalidInputError(f"W² negativo: {self.w2}")

    @property
    def domain(self) -> TorusDomain:
        return self.plan.domain

    @property
    def source(self) -> DiscreteMeasure:
        return self.plan.source

    @property
    def normalized_w2(self) -> float:
        """W²_per(μ, κ)/L^d"""
        return self.w2 / self.domain.volume

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy({
            'L': self.side_length,
            'd': self.domain.dimension,
            'seed': self.seed,
            'n': self.n,
            'w2': self.w2,
            'w2_over_volume': self.normalized_w2,
            'w2_over_volume_log': safe_divide(self.normalized_w2, np.log(self.side_length), default=float('nan')),
            'wall_time': self.wall_time,
            'm': self.m,
            'field_m': self.field_m,
            'kappa': self.kappa,
            'discretization_bound': discretization_bound(self.domain, self.m),
            'empty_resamples': self.empty_resamples,
            'poisson_residual': self.phi.metadata.get('residual'),
            'report': self.report.to_dict()
        })

def _solve(src: DiscreteMeasure, tgt: DiscreteMeasure, solver: str,
           eps_schedule: Optional[Sequence[float]] = None) -> Tuple[TransportPlan, SolveReport]:
    if solver == 'exact':
        return solve_exact(src, tgt, 'periodic')
    if solver == 'entropic':
        return solve_entropic(src, tgt, 'periodic', eps_schedule)
    raise InvalidInputError(f"Solver desconocido: {solver}")

def field_resolution(m: int) -> int:
    """Menor potencia de dos >= m"""
    return 1 << max(int(m) - 1, 0).bit_length()

def match_measure(mu: DiscreteMeasure, m: int, solver: str = 'exact',
                  eps_schedule: Optional[Sequence[float]] = None, seed: int = 0) -> MatchingRecord:
    """Empareja μ con la malla m^d de masa total μ(Q_L) y resuelve Δφ_L = μ - κ"""
    start_time = time.perf_counter()
    dom = mu.domain
    n = len(mu)
    target = lebesgue_grid(dom, m, mu.total_mass)
    kappa = mu.total_mass / dom.volume
    plan, report = _solve(mu, target, solver, eps_schedule)
    field_m = field_resolution(m)
    phi = solve_periodic_poisson(mu, field_m, kappa=kappa)
    return MatchingRecord(
        side_length=dom.side_length, seed=int(seed), n=n, w2=max(plan.total_cost, 0.0),
        wall_time=time.perf_counter() - start_time, report=report, plan=plan, phi=phi, m=int(m),
        field_m=field_m, kappa=float(kappa), empty_resamples=int(mu.metadata.get('empty_resamples', 0))
    )

@timing
def run_matching(side_length: float, seed: int, m: Optional[int] = None, solver: str = 'exact',
                 eps_schedule: Optional[Sequence[float]] = None) -> MatchingRecord:
    """Muestra Poisson de intensidad 1 en Q_L (d = 2), malla objetivo con κ = n/L² y φ_L"""
    dom = TorusDomain(float(side_length), 2)
    m = m or int(Config.EXPERIMENT_CONFIG['grid_factor'] * side_length)
    mu = sample_poisson(dom, 1.0, seed, reject_empty=True)
    record = match_measure(mu, m, solver, eps_schedule, seed)
    logger.info(f"run_matching: L={side_length:g}, semilla {seed}, n={record.n}, W²/L²={record.normalized_w2:.4f}")
    return record

# Residuos frente al campo linealizado

@dataclass
class GradientResidual:
    """(1/L^d) Σ masa·|y - x - ∇φ_{L,t}(x)|²"""
    t: float
    residual: float
    ratio: float
    residual_unsmoothed: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy(self.__dict__)

def _gradient_residual(plan: TransportPlan, phi: ScalarField) -> float:
    grads = eval_gradient(phi, plan.source_points)
    diff = plan.displacements - grads
    return float(np.sum(plan.mass * np.sum(diff ** 2, axis=1)) / plan.domain.volume)

def residual_vs_gradient(record: MatchingRecord, t: Optional[float] = None,
                         with_unsmoothed: bool = True) -> GradientResidual:
    """Residuo con φ suavizado por calor en t (por defecto t = log⁴L), y sin suavizar"""
    L = record.side_length
    t = np.log(L) ** 4 if t is None else float(t)
    if t < 0:
        raise InvalidInputError(f"Tiempo de calor negativo: {t}")
    smoothed = heat_smooth(record.phi, t)
    residual = _gradient_residual(record.plan, smoothed)
    unsmoothed = _gradient_residual(record.plan, record.phi) if with_unsmoothed else None
    return GradientResidual(t=t, residual=residual, ratio=safe_divide(residual, np.log(L), default=float('nan')),
                            residual_unsmoothed=unsmoothed)

@dataclass
class AveragedDisplacement:
    """Desplazamiento medio con peso η_R frente a η_R ∗ ∇φ_L"""
    lhs: np.ndarray
    rhs: np.ndarray
    gap: float
    normalized_gap: float
    radius: float
    quadrature_error: float

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy(self.__dict__)

def averaged_displacement(record: MatchingRecord, center, radius: float,
                          rstar: Optional[float] = None) -> AveragedDisplacement:
    """lhs = ∫η_R(x - x̄)(y - x)dπ / ∫η_R(x - x̄)dπ, rhs = η_R ∗ ∇φ_L(x̄) con φ_L sin suavizar"""
    dom = record.domain
    if radius > dom.side_length / 4.0:
        raise InvalidInputError(f"R = {radius:g} debe ser <= L/4")
    if rstar is not None and radius < rstar:
        raise InvalidInputError(f"R = {radius:g} por debajo de r_* = {rstar:g}")
    plan = record.plan
    center = np.asarray(center, dtype=float)
    disp = periodic_displacement(center, plan.source_points, dom)
    weights = bump(np.sqrt(np.sum(disp ** 2, axis=1)) / radius) * plan.mass
    total = float(weights.sum())
    if total <= 0:
        raise DomainError(f"Masa nula en la ventana η_R de radio {radius:g}")
    lhs = weights @ plan.displacements / total
    average = mollifier_average(record.phi, center, radius)
    gap = float(np.linalg.norm(lhs - average.value))
    normalized = gap * radius / np.log(radius) if radius > 1 else float('nan')
    return AveragedDisplacement(lhs=lhs, rhs=average.value, gap=gap, normalized_gap=normalized,
                                radius=float(radius), quadrature_error=average.quadrature_error)

def shift_h(source, center, radius: float, n_nodes: Optional[int] = None) -> np.ndarray:
    """h(x̄) = (1/|B_R|) ∫_{∂B_R(x̄)} (x - x̄) ν·∇φ_L por cuadratura angular uniforme"""
    phi = source.phi if isinstance(source, MatchingRecord) else source
    dom = phi.domain
    if not radius < dom.side_length / 4.0:
        raise InvalidInputError(f"R = {radius:g} debe ser < L/4")
    n_nodes = n_nodes or Config.FIELD_CONFIG['boundary_nodes']
    theta = 2.0 * np.pi * (np.arange(n_nodes) + 0.5) / n_nodes
    normals = np.column_stack([np.cos(theta), np.sin(theta)])
    points = wrap(np.asarray(center, dtype=float) + radius * normals, dom)
    grads = eval_gradient(phi, points)
    flux = np.sum(normals * grads, axis=1)
    integral = (radius * normals * flux[:, None]).sum(axis=0) * (2.0 * np.pi * radius / n_nodes)
    return integral / (np.pi * radius ** 2)

# r_* empírico

def dyadic_radii(side_length: float, min_radius: Optional[float] = None) -> List[float]:
    """Radios diádicos desde min_radius hasta L/4"""
    radius = min_radius or Config.CAMPANATO_CONFIG['rstar_min_radius']
    radii = []
    while radius <= side_length / 4.0:
        radii.append(float(radius))
        radius *= 2.0
    return radii

def data_profile(mu: DiscreteMeasure, center=None, radii: Optional[Sequence[float]] = None,
                 m_local: Optional[int] = None) -> Dict[float, float]:
    """(1/R²) W²_{B_R}(μ, κ) en cada radio diádico"""
    center = np.zeros(mu.domain.dimension) if center is None else np.asarray(center, dtype=float)
    radii = dyadic_radii(mu.domain.side_length) if radii is None else radii
    m_local = m_local or Config.CAMPANATO_CONFIG['m_local']
    profile = {}
    for radius in radii:
        try:
            w, _ = local_wasserstein(mu, center, radius, m_local)
            profile[float(radius)] = w ** 2 / radius ** 2
        except DomainError:
            profile[float(radius)] = float('inf')
    return profile

def empirical_rstar(mu: DiscreteMeasure, c_data: Optional[float] = None, center=None,
                    radii: Optional[Sequence[float]] = None, m_local: Optional[int] = None,
                    profile: Optional[Dict[float, float]] = None) -> float:
    """Menor r diádico tal que (1/R²)W²_{B_R} <= C_data·log R para todo R diádico entre r y L/4"""
    c_data = Config.CAMPANATO_CONFIG['c_data'] if c_data is None else c_data
    if c_data <= 0:
        raise InvalidInputError(f"C_data debe ser positivo: {c_data}")
    profile = profile if profile is not None else data_profile(mu, center, radii, m_local)
    rstar = float('inf')
    for radius in sorted(profile, reverse=True):
        if profile[radius] <= c_data * np.log(radius):
            rstar = radius
        else:
            break
    return rstar

# Cascada de Campanato

@dataclass
class CampanatoTrace:
    """Escalas, energías y desplazamientos de la cascada en x̄"""
    center: np.ndarray
    base_radii: List[float] = field(default_factory=list)
    good_radii: List[float] = field(default_factory=list)
    window_energy: List[float] = field(default_factory=list)
    excess: List[float] = field(default_factory=list)
    shifts: List[np.ndarray] = field(default_factory=list)
    energy_ratio: List[float] = field(default_factory=list)
    gradient_ratio: List[float] = field(default_factory=list)
    cumulative_shift: np.ndarray = field(default_factory=lambda: np.zeros(2))
    h: Optional[np.ndarray] = None
    h_gap: Optional[float] = None
    stopped_reason: str = ''
    original_displacements: Optional[np.ndarray] = None
    final_displacements: Optional[np.ndarray] = None

    def restored_displacements(self) -> np.ndarray:
        """Deshace todos los desplazamientos: final + h̃"""
        return self.final_displacements + self.cumulative_shift

    def to_frame(self) -> pd.DataFrame:
        shifts = np.asarray(self.shifts).reshape(-1, 2)
        return pd.DataFrame({
            'k': np.arange(len(self.base_radii)),
            'R': self.base_radii,
            'R_good': self.good_radii,
            'window_energy': self.window_energy,
            'excess': self.excess,
            'shift_x': shifts[:, 0],
            'shift_y': shifts[:, 1],
            'energy_ratio': self.energy_ratio,
            'gradient_ratio': self.gradient_ratio
        })

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy({
            'center': self.center,
            'base_radii': self.base_radii,
            'good_radii': self.good_radii,
            'window_energy': self.window_energy,
            'excess': self.excess,
            'shifts': self.shifts,
            'energy_ratio': self.energy_ratio,
            'gradient_ratio': self.gradient_ratio,
            'h_tilde': self.cumulative_shift,
            'h': self.h,
            'h_gap': self.h_gap,
            'stopped_reason': self.stopped_reason
        })

def _band_radius(cloud: PairCloud, base: float, band: float, n_candidates: int):
    """Radio bueno en [R, (1+band)R) por mínima energía de flujo; empates al menor"""
    best, best_energy = None, np.inf
    for i in range(n_candidates):
        radius = base * (1.0 + band * i / n_candidates)
        flux = boundary_flux(cloud, None, radius)
        energy = flux.flux_energy()
        if energy < best_energy:
            best, best_energy = flux, energy
    return best

@timing
def campanato_cascade(record: MatchingRecord, center, r_target: float, rstar: Optional[float] = None,
                      k_max: Optional[int] = None) -> CampanatoTrace:
    """Itera flujo -> Neumann -> desplazamiento por -∇Φ_k(0) desde R_0 = L/8 dividiendo el radio por dos"""
    if rstar is not None and r_target < rstar:
        raise InvalidInputError(f"r_target = {r_target:g} por debajo de r_* = {rstar:g}")
    cfg = Config.CAMPANATO_CONFIG
    center = np.asarray(center, dtype=float)
    cloud = PairCloud.from_plan(record.plan, center)
    original = np.array(cloud.v)
    original.setflags(write=False)
    cumulative = np.zeros(cloud.dimension)
    trace = CampanatoTrace(center=center, original_displacements=original)

    radius = cfg['initial_radius_fraction'] * record.side_length
    if r_target > radius:
        raise InvalidInputError(f"r_target = {r_target:g} mayor que R_0 = {radius:g}")
    current = cloud
    while radius >= r_target:
        flux = _band_radius(current, radius, cfg['radius_band'], cfg['n_candidates'])
        phi_k = solve_disk_neumann(flux, flux.radius, k_max or Config.FIELD_CONFIG['k_max'])
        gradient, _ = disk_derivatives_at_origin(phi_k)

        inside = current.window_mask(radius)
        window_energy = float(np.sum(current.mass[inside] * np.sum(current.v[inside] ** 2, axis=1)))
        excess = local_energy_E(current, None, radius / 6.0)
        log_r = np.log(radius)
        trace.base_radii.append(float(radius))
        trace.good_radii.append(float(flux.radius))
        trace.window_energy.append(window_energy)
        trace.excess.append(excess)
        trace.shifts.append(gradient)
        trace.energy_ratio.append(window_energy / (radius ** 2 * log_r) if log_r > 0 else float('nan'))
        trace.gradient_ratio.append(float(gradient @ gradient) / log_r if log_r > 0 else float('nan'))

        if not np.isfinite(excess) or excess > cfg['energy_cap']:
            trace.stopped_reason = 'energy_cap'
            logger.warning(f"campanato_cascade: E_k = {excess:.3g} supera el límite en R = {radius:g}")
            break

        cumulative = cumulative + gradient
        current = cloud.with_displacements(original - cumulative)
        radius *= 0.5
    else:
        trace.stopped_reason = 'target'

    trace.cumulative_shift = cumulative
    trace.final_displacements = current.v
    final_radius = trace.base_radii[-1]
    trace.h = shift_h(record, center, final_radius)
    trace.h_gap = float(np.linalg.norm(trace.h - cumulative))
    logger.debug(f"campanato_cascade: {len(trace.base_radii)} escalas, |h - h̃| = {trace.h_gap:.4g}")
    return trace

@dataclass
class MicroscopicBound:
    """sup |y - x - h| en B_{r_*}(x̄) y su normalización"""
    max_deviation: float
    ratio: float
    rstar: float
    window_pairs: int

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy(self.__dict__)

def linf_microscopic(record: MatchingRecord, center, trace: CampanatoTrace, rstar: float) -> MicroscopicBound:
    """Máximo de |y - x - h(x̄)| sobre pares con x en B_{r_*}(x̄), normalizado por r_*(log r_*/r_*²)^{1/4}"""
    if trace.h is None:
        raise InvalidInputError("La traza de Campanato no está completa")
    if not np.isfinite(rstar) or rstar <= 1:
        raise InvalidInputError(f"r_* debe ser finito y > 1: {rstar}")
    cloud = PairCloud.from_plan(record.plan, center)
    inside = np.sum(cloud.x ** 2, axis=1) < rstar ** 2
    if not np.any(inside):
        raise DomainError(f"Ventana B_{rstar:g} vacía")
    deviation = float(np.max(np.sqrt(np.sum((cloud.v[inside] - trace.h) ** 2, axis=1))))
    normalization = rstar * (np.log(rstar) / rstar ** 2) ** 0.25
    return MicroscopicBound(max_deviation=deviation, ratio=deviation / normalization, rstar=float(rstar),
                            window_pairs=int(inside.sum()))
