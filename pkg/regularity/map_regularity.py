"""
Map Regularity for otlab
Mecanismo de ε-regularidad sobre mapas de transporte sintéticos: exceso E(T,R),
paso de mejora con renormalización afín y decaimiento de Campanato
"""

import os
import sys
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Any, Optional, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.stats import qmc

# Añadir el directorio raíz al path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from config import Config
from eulerian.eulerian_local import PairCloud, boundary_flux, BoundaryFlux
from fields.field_solvers import DiskNeumannField, solve_disk_neumann, disk_derivatives_at_origin
from geometry.torus import TorusDomain
from transport.solvers import TransportPlan, plan_from_arrays
from utils import InvalidInputError, SamplingError, StepRejectedError, convert_numpy

logger = logging.getLogger(__name__)

MapFunction = Callable[[np.ndarray], np.ndarray]

@dataclass(frozen=True, eq=False)
class SampledMap:
    """Mapa T muestreado en una bola con pesos de cuadratura"""
    points: np.ndarray
    weights: np.ndarray
    values: np.ndarray
    region_radius: float
    scale: float = 1.0
    func: Optional[MapFunction] = None
    seed: int = 0

    def __post_init__(self):
        points = np.asarray(self.points, dtype=np.float64)
        weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        values = np.asarray(self.values, dtype=np.float64).reshape(points.shape)
        if weights.size != points.shape[0]:
            raise InvalidInputError("Pesos y puntos de longitudes distintas")
        if np.any(weights <= 0):
            raise InvalidInputError("Los pesos de cuadratura deben ser positivos")
        area = np.pi * self.region_radius ** 2
        if abs(weights.sum() - area) > 1e-9 * area:
            raise InvalidInputError(f"Σ pesos = {weights.sum():.12g} distinto del área {area:.12g}")
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'weights', weights)
        object.__setattr__(self, 'values', values)

    def __len__(self) -> int:
        return int(self.weights.size)

    @property
    def displacements(self) -> np.ndarray:
        return self.values - self.points

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        if self.func is None:
            raise InvalidInputError("El mapa muestreado no tiene función asociada para remuestrear")
        return np.asarray(self.func(np.asarray(x, dtype=float)), dtype=float)

    def as_pair_cloud(self) -> PairCloud:
        return PairCloud(self.points, self.displacements, self.weights)

    def as_plan(self) -> TransportPlan:
        """Plan (id, T)#muestras con coste euclídeo en un toro auxiliar que contiene la región"""
        reach = float(np.max(np.abs(self.values), initial=0.0))
        side = 4.0 * max(self.region_radius, reach, 1.0)
        return plan_from_arrays(self.points, self.values, self.weights, TorusDomain(side, 2), 'euclidean', 'sampled_map')

@dataclass
class AffineFrame:
    """Renormalización afín x -> B(T(Bx) - b) con B simétrica y det B = 1"""
    B: np.ndarray
    b: np.ndarray
    A: Optional[np.ndarray] = None
    trace_removed: float = 0.0
    good_radius: Optional[float] = None

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        if abs(np.linalg.det(self.B) - 1.0) > 1e-12:
            raise InvalidInputError(f"det B = {np.linalg.det(self.B):.15g} distinto de 1")
        if np.max(np.abs(self.B - self.B.T)) > 1e-12:
            raise InvalidInputError("B no es simétrica")

    def apply(self, func: MapFunction) -> MapFunction:
        B, b = self.B, self.b

        def renormalized(x: np.ndarray) -> np.ndarray:
            return (np.asarray(func(np.asarray(x) @ B)) - b) @ B
        return renormalized

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy({'B': self.B, 'b': self.b, 'A': self.A, 'trace_removed': self.trace_removed,
                              'good_radius': self.good_radius})

# Mapas sintéticos

def affine_map(M, b=None) -> MapFunction:
    """x -> Mx + b"""
    M = np.asarray(M, dtype=float)
    shift = np.zeros(M.shape[0]) if b is None else np.asarray(b, dtype=float)

    def mapping(x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ M.T + shift
    return mapping

def harmonic_test_map(delta: float) -> MapFunction:
    """T = ∇ψ con ψ = |x|²/2 + δ·(Re(z³)/30 + cos(x₁/4)·cosh(x₂/4))"""
    def mapping(x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        x1, x2 = x[..., 0], x[..., 1]
        g1 = (x1 ** 2 - x2 ** 2) / 10.0 - 0.25 * np.sin(x1 / 4.0) * np.cosh(x2 / 4.0)
        g2 = -x1 * x2 / 5.0 + 0.25 * np.cos(x1 / 4.0) * np.sinh(x2 / 4.0)
        return x + delta * np.stack([g1, g2], axis=-1)
    return mapping

def sample_map(func: MapFunction, region_radius: float, n_samples: Optional[int] = None, seed: int = 0,
               scale: float = 1.0) -> SampledMap:
    """Muestras Halton aleatorizadas en B_ρ con pesos iguales |B_ρ|/n"""
    n_samples = n_samples or Config.REGULARITY_CONFIG['n_samples']
    if region_radius <= 0 or n_samples < 1:
        raise InvalidInputError(f"Región o tamaño de muestra inválidos: {region_radius}, {n_samples}")
    sampler = qmc.Halton(d=2, scramble=True, seed=seed)
    collected: List[np.ndarray] = []
    count = 0
    while count < n_samples:
        batch = (2.0 * sampler.random(int(1.3 * (n_samples - count)) + 16) - 1.0) * region_radius
        batch = batch[np.sum(batch ** 2, axis=1) < region_radius ** 2]
        collected.append(batch)
        count += batch.shape[0]
    points = np.concatenate(collected)[:n_samples]
    weights = np.full(n_samples, np.pi * region_radius ** 2 / n_samples)
    return SampledMap(points, weights, func(points), float(region_radius), float(scale), func, int(seed))

# Exceso y flujo

def check_coverage(T: SampledMap, radius: float, gap: float):
    """SamplingError si alguna bola de radio 'gap' dentro de B_radius queda sin muestras"""
    if T.region_radius < radius * (1.0 - 1e-12):
        raise SamplingError(f"La región muestreada (ρ = {T.region_radius:g}) no cubre B_{radius:g}")
    step = 0.5 * gap
    axis = np.arange(-radius + 0.5 * step, radius, step)
    query_points = np.stack(np.meshgrid(axis, axis, indexing='ij'), axis=-1).reshape(-1, 2)
    query_points = query_points[np.sum(query_points ** 2, axis=1) < (radius - gap) ** 2]
    if query_points.size == 0:
        return
    distance, _ = cKDTree(T.points).query(query_points)
    # una sonda a distancia > gap de toda muestra es centro de una bola vacía
    worst = float(distance.max())
    if worst > gap:
        raise SamplingError(f"Hueco de muestreo de radio {worst:.3g} > {gap:.3g} en B_{radius:g}")

def map_excess(T: SampledMap, radius: float, window_factor: float = 6.0) -> float:
    """E(T,R) = (1/R^{d+2}) ∫_{B_{6R}} |T(x) - x|²"""
    window = window_factor * radius
    check_coverage(T, window, radius / 8.0)
    inside = np.sum(T.points ** 2, axis=1) < window ** 2
    integrand = np.sum(T.displacements[inside] ** 2, axis=1)
    return float(np.sum(T.weights[inside] * integrand) / radius ** (T.points.shape[1] + 2))

def map_boundary_flux(T: SampledMap, radius: float, n_angle: Optional[int] = None,
                      n_time: Optional[int] = None) -> BoundaryFlux:
    """Flujo de (id, T)#Lebesgue por ∂B_R con cuadratura polar estratificada en la corona de alcance"""
    reach = float(np.max(np.sqrt(np.sum(T.displacements ** 2, axis=1)), initial=0.0))
    if reach == 0.0:
        return boundary_flux(PairCloud(np.empty((0, 2)), np.empty((0, 2)), np.empty(0)), None, radius, n_angle, n_time)
    half_width = min(1.25 * reach, radius)
    if radius + half_width > T.region_radius and T.func is None:
        raise SamplingError("La corona de cruce excede la región muestreada")

    n_theta = Config.REGULARITY_CONFIG['annulus_angles']
    n_r = Config.REGULARITY_CONFIG['annulus_radii']
    r_edges = np.linspace(radius - half_width, radius + half_width, n_r + 1)
    r_mid = 0.5 * (r_edges[:-1] + r_edges[1:])
    theta = 2.0 * np.pi * (np.arange(n_theta) + 0.5) / n_theta
    rr, tt = np.meshgrid(r_mid, theta, indexing='ij')
    points = np.column_stack([(rr * np.cos(tt)).reshape(-1), (rr * np.sin(tt)).reshape(-1)])
    weights = (rr * (r_edges[1] - r_edges[0]) * (2.0 * np.pi / n_theta)).reshape(-1)
    values = T.evaluate(points)
    return boundary_flux(PairCloud(points, values - points, weights), None, radius, n_angle, n_time)

# Paso de mejora

def tracefree_exponential(M: np.ndarray) -> np.ndarray:
    """exp(M) para M simétrica de traza nula; forma cerrada cosh/sinh en d = 2"""
    M = np.asarray(M, dtype=float)
    if M.shape != (2, 2):
        from scipy.linalg import expm
        return expm(M)
    sigma = float(np.sqrt(max(M[0, 0] ** 2 + M[0, 1] * M[1, 0], 0.0)))
    if sigma == 0.0:
        return np.eye(2)
    result = np.cosh(sigma) * np.eye(2) + (np.sinh(sigma) / sigma) * M
    return 0.5 * (result + result.T)

def neumann_for_map(T: SampledMap, scale: float, k_max: Optional[int] = None) -> Tuple[DiskNeumannField, BoundaryFlux]:
    """Radio bueno en (3R, 4R) por mínima energía de flujo y solución de Neumann"""
    n_candidates = Config.HARMONIC_CONFIG['n_candidates']
    lo, hi = Config.HARMONIC_CONFIG['candidate_range']
    candidates = scale * (lo + (hi - lo) * (np.arange(n_candidates) + 0.5) / n_candidates)
    best, best_energy = None, np.inf
    for radius in candidates:
        flux = map_boundary_flux(T, float(radius))
        energy = flux.flux_energy()
        if energy < best_energy:
            best, best_energy = flux, energy
    phi = solve_disk_neumann(best, best.radius, k_max or Config.REGULARITY_CONFIG['k_max'])
    return phi, best

def one_step(T: SampledMap, phi: Optional[DiskNeumannField] = None, theta: Optional[float] = None,
             n_samples: Optional[int] = None) -> Tuple[AffineFrame, SampledMap]:
    """Un paso de mejora: b = ∇Φ(0), B = exp(-A/2) con A = ∇²Φ(0) sin traza, T̂(x) = B(T(Bx) - b)"""
    theta = theta or Config.REGULARITY_CONFIG['theta']
    scale = T.scale
    if phi is None:
        phi, _ = neumann_for_map(T, scale)

    gradient, hessian = disk_derivatives_at_origin(phi)
    d = hessian.shape[0]
    trace = float(np.trace(hessian))
    A = hessian - trace / d * np.eye(d)
    norm = float(np.linalg.norm(A, 2))
    diagnostics = {'A': A.tolist(), 'norm_A': norm, 'trace_removed': trace, 'b': gradient.tolist(),
                   'good_radius': phi.radius, 'scale': scale}
    if norm > Config.REGULARITY_CONFIG['max_step_norm']:
        raise StepRejectedError(f"‖A‖ = {norm:.3g} fuera del régimen perturbativo", diagnostics=diagnostics)
    if abs(trace) > 1e-8:
        logger.debug(f"one_step: traza {trace:.3g} eliminada de A")

    frame = AffineFrame(B=tracefree_exponential(-0.5 * A), b=gradient, A=A, trace_removed=trace,
                        good_radius=phi.radius)
    renormalized = frame.apply(T.func if T.func is not None else _missing_function)
    new_scale = theta * scale
    T_hat = sample_map(renormalized, 6.0 * new_scale, n_samples or len(T), seed=T.seed + 1, scale=new_scale)
    return frame, T_hat

def _missing_function(x):
    raise InvalidInputError("one_step requiere un mapa con función asociada")

# Decaimiento de Campanato

@dataclass
class DecayTrace:
    """Traza {E_k} de la iteración de Campanato"""
    theta: float
    alpha: float
    rows: List[Dict[str, Any]] = field(default_factory=list)
    stopped_reason: str = ''

    @property
    def excesses(self) -> np.ndarray:
        return np.array([row['E'] for row in self.rows])

    @property
    def ratios(self) -> np.ndarray:
        return np.array([row['ratio'] for row in self.rows[1:]], dtype=float)

    @property
    def target_ratio(self) -> float:
        return self.theta ** (2.0 * self.alpha)

    def to_frame(self) -> pd.DataFrame:
        columns = ['k', 'scale', 'E', 'ratio', 'b_norm', 'A_norm']
        return pd.DataFrame(self.rows, columns=columns)

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format='%.12g')

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy({'theta': self.theta, 'alpha': self.alpha, 'rows': self.rows,
                              'target_ratio': self.target_ratio, 'stopped_reason': self.stopped_reason})

def campanato_decay(T: SampledMap, theta: Optional[float] = None, alpha: Optional[float] = None,
                    steps: int = 2, excess_cap: Optional[float] = None) -> DecayTrace:
    """Itera one_step en escalas θ^k·R y registra E_k y los cocientes E_{k+1}/E_k"""
    theta = theta or Config.REGULARITY_CONFIG['theta']
    alpha = Config.REGULARITY_CONFIG['alpha'] if alpha is None else alpha
    excess_cap = excess_cap or Config.REGULARITY_CONFIG['excess_cap']
    if not 0 < theta <= 1.0 / 7.0 + 1e-15:
        raise InvalidInputError(f"θ debe estar en (0, 1/7]: {theta}")

    trace = DecayTrace(theta=theta, alpha=alpha)
    current = T
    excess = map_excess(current, current.scale)
    if excess > excess_cap:
        raise InvalidInputError(f"E(T, R) = {excess:.3g} supera ε = {excess_cap:.3g}")
    trace.rows.append({'k': 0, 'scale': current.scale, 'E': excess, 'ratio': np.nan, 'b_norm': np.nan,
                       'A_norm': np.nan})

    for k in range(1, steps + 1):
        if current.scale * theta < Config.REGULARITY_CONFIG['min_scale']:
            trace.stopped_reason = 'resolution'
            break
        if excess == 0.0:
            trace.rows.append({'k': k, 'scale': current.scale * theta, 'E': 0.0, 'ratio': 0.0,
                               'b_norm': 0.0, 'A_norm': 0.0})
            current = SampledMap(current.points * theta, current.weights * theta ** 2, current.values * theta,
                                 current.region_radius * theta, current.scale * theta, current.func, current.seed)
            continue
        try:
            frame, current = one_step(current, theta=theta)
        except StepRejectedError as e:
            raise StepRejectedError(str(e), diagnostics=e.diagnostics, partial_trace=trace) from e
        previous = excess
        excess = map_excess(current, current.scale)
        trace.rows.append({
            'k': k,
            'scale': current.scale,
            'E': excess,
            'ratio': excess / previous if previous > 0 else 0.0,
            'b_norm': float(np.linalg.norm(frame.b)),
            'A_norm': float(np.linalg.norm(frame.A, 2))
        })
        logger.debug(f"campanato_decay: k={k}, escala {current.scale:.4g}, E={excess:.4g}")
    else:
        trace.stopped_reason = 'steps'
    return trace
