"""
Eulerian Local Quantities for otlab
Objetos eulerianos de un plan lagrangiano: trayectorias, pares densidad-flujo,
flujo de frontera en ∂B_R y las cantidades locales E, D y la cota L^∞
"""

import os
import sys
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Any, Optional, Tuple, Union

import numpy as np
import pandas as pd

# Añadir el directorio raíz al path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from config import Config
from geometry.torus import TorusDomain, periodic_displacement, displacement, wrap
from measures.measures import DiscreteMeasure
from transport.solvers import TransportPlan, local_wasserstein
from utils import InvalidInputError, DomainError, convert_numpy

logger = logging.getLogger(__name__)

@dataclass(frozen=True, eq=False)
class PairCloud:
    """Pares de un plan en coordenadas locales: origen x, desplazamiento v = y - x y masa"""
    x: np.ndarray
    v: np.ndarray
    mass: np.ndarray
    side_length: float = np.inf

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        x = x.reshape(-1, x.shape[-1] if x.ndim > 1 else 1)
        v = np.asarray(self.v, dtype=np.float64).reshape(x.shape)
        mass = np.asarray(self.mass, dtype=np.float64).reshape(-1)
        if mass.size != x.shape[0]:
            raise InvalidInputError("PairCloud con longitudes inconsistentes")
        object.__setattr__(self, 'x', x)
        object.__setattr__(self, 'v', v)
        object.__setattr__(self, 'mass', mass)

    @classmethod
    def from_plan(cls, plan: TransportPlan, center=None) -> 'PairCloud':
        dom = plan.domain
        center = np.zeros(dom.dimension) if center is None else np.asarray(center, dtype=float)
        if plan.cost_kind == 'periodic':
            x = periodic_displacement(center, plan.source_points, dom)
        else:
            x = plan.source_points - center
        side = dom.side_length if plan.cost_kind == 'periodic' else np.inf
        return cls(x, plan.displacements, plan.mass, side)

    def __len__(self) -> int:
        return int(self.mass.size)

    @property
    def dimension(self) -> int:
        return int(self.x.shape[1])

    @property
    def y(self) -> np.ndarray:
        return self.x + self.v

    def recentered(self, center) -> 'PairCloud':
        return PairCloud(self.x - np.asarray(center, dtype=float), self.v, self.mass, self.side_length)

    def scaled(self, factor: float) -> 'PairCloud':
        """Cambio de escala x -> f·x con masas f^d·m (la densidad de referencia se conserva)"""
        if factor <= 0:
            raise InvalidInputError(f"Factor de escala inválido: {factor}")
        return PairCloud(self.x * factor, self.v * factor, self.mass * factor ** self.dimension,
                         self.side_length * factor)

    def with_displacements(self, v: np.ndarray) -> 'PairCloud':
        return PairCloud(self.x, v, self.mass, self.side_length)

    def select(self, mask: np.ndarray) -> 'PairCloud':
        return PairCloud(self.x[mask], self.v[mask], self.mass[mask], self.side_length)

    def window_mask(self, radius: float) -> np.ndarray:
        """Pares con x o y en B_radius(0)"""
        r2 = radius * radius
        return (np.sum(self.x ** 2, axis=1) < r2) | (np.sum(self.y ** 2, axis=1) < r2)

PairData = Union[TransportPlan, PairCloud]

def as_pair_cloud(data: PairData, center=None) -> PairCloud:
    """Normaliza un plan o una nube de pares a coordenadas centradas"""
    if isinstance(data, PairCloud):
        return data if center is None else data.recentered(center)
    if isinstance(data, TransportPlan):
        return PairCloud.from_plan(data, center)
    raise InvalidInputError(f"Se esperaba TransportPlan o PairCloud, recibido {type(data).__name__}")

def _check_window(cloud: PairCloud, radius: float):
    if not radius < 0.5 * cloud.side_length:
        raise InvalidInputError(f"La ventana de radio {radius:g} no cabe en el toro (L = {cloud.side_length:g})")

# Trayectorias y pares densidad-flujo

def trajectory(x, y, t: float, dom: TorusDomain, cost: str = 'periodic') -> np.ndarray:
    """X_t = (1-t)x + t·y con y anclado en su representante mínimo alrededor de x, reducido al toro"""
    if not 0.0 <= t <= 1.0:
        raise InvalidInputError(f"t fuera de [0, 1]: {t}")
    xa = np.asarray(x, dtype=float)
    return wrap(xa + t * displacement(xa, y, dom, cost), dom)

def density_pairing(plan: TransportPlan, zeta, t: float) -> float:
    """∫ζ dρ_t = Σ masa·ζ(X_t)"""
    positions = trajectory(plan.source_points, plan.target_points, t, plan.domain, plan.cost_kind)
    return float(np.sum(plan.mass * np.asarray(zeta(positions), dtype=float)))

def flux_pairing(plan: TransportPlan, xi, t: float) -> float:
    """∫ξ·dj_t = Σ masa·ξ(X_t)·(y - x)"""
    positions = trajectory(plan.source_points, plan.target_points, t, plan.domain, plan.cost_kind)
    values = np.asarray(xi(positions), dtype=float).reshape(positions.shape)
    return float(np.sum(plan.mass * np.einsum('ij,ij->i', values, plan.displacements)))

# Cantidades locales

def local_energy_E(data: PairData, center=None, radius: float = 1.0, window_factor: float = 6.0) -> float:
    """(1/R^{d+2}) Σ masa·|y - x|² sobre pares con x o y en B_{6R}"""
    cloud = as_pair_cloud(data, center)
    _check_window(cloud, window_factor * radius)
    mask = cloud.window_mask(window_factor * radius)
    energy = np.sum(cloud.mass[mask] * np.sum(cloud.v[mask] ** 2, axis=1))
    return float(energy / radius ** (cloud.dimension + 2))

def local_data_terms(mu: DiscreteMeasure, lam: DiscreteMeasure, center, radius: float,
                     m_local: Optional[int] = None, window_factor: float = 6.0) -> Dict[str, float]:
    """Los cuatro términos de D por separado, con las intensidades locales"""
    if mu.domain != lam.domain:
        raise InvalidInputError("Las medidas viven en dominios distintos")
    window = window_factor * radius
    if not window < mu.domain.half:
        raise InvalidInputError(f"6R = {window:g} debe ser menor que L/2 = {mu.domain.half:g}")
    m_local = m_local or Config.CAMPANATO_CONFIG['m_local']
    d = mu.domain.dimension

    w_mu, kappa_mu = local_wasserstein(mu, center, window, m_local)
    w_lam, kappa_lam = local_wasserstein(lam, center, window, m_local)
    scale = radius ** (d + 2)
    return {
        'transport_mu': w_mu ** 2 / scale,
        'intensity_mu': (kappa_mu - 1.0) ** 2 / kappa_mu,
        'transport_lambda': w_lam ** 2 / scale,
        'intensity_lambda': (kappa_lam - 1.0) ** 2 / kappa_lam,
        'kappa_mu': kappa_mu,
        'kappa_lambda': kappa_lam,
        'm_local': int(m_local)
    }

def local_data_D(mu: DiscreteMeasure, lam: DiscreteMeasure, center, radius: float,
                 m_local: Optional[int] = None) -> float:
    """D = W²(μ,κ_μ)/R^{d+2} + (κ_μ-1)²/κ_μ + W²(λ,κ_λ)/R^{d+2} + (κ_λ-1)²/κ_λ en B_{6R}"""
    terms = local_data_terms(mu, lam, center, radius, m_local)
    return float(terms['transport_mu'] + terms['intensity_mu'] + terms['transport_lambda'] + terms['intensity_lambda'])

def linf_check(data: PairData, center, radius: float, E: float, D: float,
               window_factor: float = 5.0) -> Tuple[float, float]:
    """Máximo desplazamiento en la ventana B_{5R} y su cociente con R·(E+D)^{1/(d+2)}"""
    if not E + D > 0:
        raise InvalidInputError(f"Se requiere E + D > 0 (E={E}, D={D})")
    cloud = as_pair_cloud(data, center)
    mask = cloud.window_mask(window_factor * radius)
    lengths = np.sqrt(np.sum(cloud.v[mask] ** 2, axis=1))
    max_disp = float(np.max(lengths, initial=0.0))
    ratio = max_disp / (radius * (E + D) ** (1.0 / (cloud.dimension + 2)))
    return max_disp, float(ratio)

@dataclass
class LocalStats:
    """E, D e intensidades locales en una bola"""
    radius: float
    E: float
    D: float
    kappa_mu: float
    kappa_lambda: float
    max_displacement: float
    linf_ratio: Optional[float] = None
    terms: Dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.E < 0 or self.D < 0:
            raise InvalidInputError(f"E y D deben ser no negativos (E={self.E}, D={self.D})")

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy({
            'R': self.radius,
            'E': self.E,
            'D': self.D,
            'kappa_mu': self.kappa_mu,
            'kappa_lambda': self.kappa_lambda,
            'max_displacement': self.max_displacement,
            'linf_ratio': self.linf_ratio,
            'terms': self.terms
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

def local_stats(plan: TransportPlan, mu: DiscreteMeasure, lam: DiscreteMeasure, center, radius: float,
                m_local: Optional[int] = None) -> LocalStats:
    """Reúne E, D, κ_μ, κ_λ y la cota L^∞ en B_{5R}"""
    E = local_energy_E(plan, center, radius)
    terms = local_data_terms(mu, lam, center, radius, m_local)
    D = terms['transport_mu'] + terms['intensity_mu'] + terms['transport_lambda'] + terms['intensity_lambda']
    if E + D > 0:
        max_disp, ratio = linf_check(plan, center, radius, E, D)
    else:
        max_disp, ratio = 0.0, 0.0
    logger.debug(f"local_stats: R={radius:g}, E={E:.4g}, D={D:.4g}")
    return LocalStats(radius=float(radius), E=E, D=float(D), kappa_mu=terms['kappa_mu'],
                      kappa_lambda=terms['kappa_lambda'], max_displacement=max_disp, linf_ratio=ratio,
                      terms=terms)

# Flujo de frontera

@dataclass
class BoundaryFlux:
    """Medida f = ν·j en ∂B_R × (0,1), binada en ángulo y tiempo"""
    radius: float
    n_angle: int
    n_time: int
    bins: np.ndarray
    event_angles: np.ndarray
    event_times: np.ndarray
    event_masses: np.ndarray
    tangential_skipped: int = 0
    moving_pairs: int = 0
    angular_smoothing: float = 0.0

    @property
    def angle_edges(self) -> np.ndarray:
        return np.linspace(0.0, 2.0 * np.pi, self.n_angle + 1)

    @property
    def time_edges(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.n_time + 1)

    @property
    def arc_length(self) -> float:
        return 2.0 * np.pi * self.radius / self.n_angle

    @property
    def net_mass(self) -> float:
        return float(self.bins.sum())

    @property
    def mean_profile(self) -> np.ndarray:
        """f̄ por bin angular: suma temporal dividida por la longitud de arco del bin"""
        return self.bins.sum(axis=1) / self.arc_length

    def flux_energy(self) -> float:
        """∫_{∂B_R}∫₀¹ f² de la densidad constante por bin"""
        return float(np.sum(self.bins ** 2) / (self.arc_length / self.n_time))

    def mean_flux_energy(self) -> float:
        """∫_{∂B_R} f̄²"""
        return float(np.sum(self.mean_profile ** 2) * self.arc_length)

    def fourier_coefficients(self, k_max: int) -> Tuple[float, np.ndarray, np.ndarray]:
        """(g₀, a_k, b_k) de f̄ directamente desde los cruces, con suavizado angular gaussiano opcional"""
        k = np.arange(1, k_max + 1)
        masses = self.event_masses
        g0 = float(masses.sum() / (2.0 * np.pi * self.radius))
        phases = np.outer(k, self.event_angles)
        a = (np.cos(phases) @ masses) / (np.pi * self.radius)
        b = (np.sin(phases) @ masses) / (np.pi * self.radius)
        if self.angular_smoothing > 0:
            damping = np.exp(-0.5 * (k * self.angular_smoothing) ** 2)
            a, b = a * damping, b * damping
        return g0, a, b

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy({
            'R': self.radius,
            'n_angle': self.n_angle,
            'n_time': self.n_time,
            'bins': self.bins,
            'mean_profile': self.mean_profile,
            'net_mass': self.net_mass,
            'tangential_skipped': self.tangential_skipped,
            'moving_pairs': self.moving_pairs,
            'angular_smoothing': self.angular_smoothing
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_frame(self) -> pd.DataFrame:
        angle_edges, time_edges = self.angle_edges, self.time_edges
        ia, it = np.meshgrid(np.arange(self.n_angle), np.arange(self.n_time), indexing='ij')
        ia, it = ia.reshape(-1), it.reshape(-1)
        return pd.DataFrame({
            'angle_lo': angle_edges[ia],
            'angle_hi': angle_edges[ia + 1],
            't_lo': time_edges[it],
            't_hi': time_edges[it + 1],
            'mass': self.bins.reshape(-1)
        })

    def to_csv(self, path: str):
        self.to_frame().to_csv(path, index=False, float_format='%.12g')

def boundary_flux(data: PairData, center=None, radius: float = 1.0, n_angle: Optional[int] = None,
                  n_time: Optional[int] = None, angular_smoothing: Optional[float] = None) -> BoundaryFlux:
    """Cruces de las trayectorias rectas con ∂B_R: + salientes, - entrantes"""
    n_angle = n_angle or Config.FLUX_CONFIG['n_angle']
    n_time = n_time or Config.FLUX_CONFIG['n_time']
    smoothing = Config.FLUX_CONFIG['angular_smoothing'] if angular_smoothing is None else angular_smoothing
    cloud = as_pair_cloud(data, center)
    _check_window(cloud, radius)
    if cloud.dimension != 2:
        raise InvalidInputError("El flujo de frontera angular solo está definido en d = 2")

    x, v, mass = cloud.x, cloud.v, cloud.mass
    A = np.sum(v * v, axis=1)
    B = 2.0 * np.sum(x * v, axis=1)
    C = np.sum(x * x, axis=1) - radius * radius
    moving = A > 0
    disc = np.where(moving, B * B - 4.0 * A * C, -np.inf)
    tangential = moving & (np.abs(disc) < Config.FLUX_CONFIG['tangential_threshold'])
    crossing = moving & (disc >= Config.FLUX_CONFIG['tangential_threshold'])

    root = np.sqrt(np.where(crossing, disc, 0.0))
    denom = np.where(crossing, 2.0 * A, 1.0)
    t_out = (-B + root) / denom
    t_in = (-B - root) / denom

    times, signs, index = [], [], []
    for t_root, sign in ((t_out, 1.0), (t_in, -1.0)):
        hit = crossing & (t_root > 0.0) & (t_root < 1.0)
        idx = np.nonzero(hit)[0]
        times.append(t_root[idx])
        signs.append(np.full(idx.size, sign))
        index.append(idx)
    times = np.concatenate(times)
    signs = np.concatenate(signs)
    index = np.concatenate(index)
    order = np.lexsort((signs, index))
    times, signs, index = times[order], signs[order], index[order]

    points = x[index] + times[:, None] * v[index]
    angles = np.mod(np.arctan2(points[:, 1], points[:, 0]), 2.0 * np.pi)
    event_masses = signs * mass[index]

    angle_bin = np.minimum((angles / (2.0 * np.pi) * n_angle).astype(np.int64), n_angle - 1)
    time_bin = np.minimum((times * n_time).astype(np.int64), n_time - 1)
    flat = angle_bin * n_time + time_bin
    bins = np.bincount(flat, weights=event_masses, minlength=n_angle * n_time).reshape(n_angle, n_time)

    skipped = int(tangential.sum())
    if skipped:
        logger.debug(f"boundary_flux: {skipped} cruces tangenciales descartados en R={radius:g}")
    return BoundaryFlux(radius=float(radius), n_angle=int(n_angle), n_time=int(n_time), bins=bins,
                        event_angles=angles, event_times=times, event_masses=event_masses,
                        tangential_skipped=skipped, moving_pairs=int(moving.sum()),
                        angular_smoothing=float(smoothing))

def flux_balance(data: PairData, center=None, radius: float = 1.0) -> float:
    """Masa que empieza en B_R menos masa que termina en B_R"""
    cloud = as_pair_cloud(data, center)
    r2 = radius * radius
    start = np.sum(cloud.mass[np.sum(cloud.x ** 2, axis=1) < r2])
    end = np.sum(cloud.mass[np.sum(cloud.y ** 2, axis=1) < r2])
    return float(start - end)
