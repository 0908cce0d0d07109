"""
Measures and Sampling for otlab
Medidas discretas: muestras de Poisson, Lebesgue discretizada en malla y restricciones a bolas
"""

import os
import sys
import json
import struct
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Any, Optional

import numpy as np

# Añadir el directorio raíz al path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from config import Config
from geometry.torus import TorusDomain, wrap, in_ball
from utils import InvalidInputError, ResourceLimitError

logger = logging.getLogger(__name__)

MEASURE_TAGS = ('poisson', 'grid', 'restriction', 'custom')

@dataclass(frozen=True, eq=False)
class DiscreteMeasure:
    """Átomos con masa sobre el toro"""
    points: np.ndarray
    masses: np.ndarray
    domain: TorusDomain
    tag: str = 'custom'
    metadata: Dict[str, Any] = field(default_factory=dict, compare=False)

    def __post_init__(self):
        d = self.domain.dimension
        points = np.asarray(self.points, dtype=np.float64).reshape(-1, d)
        masses = np.asarray(self.masses, dtype=np.float64).reshape(-1)

        if points.shape[0] != masses.shape[0]:
            raise InvalidInputError(f"Número de puntos ({points.shape[0]}) distinto del de masas ({masses.shape[0]})")
        if self.tag not in MEASURE_TAGS:
            raise InvalidInputError(f"Etiqueta de medida desconocida: {self.tag}")
        if masses.size and (not np.all(np.isfinite(masses)) or np.any(masses <= 0)):
            raise InvalidInputError("Todas las masas deben ser positivas y finitas")

        points = wrap(points, self.domain) if points.size else points
        points.setflags(write=False)
        masses.setflags(write=False)
        object.__setattr__(self, 'points', points)
        object.__setattr__(self, 'masses', masses)

    def __len__(self) -> int:
        return int(self.masses.shape[0])

    @property
    def total_mass(self) -> float:
        return float(self.masses.sum())

    def scaled(self, factor: float) -> 'DiscreteMeasure':
        """Multiplica todas las masas por factor > 0"""
        if factor <= 0:
            raise InvalidInputError(f"Factor de escala inválido: {factor}")
        return DiscreteMeasure(self.points, self.masses * factor, self.domain, self.tag, dict(self.metadata))

    def translated(self, shift) -> 'DiscreteMeasure':
        """Traslada todos los átomos (módulo L)"""
        return DiscreteMeasure(self.points + np.asarray(shift, dtype=float), self.masses, self.domain, self.tag,
                               dict(self.metadata))

    def to_json_dict(self) -> Dict[str, Any]:
        atoms = np.column_stack([self.points, self.masses]) if len(self) else np.empty((0, self.domain.dimension + 1))
        return {
            'domain': self.domain.to_dict(),
            'tag': self.tag,
            'atoms': atoms.tolist()
        }

    @classmethod
    def from_json_dict(cls, data: Dict[str, Any]) -> 'DiscreteMeasure':
        domain = TorusDomain.from_dict(data['domain'])
        atoms = np.asarray(data.get('atoms', []), dtype=np.float64).reshape(-1, domain.dimension + 1)
        return cls(atoms[:, :-1], atoms[:, -1], domain, data.get('tag', 'custom'))

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json(cls, text: str) -> 'DiscreteMeasure':
        return cls.from_json_dict(json.loads(text))

    def to_bytes(self) -> bytes:
        """Formato binario OTM1: cabecera (magic, d, L, count) + registros float64 little-endian"""
        magic = Config.SAMPLING_CONFIG['binary_magic']
        header = magic + struct.pack('<IdQ', self.domain.dimension, self.domain.side_length, len(self))
        records = np.column_stack([self.points, self.masses]) if len(self) else np.empty((0, self.domain.dimension + 1))
        return header + np.ascontiguousarray(records, dtype='<f8').tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes, tag: str = 'custom') -> 'DiscreteMeasure':
        magic = Config.SAMPLING_CONFIG['binary_magic']
        if payload[:4] != magic:
            raise InvalidInputError("Cabecera OTM1 inválida")
        dimension, side_length, count = struct.unpack('<IdQ', payload[4:24])
        records = np.frombuffer(payload[24:], dtype='<f8')
        if records.size != count * (dimension + 1):
            raise InvalidInputError("Tamaño de carga OTM1 inconsistente con la cabecera")
        records = records.reshape(count, dimension + 1).astype(np.float64)
        return cls(records[:, :-1], records[:, -1], TorusDomain(side_length, dimension), tag)

def make_rng(seed: int) -> np.random.Generator:
    """Generador contador (Philox) a partir de una semilla de 64 bits"""
    if seed < 0 or seed >= 2 ** 64:
        raise InvalidInputError(f"Semilla fuera de rango de 64 bits: {seed}")
    return np.random.Generator(np.random.Philox(int(seed)))

def sample_poisson(dom: TorusDomain, intensity: float, seed: int, reject_empty: bool = False) -> DiscreteMeasure:
    """Proceso de Poisson homogéneo de intensidad dada en Q_L con átomos de masa 1"""
    if intensity < 0 or not np.isfinite(intensity):
        raise InvalidInputError(f"Intensidad inválida: {intensity}")
    expected = intensity * dom.volume
    if expected >= Config.SAMPLING_CONFIG['poisson_cap']:
        raise ResourceLimitError(f"Intensidad·L^d = {expected:.3g} supera el límite práctico")
    if reject_empty and expected == 0:
        raise InvalidInputError("No se pueden rechazar muestras vacías con intensidad nula")

    rng = make_rng(seed)
    empty_draws = 0
    while True:
        n = int(rng.poisson(expected))
        if n > 0 or not reject_empty:
            break
        empty_draws += 1
        logger.warning(f"Muestra de Poisson vacía (semilla {seed}), remuestreando")
        if empty_draws >= Config.SAMPLING_CONFIG['max_empty_resamples']:
            raise ResourceLimitError(f"Demasiadas muestras vacías consecutivas ({empty_draws})")

    points = rng.uniform(-dom.half, dom.half, size=(n, dom.dimension))
    metadata = {
        'rng_algorithm': Config.SAMPLING_CONFIG['rng_algorithm'],
        'seed': int(seed),
        'intensity': float(intensity),
        'empty_resamples': empty_draws
    }
    return DiscreteMeasure(points, np.ones(n), dom, 'poisson', metadata)

def grid_centers(dom: TorusDomain, m: int) -> np.ndarray:
    """Centros de las m^d celdas, orden row-major"""
    h = dom.side_length / m
    axis = -dom.half + (np.arange(m) + 0.5) * h
    mesh = np.meshgrid(*([axis] * dom.dimension), indexing='ij')
    return np.column_stack([g.reshape(-1) for g in mesh])

def lebesgue_grid(dom: TorusDomain, m: int, total_mass: float) -> DiscreteMeasure:
    """Lebesgue discretizada: m^d átomos en centros de celda con masa total_mass/m^d"""
    if int(m) != m or m < 1:
        raise InvalidInputError(f"Resolución de malla inválida: {m}")
    if total_mass <= 0:
        raise InvalidInputError(f"Masa total inválida: {total_mass}")
    count = int(m) ** dom.dimension
    masses = np.full(count, total_mass / count)
    metadata = {'m': int(m), 'discretization_bound': discretization_bound(dom, m)}
    return DiscreteMeasure(grid_centers(dom, int(m)), masses, dom, 'grid', metadata)

def discretization_bound(dom: TorusDomain, m: int) -> float:
    """Cota d(L/m)^2/4 de W^2(Leb, malla)/L^d"""
    return dom.dimension * (dom.side_length / m) ** 2 / 4.0

def restrict(mu: DiscreteMeasure, center, radius: float) -> DiscreteMeasure:
    """Átomos a distancia periódica < R del centro, masas intactas"""
    if radius >= mu.domain.half:
        raise InvalidInputError(f"El radio {radius} debe ser menor que L/2 = {mu.domain.half}")
    if radius <= 0 or len(mu) == 0:
        return DiscreteMeasure(np.empty((0, mu.domain.dimension)), np.empty(0), mu.domain, 'restriction')
    mask = in_ball(mu.points, np.asarray(center, dtype=float), radius, mu.domain)
    metadata = {'center': np.asarray(center, dtype=float).tolist(), 'radius': float(radius)}
    return DiscreteMeasure(mu.points[mask], mu.masses[mask], mu.domain, 'restriction', metadata)

def measure_from_atoms(atoms: List[List[float]], dom: TorusDomain, tag: str = 'custom') -> DiscreteMeasure:
    """Construye una medida desde filas [x..., masa]"""
    arr = np.asarray(atoms, dtype=np.float64).reshape(-1, dom.dimension + 1)
    return DiscreteMeasure(arr[:, :-1], arr[:, -1], dom, tag)

def density_family(dom: TorusDomain, m: int, delta: float, total_mass: Optional[float] = None) -> DiscreteMeasure:
    """Reordenamiento monótono de la malla con densidad 1 + delta·sin(2πx₁/L)

    Los átomos de la malla uniforme se desplazan en x₁ por la inversa de la
    función de distribución acumulada de la densidad perturbada, de modo que
    la medida resultante tiene la misma masa por átomo.
    """
    if not 0 <= delta < 1:
        raise InvalidInputError(f"delta debe estar en [0, 1): {delta}")
    total_mass = dom.volume if total_mass is None else total_mass
    uniform = lebesgue_grid(dom, m, total_mass)
    if delta == 0:
        return DiscreteMeasure(uniform.points, uniform.masses, dom, 'custom', {'delta': 0.0})

    L = dom.side_length
    k = 2.0 * np.pi / L
    # F(s) = s - δ/k·(cos(k s) - cos(-k L/2)), s ∈ [-L/2, L/2); se invierte por Newton
    target = uniform.points[:, 0]
    s = target.copy()
    for _ in range(50):
        value = s - delta / k * (np.cos(k * s) - np.cos(k * dom.half)) - target
        slope = 1.0 + delta * np.sin(k * s)
        step = value / slope
        s = s - step
        if np.max(np.abs(step)) < 1e-15 * L:
            break
    points = uniform.points.copy()
    points[:, 0] = s
    return DiscreteMeasure(points, uniform.masses, dom, 'custom', {'delta': float(delta), 'm': int(m)})
