"""
Torus Geometry for otlab
Geometría periódica del toro Q_L = [-L/2, L/2)^d: reducción, desplazamientos mínimos y bolas
"""

import os
import sys
import logging
from dataclasses import dataclass
from typing import Dict, Any

import numpy as np

# Añadir el directorio raíz al path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from config import Config
from utils import InvalidInputError

logger = logging.getLogger(__name__)

COST_KINDS = ('periodic', 'euclidean')

@dataclass(frozen=True)
class TorusDomain:
    """Toro plano de lado L y dimensión d"""
    side_length: float
    dimension: int = Config.GEOMETRY_CONFIG['default_dimension']

    def __post_init__(self):
        if not np.isfinite(self.side_length) or self.side_length <= 0:
            raise InvalidInputError(f"Lado del toro inválido: {self.side_length}")
        if int(self.dimension) != self.dimension or self.dimension < 1:
            raise InvalidInputError(f"Dimensión inválida: {self.dimension}")

    @property
    def half(self) -> float:
        return 0.5 * self.side_length

    @property
    def volume(self) -> float:
        return float(self.side_length) ** self.dimension

    def wrap(self, points) -> np.ndarray:
        return wrap(points, self)

    def contains(self, points) -> bool:
        """True si todas las coordenadas están en [-L/2, L/2)"""
        arr = np.asarray(points, dtype=float)
        return bool(np.all(arr >= -self.half) and np.all(arr < self.half))

    def to_dict(self) -> Dict[str, Any]:
        return {'L': float(self.side_length), 'd': int(self.dimension)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'TorusDomain':
        return cls(side_length=float(data['L']), dimension=int(data['d']))

def _as_points(points, dom: TorusDomain) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0 or arr.shape[-1] != dom.dimension:
        raise InvalidInputError(f"Se esperaban puntos de dimensión {dom.dimension}, recibido shape {arr.shape}")
    return arr

def wrap(points, dom: TorusDomain) -> np.ndarray:
    """Reduce cada coordenada módulo L al intervalo [-L/2, L/2)"""
    arr = _as_points(points, dom)
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError("Coordenada no finita")
    L = dom.side_length
    wrapped = arr - L * np.floor((arr + dom.half) / L)
    # el redondeo puede dejar valores exactamente en L/2
    wrapped = np.where(wrapped >= dom.half, wrapped - L, wrapped)
    wrapped = np.where(wrapped < -dom.half, wrapped + L, wrapped)
    return wrapped

def periodic_displacement(x, y, dom: TorusDomain) -> np.ndarray:
    """Representante de y - x de norma mínima; empates hacia la componente no negativa"""
    xa = _as_points(x, dom)
    ya = _as_points(y, dom)
    L = dom.side_length
    diff = ya - xa
    return diff - L * np.ceil(diff / L - 0.5)

def euclidean_displacement(x, y, dom: TorusDomain) -> np.ndarray:
    return _as_points(y, dom) - _as_points(x, dom)

def displacement(x, y, dom: TorusDomain, cost: str = 'periodic') -> np.ndarray:
    """Desplazamiento según el tipo de coste"""
    if cost == 'periodic':
        return periodic_displacement(x, y, dom)
    if cost == 'euclidean':
        return euclidean_displacement(x, y, dom)
    raise InvalidInputError(f"Tipo de coste desconocido: {cost}")

def periodic_dist2(x, y, dom: TorusDomain):
    """Distancia geodésica al cuadrado en el toro"""
    disp = periodic_displacement(x, y, dom)
    result = np.sum(disp * disp, axis=-1)
    return float(result) if np.ndim(result) == 0 else result

def in_ball(points, center, radius: float, dom: TorusDomain) -> np.ndarray:
    """Máscara de puntos a distancia periódica < radius del centro"""
    disp = periodic_displacement(center, points, dom)
    return np.sum(disp * disp, axis=-1) < radius * radius

def ball_volume(radius: float, dimension: int) -> float:
    """Volumen de la bola euclídea de radio dado"""
    from scipy.special import gamma
    return float(np.pi ** (dimension / 2.0) / gamma(dimension / 2.0 + 1.0) * radius ** dimension)

def cost_matrix(x, y, dom: TorusDomain, cost: str = 'periodic', block_rows: int = None) -> np.ndarray:
    """Matriz de costes cuadráticos calculada por bloques de filas"""
    xa = _as_points(x, dom).reshape(-1, dom.dimension)
    ya = _as_points(y, dom).reshape(-1, dom.dimension)
    block_rows = block_rows or Config.SOLVER_CONFIG['cost_block_rows']

    matrix = np.empty((xa.shape[0], ya.shape[0]), dtype=np.float64)
    for start in range(0, xa.shape[0], block_rows):
        stop = min(start + block_rows, xa.shape[0])
        disp = displacement(xa[start:stop, None, :], ya[None, :, :], dom, cost)
        matrix[start:stop] = np.einsum('ijk,ijk->ij', disp, disp)
    return matrix
