"""
Field Solvers for otlab
Ecuaciones linealizadas: Poisson periódico espectral, suavizado por calor,
promedios con molificador y problema de Neumann en el disco por series de Fourier
"""

import os
import sys
import struct
import logging
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, Any, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy import integrate, ndimage
from scipy.special import gamma

# Añadir el directorio raíz al path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from config import Config
from geometry.torus import TorusDomain, periodic_displacement
from measures.measures import DiscreteMeasure, grid_centers
from utils import InvalidInputError, ResolutionError

logger = logging.getLogger(__name__)

def is_power_of_two(m: int) -> bool:
    return int(m) == m and m > 0 and (int(m) & (int(m) - 1)) == 0

@dataclass(frozen=True, eq=False)
class ScalarField:
    """Campo periódico en malla m^d de centros de celda con caché espectral"""
    values: np.ndarray
    domain: TorusDomain
    mean_zero: bool = False
    linear_part: Optional[np.ndarray] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        m = values.shape[0]
        if values.ndim != self.domain.dimension or any(s != m for s in values.shape):
            raise InvalidInputError(f"La malla debe ser m^{self.domain.dimension}, recibido {values.shape}")
        if not np.all(np.isfinite(values)):
            raise InvalidInputError("Valores no finitos en el campo")
        if self.mean_zero:
            values = values - values.mean()
        values.setflags(write=False)
        object.__setattr__(self, 'values', values)
        if self.linear_part is not None:
            linear = np.asarray(self.linear_part, dtype=np.float64).reshape(self.domain.dimension)
            object.__setattr__(self, 'linear_part', linear)

    @property
    def m(self) -> int:
        return int(self.values.shape[0])

    @property
    def cell_size(self) -> float:
        return self.domain.side_length / self.m

    @cached_property
    def coefficients(self) -> np.ndarray:
        return np.fft.fftn(self.values)

    @cached_property
    def wavenumbers(self) -> Tuple[np.ndarray, ...]:
        """ξ = 2πk/L por eje, con forma apta para broadcasting"""
        k = 2.0 * np.pi * np.fft.fftfreq(self.m, d=self.cell_size)
        d = self.domain.dimension
        return tuple(k.reshape([-1 if axis == a else 1 for a in range(d)]) for axis in range(d))

    @cached_property
    def symbol(self) -> np.ndarray:
        """|ξ|² en la malla espectral"""
        return sum(k ** 2 for k in self.wavenumbers)

    @cached_property
    def gradient_grids(self) -> np.ndarray:
        """Gradiente espectral en los nodos (sin la parte lineal); modo de Nyquist anulado"""
        grids = []
        for k in self.wavenumbers:
            k = k.copy()
            if self.m % 2 == 0:
                k[np.abs(np.abs(k) - np.pi / self.cell_size) < 1e-12 * np.pi / self.cell_size] = 0.0
            grids.append(np.real(np.fft.ifftn(1j * k * self.coefficients)))
        return np.stack(grids)

    @cached_property
    def _gradient_splines(self) -> np.ndarray:
        order = Config.FIELD_CONFIG['interpolation_order']
        return np.stack([ndimage.spline_filter(g, order=order, mode='grid-wrap') for g in self.gradient_grids])

    def laplacian(self) -> np.ndarray:
        return np.real(np.fft.ifftn(-self.symbol * self.coefficients))

    def grid_points(self) -> np.ndarray:
        return grid_centers(self.domain, self.m)

    def to_bytes(self) -> bytes:
        """Formato binario OTF1: cabecera (magic, d, L, m) + malla row-major float64 little-endian"""
        header = Config.FIELD_CONFIG['binary_magic'] + struct.pack('<IdQ', self.domain.dimension,
                                                                   self.domain.side_length, self.m)
        return header + np.ascontiguousarray(self.values, dtype='<f8').tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes) -> 'ScalarField':
        if payload[:4] != Config.FIELD_CONFIG['binary_magic']:
            raise InvalidInputError("Cabecera OTF1 inválida")
        dimension, side_length, m = struct.unpack('<IdQ', payload[4:24])
        values = np.frombuffer(payload[24:], dtype='<f8')
        if values.size != m ** dimension:
            raise InvalidInputError("Tamaño de carga OTF1 inconsistente con la cabecera")
        return cls(values.reshape((m,) * dimension), TorusDomain(side_length, dimension))

    def to_csv(self, path: str):
        """Exporta (coordenadas, valor) por celda para graficar"""
        points = self.grid_points()
        frame = pd.DataFrame(points, columns=[f'x{i + 1}' for i in range(self.domain.dimension)])
        frame['value'] = self.values.reshape(-1)
        frame.to_csv(path, index=False, float_format='%.12g')

def rasterize_cic(mu: DiscreteMeasure, m: int) -> np.ndarray:
    """Densidad en malla por asignación bilineal (cloud-in-cell) periódica"""
    dom = mu.domain
    d = dom.dimension
    h = dom.side_length / m
    grid = np.zeros(m ** d)
    if len(mu) == 0:
        return grid.reshape((m,) * d)

    s = (mu.points + dom.half) / h - 0.5
    base = np.floor(s).astype(np.int64)
    frac = s - base
    for corner in itertools.product((0, 1), repeat=d):
        corner = np.asarray(corner)
        index = np.mod(base + corner, m)
        weight = np.prod(np.where(corner == 1, frac, 1.0 - frac), axis=1)
        flat = np.ravel_multi_index(tuple(index.T), (m,) * d)
        grid += np.bincount(flat, weights=mu.masses * weight, minlength=m ** d)
    return grid.reshape((m,) * d) / h ** d

def solve_periodic_poisson(rhs: Union[DiscreteMeasure, np.ndarray], m: Optional[int] = None,
                           domain: Optional[TorusDomain] = None, kappa: Optional[float] = None) -> ScalarField:
    """Resuelve Δφ = rhs en Q_L con φ̂(ξ) = -r̂hs(ξ)/|ξ|², φ̂(0) = 0"""
    if isinstance(rhs, DiscreteMeasure):
        if m is None:
            raise InvalidInputError("Se requiere m para rasterizar una medida")
        domain = rhs.domain
        kappa = rhs.total_mass / domain.volume if kappa is None else kappa
        grid = rasterize_cic(rhs, int(m)) - kappa
        source = 'measure'
    else:
        if domain is None:
            raise InvalidInputError("Se requiere el dominio para un lado derecho en malla")
        grid = np.asarray(rhs, dtype=np.float64)
        m = grid.shape[0]
        scale = float(np.max(np.abs(grid), initial=0.0))
        if abs(float(grid.mean())) > Config.FIELD_CONFIG['mean_tolerance'] * max(scale, np.finfo(float).tiny):
            raise InvalidInputError(f"El lado derecho no tiene media nula: {grid.mean():.3g}")
        source = 'grid'

    if not is_power_of_two(m):
        raise InvalidInputError(f"m debe ser potencia de dos: {m}")
    grid = grid - grid.mean()

    container = ScalarField(grid, domain)
    symbol = container.symbol
    coefficients = container.coefficients
    with np.errstate(divide='ignore', invalid='ignore'):
        phi_hat = np.where(symbol > 0, -coefficients / symbol, 0.0)
    phi = ScalarField(np.real(np.fft.ifftn(phi_hat)), domain, mean_zero=True)

    scale = float(np.max(np.abs(grid), initial=0.0))
    residual = float(np.max(np.abs(phi.laplacian() - grid), initial=0.0))
    relative = residual / scale if scale > 0 else residual
    phi.metadata.update({'residual': relative, 'm': int(m), 'source': source,
                         'kappa': None if kappa is None else float(kappa)})
    logger.debug(f"solve_periodic_poisson: m={m}, residuo relativo {relative:.3g}")
    return phi

def heat_smooth(data: Union[ScalarField, DiscreteMeasure], t: float, m: Optional[int] = None) -> ScalarField:
    """Multiplicación espectral por exp(-t|ξ|²)"""
    if t < 0:
        raise InvalidInputError(f"Tiempo de calor negativo: {t}")
    if isinstance(data, DiscreteMeasure):
        if m is None:
            raise InvalidInputError("Se requiere m para rasterizar una medida")
        data = ScalarField(rasterize_cic(data, int(m)), data.domain)
    if t == 0:
        return data
    smoothed = np.real(np.fft.ifftn(data.coefficients * np.exp(-t * data.symbol)))
    result = ScalarField(smoothed, data.domain, data.mean_zero, data.linear_part)
    result.metadata.update(dict(data.metadata, heat_time=float(t)))
    return result

def eval_gradient(phi: ScalarField, points) -> np.ndarray:
    """Gradiente espectral interpolado con splines cúbicos periódicos en los puntos dados"""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, phi.domain.dimension)
    coords = ((pts + phi.domain.half) / phi.cell_size - 0.5).T
    order = Config.FIELD_CONFIG['interpolation_order']
    grads = np.column_stack([
        ndimage.map_coordinates(spline, coords, order=order, mode='grid-wrap', prefilter=False)
        for spline in phi._gradient_splines
    ])
    if phi.linear_part is not None:
        grads = grads + phi.linear_part
    return grads[0] if single else grads

# Molificador η

def bump(r: np.ndarray) -> np.ndarray:
    """exp(-1/(1-r²)) en r < 1, cero fuera"""
    r = np.asarray(r, dtype=float)
    out = np.zeros_like(r)
    inside = r < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - r[inside] ** 2))
    return out

def bump_normalization(dimension: int) -> float:
    """Z tal que ∫η = 1 en R^d"""
    sphere = 2.0 * np.pi ** (dimension / 2.0) / gamma(dimension / 2.0)
    radial, _ = integrate.quad(lambda r: np.exp(-1.0 / (1.0 - r * r)) * r ** (dimension - 1), 0.0, 1.0,
                               epsabs=1e-14, epsrel=1e-13)
    return float(sphere * radial)

@dataclass
class MollifierResult:
    """η_R ∗ ∇φ en el centro, con la cota de cuadratura"""
    value: np.ndarray
    weight_sum: float
    quadrature_error: float

def mollifier_weights(dom: TorusDomain, m: int, center, radius: float) -> Tuple[np.ndarray, float]:
    """Pesos de cuadratura normalizados de η_R(· - centro) en los nodos; devuelve también Σ sin normalizar"""
    h = dom.side_length / m
    if radius >= dom.half:
        raise InvalidInputError(f"El radio {radius} debe ser menor que L/2")
    if radius < Config.FIELD_CONFIG['min_mollifier_cells'] * h:
        raise ResolutionError(f"R = {radius:g} menor que {Config.FIELD_CONFIG['min_mollifier_cells']:g} celdas (h = {h:g})")
    nodes = grid_centers(dom, m)
    disp = periodic_displacement(np.asarray(center, dtype=float), nodes, dom)
    r = np.sqrt(np.sum(disp ** 2, axis=1)) / radius
    raw = bump(r) / bump_normalization(dom.dimension) / radius ** dom.dimension * h ** dom.dimension
    raw_sum = float(raw.sum())
    return raw / raw_sum, raw_sum

def mollifier_average(phi: ScalarField, center, radius: float) -> MollifierResult:
    """∫ η_R(x - centro) ∇φ(x) dx por cuadratura en la malla del campo"""
    weights, raw_sum = mollifier_weights(phi.domain, phi.m, center, radius)
    grads = phi.gradient_grids.reshape(phi.domain.dimension, -1)
    value = grads @ weights
    if phi.linear_part is not None:
        value = value + phi.linear_part
    error = abs(raw_sum - 1.0) * float(np.max(np.abs(grads), initial=0.0))
    return MollifierResult(value=value, weight_sum=raw_sum, quadrature_error=error)

# Problema de Neumann en el disco

@dataclass(frozen=True, eq=False)
class DiskNeumannField:
    """Φ(r,θ) = c r²/4 + Σ_k r^k (a_k cos kθ + b_k sin kθ)/(k R^{k-1})"""
    radius: float
    c: float
    a: np.ndarray
    b: np.ndarray
    mean_flux: float
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, 'a', np.asarray(self.a, dtype=np.float64).reshape(-1))
        object.__setattr__(self, 'b', np.asarray(self.b, dtype=np.float64).reshape(-1))
        if self.a.size != self.b.size:
            raise InvalidInputError("Coeficientes a_k y b_k de distinta longitud")

    @property
    def k_max(self) -> int:
        return int(self.a.size)

    @property
    def modes(self) -> np.ndarray:
        return np.arange(1, self.k_max + 1)

    @property
    def complex_coefficients(self) -> np.ndarray:
        return self.a - 1j * self.b

    def _powers(self, points) -> Tuple[np.ndarray, np.ndarray, bool]:
        pts = np.asarray(points, dtype=np.float64)
        single = pts.ndim == 1
        pts = pts.reshape(-1, 2)
        w = (pts[:, 0] + 1j * pts[:, 1]) / self.radius
        powers = w[:, None] ** np.arange(self.k_max + 1)[None, :]
        return pts, powers, single

    def value(self, points) -> np.ndarray:
        pts, powers, single = self._powers(points)
        series = powers[:, 1:] @ (self.complex_coefficients / self.modes)
        values = 0.25 * self.c * np.sum(pts ** 2, axis=1) + self.radius * np.real(series)
        return values[0] if single else values

    def normalized_value(self, points) -> np.ndarray:
        """Φ con media nula en B_R"""
        return self.value(points) - self.c * self.radius ** 2 / 8.0

    def gradient(self, points) -> np.ndarray:
        pts, powers, single = self._powers(points)
        derivative = powers[:, :-1] @ self.complex_coefficients
        grads = np.column_stack([0.5 * self.c * pts[:, 0] + np.real(derivative),
                                 0.5 * self.c * pts[:, 1] - np.imag(derivative)])
        return grads[0] if single else grads

    def hessian(self, points) -> np.ndarray:
        pts, powers, single = self._powers(points)
        if self.k_max >= 2:
            weights = self.complex_coefficients[1:] * (self.modes[1:] - 1) / self.radius
            second = powers[:, :self.k_max - 1] @ weights
        else:
            second = np.zeros(pts.shape[0], dtype=complex)
        hess = np.empty((pts.shape[0], 2, 2))
        hess[:, 0, 0] = 0.5 * self.c + np.real(second)
        hess[:, 1, 1] = 0.5 * self.c - np.real(second)
        hess[:, 0, 1] = hess[:, 1, 0] = -np.imag(second)
        return hess[0] if single else hess

    def boundary_normal_derivative(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        k = self.modes
        harmonic = np.cos(np.multiply.outer(theta, k)) @ self.a + np.sin(np.multiply.outer(theta, k)) @ self.b
        return 0.5 * self.c * self.radius + harmonic

    def dirichlet_energy(self) -> float:
        """∫_{B_R} |∇Φ|², exacto modo a modo"""
        radial = np.pi * self.c ** 2 * self.radius ** 4 / 8.0
        return float(radial + np.sum(np.pi * self.radius ** 2 * (self.a ** 2 + self.b ** 2) / self.modes))

    def flux_energy(self) -> float:
        """∫_{∂B_R} f̄² del flujo truncado"""
        return float(self.radius * (2.0 * np.pi * self.mean_flux ** 2 + np.pi * np.sum(self.a ** 2 + self.b ** 2)))

    def total_flux(self) -> float:
        return float(2.0 * np.pi * self.radius * self.mean_flux)

    def to_dict(self) -> Dict[str, Any]:
        return {'radius': float(self.radius), 'c': float(self.c), 'mean_flux': float(self.mean_flux),
                'a': self.a.tolist(), 'b': self.b.tolist(), 'metadata': self.metadata}

def fourier_from_samples(samples: np.ndarray, k_max: int) -> Tuple[float, np.ndarray, np.ndarray]:
    """Coeficientes (g₀, a_k, b_k) de muestras angulares en centros de bin θ_i = 2π(i+½)/N"""
    samples = np.asarray(samples, dtype=np.float64).reshape(-1)
    n = samples.size
    theta = 2.0 * np.pi * (np.arange(n) + 0.5) / n
    k = np.arange(1, k_max + 1)
    a = 2.0 / n * (np.cos(np.outer(k, theta)) @ samples)
    b = 2.0 / n * (np.sin(np.outer(k, theta)) @ samples)
    return float(samples.mean()), a, b

def solve_disk_neumann(flux, radius: float, k_max: Optional[int] = None) -> DiskNeumannField:
    """Neumann en B_R: ΔΦ = c, ν·∇Φ = flujo, con c = (∫flujo)/(πR²)

    flux puede ser un array de muestras angulares, un diccionario
    {'mean', 'a', 'b'} de coeficientes o un objeto con fourier_coefficients()
    y n_angle (flujo de frontera binado).
    """
    if radius <= 0:
        raise InvalidInputError(f"Radio inválido: {radius}")

    if isinstance(flux, dict):
        a = np.asarray(flux.get('a', []), dtype=float)
        b = np.asarray(flux.get('b', []), dtype=float)
        k_max = k_max or max(a.size, 2)
        a = np.pad(a, (0, max(0, k_max - a.size)))[:k_max]
        b = np.pad(b, (0, max(0, k_max - b.size)))[:k_max]
        g0 = float(flux.get('mean', 0.0))
        n_samples = None
        origin = 'coefficients'
    elif hasattr(flux, 'fourier_coefficients'):
        n_samples = int(flux.n_angle)
        k_max = k_max or max(2, n_samples // 4)
        if k_max > n_samples / 2:
            raise InvalidInputError(f"K_max = {k_max} supera la mitad de los bins angulares ({n_samples})")
        g0, a, b = flux.fourier_coefficients(k_max)
        origin = 'boundary_flux'
    else:
        samples = np.asarray(flux, dtype=float).reshape(-1)
        n_samples = samples.size
        k_max = k_max or max(2, n_samples // 4)
        if k_max > n_samples / 2:
            raise InvalidInputError(f"K_max = {k_max} supera la mitad de las muestras angulares ({n_samples})")
        g0, a, b = fourier_from_samples(samples, k_max)
        origin = 'samples'

    if k_max < 2:
        raise InvalidInputError(f"K_max debe ser >= 2: {k_max}")
    c = 2.0 * g0 / radius
    metadata = {'k_max': int(k_max), 'n_samples': n_samples, 'origin': origin}
    return DiskNeumannField(radius=float(radius), c=float(c), a=a, b=b, mean_flux=float(g0), metadata=metadata)

def disk_derivatives_at_origin(phi: DiskNeumannField) -> Tuple[np.ndarray, np.ndarray]:
    """(∇Φ(0), ∇²Φ(0)) a partir de los modos k = 1, 2 y del término c r²/4"""
    a1 = phi.a[0] if phi.k_max >= 1 else 0.0
    b1 = phi.b[0] if phi.k_max >= 1 else 0.0
    a2 = phi.a[1] if phi.k_max >= 2 else 0.0
    b2 = phi.b[1] if phi.k_max >= 2 else 0.0
    gradient = np.array([a1, b1], dtype=float)
    hessian = 0.5 * phi.c * np.eye(2) + np.array([[a2, b2], [b2, -a2]]) / phi.radius
    return gradient, hessian
