"""
Experiment Runner for otlab
Configuración TOML versionada, ejecución sembrada por celdas, persistencia idempotente,
agregación de conjuntos y ajuste del prefactor de la ley log L
"""

import os
import sys
import time
import struct
import logging
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from typing import Callable, Dict, List, Any, Optional, Tuple, Union

import numpy as np
import pandas as pd
import statsmodels.api as sm
from scipy.stats import norm

# Añadir el directorio padre al path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from config import Config
from fields.field_solvers import ScalarField
from geometry.torus import TorusDomain
from harmonic.harmonic_approx import harmonic_approximation
from matching.matching_campanato import (run_matching, residual_vs_gradient, averaged_displacement, dyadic_radii,
                                         data_profile, empirical_rstar, campanato_cascade, linf_microscopic)
from measures.measures import DiscreteMeasure, sample_poisson, lebesgue_grid, density_family, measure_from_atoms
from regularity.map_regularity import harmonic_test_map, sample_map, campanato_decay
from transport.solvers import solve_exact, brute_force_oracle, linear_program_oracle
from utils import (ConfigError, DomainError, InvalidInputError, SystemMonitor, atomic_write_bytes, bootstrap_ci,
                   content_hash, convert_numpy, ensure_directory, read_json, write_json)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = Config.EXPERIMENT_CONFIG['schema_version']
SOLVERS = ('exact', 'entropic')

# Parámetros por tipo de experimento (None = se omite en la serialización)
KIND_PARAMETERS: Dict[str, Dict[str, Any]] = {
    'matching-scaling': {
        'heat_time': None,
        'save_artifacts': True
    },
    'harmonic-approx': {
        'source': 'density-family',
        'deltas': [0.05, 0.025],
        'scale_fraction': 1.0 / 16.0,
        'k_max': None,
        'with_orthogonality': True
    },
    'epsreg-decay': {
        'deltas': [1e-3],
        'steps': 2,
        'n_samples': Config.REGULARITY_CONFIG['n_samples'],
        'theta': Config.REGULARITY_CONFIG['theta'],
        'alpha': Config.REGULARITY_CONFIG['alpha']
    },
    'cascade': {
        'r_target': 4.0,
        'c_data': Config.CAMPANATO_CONFIG['c_data'],
        'averaged_radii': [4.0, 8.0, 16.0],
        'center': [0.0, 0.0]
    },
    'rstar-tail': {
        'c_data': Config.CAMPANATO_CONFIG['c_data'],
        'center': [0.0, 0.0]
    }
}

# Estructura del documento TOML: sección -> claves permitidas
SECTION_KEYS = {
    'domain': {'side_lengths', 'dimension'},
    'seeds': {'count', 'base'},
    'solver': {'method', 'eps_schedule'},
    'resolution': {'m', 'grid_factor', 'm_local', 'n_angle', 'n_time'},
    'bootstrap': {'samples', 'seed', 'confidence'}
}
TOP_LEVEL_KEYS = {'schema_version', 'kind', 'name', 'output_dir', 'parameters'} | set(SECTION_KEYS)

def _check_keys(section: str, data: Dict[str, Any], allowed):
    if not isinstance(data, dict):
        raise ConfigError(f"La sección '{section}' debe ser una tabla")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"Claves desconocidas en '{section}': {', '.join(unknown)}")

@dataclass
class ExperimentConfig:
    """Configuración de un experimento (esquema TOML versionado)"""
    kind: str
    name: str = ''
    side_lengths: List[float] = field(default_factory=lambda: [float(L) for L in Config.EXPERIMENT_CONFIG['side_lengths']])
    dimension: int = 2
    seeds: int = Config.EXPERIMENT_CONFIG['seeds']
    seed_base: int = Config.EXPERIMENT_CONFIG['seed_base']
    solver: str = 'exact'
    eps_schedule: List[float] = field(default_factory=lambda: list(Config.SOLVER_CONFIG['eps_schedule']))
    m: Optional[int] = None
    grid_factor: int = Config.EXPERIMENT_CONFIG['grid_factor']
    m_local: int = Config.CAMPANATO_CONFIG['m_local']
    n_angle: int = Config.FLUX_CONFIG['n_angle']
    n_time: int = Config.FLUX_CONFIG['n_time']
    bootstrap_samples: int = Config.EXPERIMENT_CONFIG['bootstrap_samples']
    bootstrap_seed: int = Config.EXPERIMENT_CONFIG['bootstrap_seed']
    confidence: float = Config.EXPERIMENT_CONFIG['confidence_level']
    output_dir: str = Config.EXPERIMENT_CONFIG['output_dir']
    parameters: Dict[str, Any] = field(default_factory=dict)
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        if self.kind not in KIND_PARAMETERS:
            raise ConfigError(f"Tipo de experimento desconocido: {self.kind}")
        unknown = sorted(set(self.parameters) - set(KIND_PARAMETERS[self.kind]))
        if unknown:
            raise ConfigError(f"Parámetros desconocidos para '{self.kind}': {', '.join(unknown)}")
        merged = dict(KIND_PARAMETERS[self.kind])
        merged.update(self.parameters)
        self.parameters = merged
        self.side_lengths = [float(L) for L in self.side_lengths]
        self.eps_schedule = [float(eps) for eps in self.eps_schedule]
        self.validate()

    def validate(self):
        """Comprueba rangos documentados; ConfigError si algo no cuadra"""
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} no soportada (se espera {SCHEMA_VERSION})")
        if not self.side_lengths or any(not np.isfinite(L) or L <= 0 for L in self.side_lengths):
            raise ConfigError(f"side_lengths inválidas: {self.side_lengths}")
        if self.dimension != 2:
            raise ConfigError(f"Solo se admite d = 2 (recibido {self.dimension})")
        if self.seeds < 1 or self.seed_base < 0 or self.seed_base + self.seeds >= 2 ** 64:
            raise ConfigError(f"Semillas fuera de rango: count={self.seeds}, base={self.seed_base}")
        if self.solver not in SOLVERS:
            raise ConfigError(f"Solver desconocido: {self.solver}")
        if not self.eps_schedule or any(eps <= 0 for eps in self.eps_schedule):
            raise ConfigError(f"Calendario ε inválido: {self.eps_schedule}")
        if self.m is not None and self.m < 1:
            raise ConfigError(f"m inválido: {self.m}")
        if self.grid_factor < 1 or self.m_local < 2 or self.n_angle < 4 or self.n_time < 1:
            raise ConfigError("Parámetros de resolución fuera de rango")
        if self.bootstrap_samples < 1 or not 0 < self.confidence < 1:
            raise ConfigError("Parámetros de bootstrap fuera de rango")

        params = self.parameters
        if 'deltas' in params and any(not 0 <= d < 1 for d in params['deltas']):
            raise ConfigError(f"deltas fuera de [0, 1): {params['deltas']}")
        if self.kind == 'harmonic-approx':
            if params['source'] not in ('density-family', 'poisson'):
                raise ConfigError(f"Fuente desconocida: {params['source']}")
            if not 0 < params['scale_fraction'] < 1.0 / 12.0:
                raise ConfigError("scale_fraction debe estar en (0, 1/12) para que B_6R quepa en Q_L")
        if self.kind == 'epsreg-decay':
            if not 0 < params['theta'] <= 1.0 / 7.0 + 1e-15 or params['steps'] < 1 or params['n_samples'] < 1:
                raise ConfigError("theta, steps o n_samples fuera de rango")
        if self.kind in ('cascade', 'rstar-tail') and params['c_data'] <= 0:
            raise ConfigError(f"c_data debe ser positivo: {params['c_data']}")
        if self.kind == 'cascade' and params['r_target'] <= 1:
            raise ConfigError(f"r_target debe ser > 1: {params['r_target']}")

    def grid_resolution(self, side_length: float) -> int:
        """m fijo o grid_factor·L"""
        return int(self.m) if self.m is not None else int(round(self.grid_factor * side_length))

    def cells(self) -> List[Dict[str, Any]]:
        """Celdas del experimento en orden determinista"""
        seeds = [self.seed_base + i for i in range(self.seeds)]
        if self.kind == 'epsreg-decay':
            return [{'delta': float(d), 'seed': s} for d in self.parameters['deltas'] for s in seeds]
        if self.kind == 'harmonic-approx' and self.parameters['source'] == 'density-family':
            return [{'L': L, 'delta': float(d), 'seed': s}
                    for L in self.side_lengths for d in self.parameters['deltas'] for s in seeds]
        return [{'L': L, 'seed': s} for L in self.side_lengths for s in seeds]

    def group_keys(self) -> List[str]:
        """Claves de agrupación de las celdas para el resumen"""
        first = self.cells()[0]
        return [key for key in ('L', 'delta') if key in first]

    def to_dict(self) -> Dict[str, Any]:
        """Documento anidado con la misma forma que el TOML"""
        resolution = {'grid_factor': self.grid_factor, 'm_local': self.m_local,
                      'n_angle': self.n_angle, 'n_time': self.n_time}
        if self.m is not None:
            resolution['m'] = int(self.m)
        return {
            'schema_version': self.schema_version,
            'kind': self.kind,
            'name': self.name,
            'output_dir': self.output_dir,
            'domain': {'side_lengths': list(self.side_lengths), 'dimension': self.dimension},
            'seeds': {'count': self.seeds, 'base': self.seed_base},
            'solver': {'method': self.solver, 'eps_schedule': list(self.eps_schedule)},
            'resolution': resolution,
            'bootstrap': {'samples': self.bootstrap_samples, 'seed': self.bootstrap_seed,
                          'confidence': self.confidence},
            'parameters': {k: v for k, v in self.parameters.items() if v is not None}
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ExperimentConfig':
        _check_keys('<raíz>', data, TOP_LEVEL_KEYS)
        if 'kind' not in data:
            raise ConfigError("Falta la clave obligatoria 'kind'")
        if 'schema_version' not in data:
            raise ConfigError("Falta la clave obligatoria 'schema_version'")
        for section, allowed in SECTION_KEYS.items():
            _check_keys(section, data.get(section, {}), allowed)
        _check_keys('parameters', data.get('parameters', {}), KIND_PARAMETERS.get(data['kind'], {}))

        domain = data.get('domain', {})
        seeds = data.get('seeds', {})
        solver = data.get('solver', {})
        resolution = data.get('resolution', {})
        bootstrap = data.get('bootstrap', {})
        defaults = cls(kind=data['kind']) if data['kind'] in KIND_PARAMETERS else None
        if defaults is None:
            raise ConfigError(f"Tipo de experimento desconocido: {data['kind']}")
        try:
            return cls(
                kind=data['kind'],
                name=str(data.get('name', '')),
                side_lengths=domain.get('side_lengths', defaults.side_lengths),
                dimension=int(domain.get('dimension', defaults.dimension)),
                seeds=int(seeds.get('count', defaults.seeds)),
                seed_base=int(seeds.get('base', defaults.seed_base)),
                solver=solver.get('method', defaults.solver),
                eps_schedule=solver.get('eps_schedule', defaults.eps_schedule),
                m=resolution.get('m'),
                grid_factor=int(resolution.get('grid_factor', defaults.grid_factor)),
                m_local=int(resolution.get('m_local', defaults.m_local)),
                n_angle=int(resolution.get('n_angle', defaults.n_angle)),
                n_time=int(resolution.get('n_time', defaults.n_time)),
                bootstrap_samples=int(bootstrap.get('samples', defaults.bootstrap_samples)),
                bootstrap_seed=int(bootstrap.get('seed', defaults.bootstrap_seed)),
                confidence=float(bootstrap.get('confidence', defaults.confidence)),
                output_dir=str(data.get('output_dir', defaults.output_dir)),
                parameters=dict(data.get('parameters', {})),
                schema_version=int(data['schema_version'])
            )
        except (TypeError, ValueError) as e:
            raise ConfigError(f"Valor de configuración inválido: {e}") from e

    def config_hash(self) -> str:
        """SHA-256 del JSON canónico (el directorio de salida no forma parte del hash)"""
        document = self.to_dict()
        document.pop('output_dir')
        return content_hash(document)

def load_config(path: str) -> ExperimentConfig:
    """Lee y valida un archivo TOML de experimento"""
    try:
        with open(path, 'rb') as f:
            data = tomllib.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"No existe el archivo de configuración: {path}") from e
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"TOML inválido en {path}: {e}") from e
    config = ExperimentConfig.from_dict(data)
    logger.info(f"Configuración cargada: {path} ({config.kind}, hash {config.config_hash()[:12]})")
    return config

# Ejecución de celdas

def cell_id(cell: Dict[str, Any]) -> str:
    parts = []
    if 'L' in cell:
        parts.append(f"L{cell['L']:g}")
    if 'delta' in cell:
        parts.append(f"delta{cell['delta']:g}")
    parts.append(f"seed{cell['seed']:06d}")
    return '_'.join(parts)

def _without_timing(data: Any) -> Any:
    """Elimina recursivamente las claves de tiempo de pared (no deterministas)"""
    if isinstance(data, dict):
        return {k: _without_timing(v) for k, v in data.items() if k != 'wall_time'}
    if isinstance(data, list):
        return [_without_timing(v) for v in data]
    return data

def _run_matching_cell(config: ExperimentConfig, cell: Dict[str, Any], artifact_dir: str) -> Tuple[Dict, Dict]:
    L, seed = cell['L'], cell['seed']
    record = run_matching(L, seed, config.grid_resolution(L), config.solver, config.eps_schedule)
    residual = residual_vs_gradient(record, config.parameters.get('heat_time'))
    record_dict = record.to_dict()
    metrics = {
        'L': L,
        'seed': seed,
        'n': record.n,
        'w2': record.w2,
        'w2_over_volume': record.normalized_w2,
        'w2_over_volume_log': record_dict['w2_over_volume_log'],
        'discretization_bound': record_dict['discretization_bound'],
        'residual': residual.residual,
        'residual_ratio': residual.ratio,
        'residual_unsmoothed': residual.residual_unsmoothed,
        'heat_time': residual.t,
        'marginal_error': record.report.marginal_error,
        'split_sources': record.report.split_sources,
        'empty_resamples': record.empty_resamples
    }
    if config.parameters['save_artifacts']:
        stem = os.path.join(artifact_dir, cell_id(cell))
        atomic_write_bytes(stem + '.otm', record.source.to_bytes())
        atomic_write_bytes(stem + '.otp', record.plan.to_bytes())
        atomic_write_bytes(stem + '.otf', record.phi.to_bytes())
    details = {'record': _without_timing(record_dict), 'residual': residual.to_dict()}
    return metrics, details

def _run_harmonic_cell(config: ExperimentConfig, cell: Dict[str, Any], artifact_dir: str) -> Tuple[Dict, Dict]:
    L, seed = cell['L'], cell['seed']
    params = config.parameters
    dom = TorusDomain(L, config.dimension)
    m = config.grid_resolution(L)
    if params['source'] == 'density-family':
        mu = density_family(dom, m, cell['delta'])
    else:
        mu = sample_poisson(dom, 1.0, seed, reject_empty=True)
    lam = lebesgue_grid(dom, m, mu.total_mass)
    plan, _ = solve_exact(mu, lam, 'periodic')
    report, phi, _ = harmonic_approximation(plan, mu, lam, np.zeros(2), params['scale_fraction'] * L,
                                               k_max=params.get('k_max'), m_local=config.m_local,
                                               with_orthogonality=params['with_orthogonality'])
    terms = report.orthogonality
    metrics = {
        'L': L,
        'seed': seed,
        'delta': cell.get('delta', float('nan')),
        'E': report.E,
        'D': report.D,
        'residual': report.residual,
        'residual_ratio': report.residual_ratio,
        'R': report.radius,
        'dirichlet_energy': report.dirichlet_energy,
        'flux_energy': report.flux_energy,
        'gap': terms.energy_gap if terms else None,
        'cross': terms.cross_term if terms else None,
        'density': terms.density_term if terms else None,
        'identity_defect': terms.identity_defect() if terms else None
    }
    details = {'report': report.to_dict(), 'phi': phi.to_dict()}
    return metrics, details

def _run_epsreg_cell(config: ExperimentConfig, cell: Dict[str, Any], artifact_dir: str) -> Tuple[Dict, Dict]:
    params = config.parameters
    T = sample_map(harmonic_test_map(cell['delta']), 6.0, params['n_samples'], seed=cell['seed'])
    trace = campanato_decay(T, params['theta'], params['alpha'], params['steps'])
    metrics = {'delta': cell['delta'], 'seed': cell['seed'], 'target_ratio': trace.target_ratio}
    for row in trace.rows:
        metrics[f"E_{row['k']}"] = row['E']
        if row['k'] > 0:
            metrics[f"ratio_{row['k']}"] = row['ratio']
    ratios = trace.ratios
    metrics['max_ratio'] = float(np.max(ratios)) if ratios.size else float('nan')
    metrics['decay_ok'] = bool(ratios.size and np.all(ratios <= trace.target_ratio))
    trace.to_csv(os.path.join(artifact_dir, cell_id(cell) + '_decay.csv'))
    return metrics, {'trace': trace.to_dict()}

def _run_cascade_cell(config: ExperimentConfig, cell: Dict[str, Any], artifact_dir: str) -> Tuple[Dict, Dict]:
    L, seed = cell['L'], cell['seed']
    params = config.parameters
    center = np.asarray(params['center'], dtype=float)
    record = run_matching(L, seed, config.grid_resolution(L), config.solver, config.eps_schedule)
    rstar = empirical_rstar(record.source, params['c_data'], center, m_local=config.m_local)
    r_target = max(params['r_target'], rstar) if np.isfinite(rstar) else params['r_target']
    r_target = min(r_target, Config.CAMPANATO_CONFIG['initial_radius_fraction'] * L)
    trace = campanato_cascade(record, center, r_target)
    metrics = {
        'L': L,
        'seed': seed,
        'rstar': rstar,
        'r_target': r_target,
        'n_scales': len(trace.base_radii),
        'h_gap': trace.h_gap,
        'max_energy_ratio': float(np.nanmax(trace.energy_ratio)),
        'max_gradient_ratio': float(np.nanmax(trace.gradient_ratio)),
        'restore_error': float(np.max(np.abs(trace.restored_displacements() - trace.original_displacements),
                                      initial=0.0))
    }
    for radius, energy_ratio, gradient_ratio in zip(trace.base_radii, trace.energy_ratio, trace.gradient_ratio):
        metrics[f'energy_ratio_R{radius:g}'] = energy_ratio
        metrics[f'gradient_ratio_R{radius:g}'] = gradient_ratio
    if np.isfinite(rstar) and rstar > 1:
        try:
            micro = linf_microscopic(record, center, trace, rstar)
            metrics['micro_ratio'] = micro.ratio
            metrics['micro_deviation'] = micro.max_deviation
        except DomainError as e:
            logger.warning(f"Celda {cell_id(cell)}: {e}")
    for radius in params['averaged_radii']:
        if radius > L / 4.0:
            continue
        try:
            averaged = averaged_displacement(record, center, radius)
        except DomainError as e:
            logger.warning(f"Celda {cell_id(cell)}: {e}")
            continue
        metrics[f'avg_gap_R{radius:g}'] = averaged.gap
        metrics[f'avg_normalized_gap_R{radius:g}'] = averaged.normalized_gap
    trace.to_frame().to_csv(os.path.join(artifact_dir, cell_id(cell) + '_cascade.csv'), index=False,
                            float_format='%.12g')
    return metrics, {'trace': trace.to_dict()}

def _run_rstar_cell(config: ExperimentConfig, cell: Dict[str, Any], artifact_dir: str) -> Tuple[Dict, Dict]:
    L, seed = cell['L'], cell['seed']
    params = config.parameters
    center = np.asarray(params['center'], dtype=float)
    mu = sample_poisson(TorusDomain(L, config.dimension), 1.0, seed, reject_empty=True)
    radii = dyadic_radii(L)
    profile = data_profile(mu, center, radii, config.m_local)
    rstar = empirical_rstar(mu, params['c_data'], center, profile=profile)
    metrics = {'L': L, 'seed': seed, 'n': len(mu), 'rstar': rstar, 'rstar_finite': bool(np.isfinite(rstar))}
    for radius in radii:
        metrics[f'exceeds_R{radius:g}'] = float(rstar > radius)
        metrics[f'profile_R{radius:g}'] = profile[radius]
    return metrics, {'profile': {f'{r:g}': v for r, v in profile.items()}}

CELL_RUNNERS: Dict[str, Callable[[ExperimentConfig, Dict[str, Any], str], Tuple[Dict, Dict]]] = {
    'matching-scaling': _run_matching_cell,
    'harmonic-approx': _run_harmonic_cell,
    'epsreg-decay': _run_epsreg_cell,
    'cascade': _run_cascade_cell,
    'rstar-tail': _run_rstar_cell
}

# Orquestación

@dataclass
class RunResult:
    """Resultado de una ejecución: directorio y recuento de celdas"""
    run_dir: str
    computed: int
    skipped: int
    failed: int
    total: int

    @property
    def exit_code(self) -> int:
        return 3 if self.total > 0 and self.failed == self.total else 0

class ExperimentRunner:
    """Ejecuta las celdas de un experimento en un pool de hilos y agrega los resultados"""

    def __init__(self, config: ExperimentConfig, output_dir: Optional[str] = None,
                 max_threads: Optional[int] = None):
        self.config = config
        self.config_hash = config.config_hash()
        label = config.name or config.kind
        self.run_dir = os.path.join(output_dir or config.output_dir, f'{label}-{self.config_hash[:12]}')
        self.cells_dir = os.path.join(self.run_dir, 'cells')
        self.artifact_dir = os.path.join(self.run_dir, 'artifacts')
        self.max_threads = max_threads or Config.max_threads()
        self.monitor = SystemMonitor()

    def cell_path(self, cell: Dict[str, Any]) -> str:
        return os.path.join(self.cells_dir, cell_id(cell) + '.json')

    def cell_hash(self, cell: Dict[str, Any]) -> str:
        return content_hash({'config': self.config_hash, 'cell': cell, 'code_version': Config.CODE_VERSION})

    def load_completed(self, cell: Dict[str, Any]) -> Optional[Dict[str, Any]]:
        """Documento de celda válido y completo, o None si falta, está corrupto o no coincide"""
        path = self.cell_path(cell)
        if not os.path.exists(path):
            return None
        try:
            document = read_json(path)
            payload = {'metrics': document['metrics'], 'details': document['details']}
            valid = (document.get('status') == 'completed'
                     and document.get('cell_hash') == self.cell_hash(cell)
                     and document.get('checksum') == content_hash(payload))
        except (ValueError, KeyError, TypeError) as e:
            logger.warning(f"Celda {cell_id(cell)} ilegible ({e}); se recalcula")
            return None
        if not valid:
            logger.warning(f"Celda {cell_id(cell)} no coincide con su hash; se recalcula")
            return None
        return document

    def run_cell(self, cell: Dict[str, Any]) -> Dict[str, Any]:
        """Ejecuta una celda aislada y escribe su JSON de forma atómica"""
        existing = self.load_completed(cell)
        if existing is not None:
            logger.info(f"Celda {cell_id(cell)} ya completada; se omite")
            existing['skipped'] = True
            return existing

        logger.info(f"Iniciando celda {cell_id(cell)}")
        start_time = time.perf_counter()
        document = {'cell': cell, 'cell_id': cell_id(cell), 'cell_hash': self.cell_hash(cell),
                    'kind': self.config.kind}
        try:
            metrics, details = CELL_RUNNERS[self.config.kind](self.config, cell, self.artifact_dir)
            payload = convert_numpy({'metrics': metrics, 'details': details})
            document.update(status='completed', error=None, **payload)
            document['checksum'] = content_hash(payload)
        except Exception as e:
            logger.error(f"Error en celda {cell_id(cell)}: {str(e)}")
            document.update(status='failed', error=f'{type(e).__name__}: {e}', metrics={}, details={},
                            checksum=None)
        document['wall_time'] = time.perf_counter() - start_time
        write_json(self.cell_path(cell), document)
        logger.info(f"Celda {cell_id(cell)} {document['status']} en {document['wall_time']:.2f} s")
        document['skipped'] = False
        return document

    def run(self) -> RunResult:
        """Ejecuta todas las celdas, agrega y escribe el manifiesto"""
        started = datetime.now()
        ensure_directory(self.cells_dir)
        ensure_directory(self.artifact_dir)
        write_json(os.path.join(self.run_dir, 'config.json'), self.config.to_dict())

        cells = self.config.cells()
        logger.info(f"Ejecutando {len(cells)} celdas de '{self.config.kind}' con {self.max_threads} hilos")
        with ThreadPoolExecutor(max_workers=self.max_threads) as executor:
            documents = list(executor.map(self.run_cell, cells))

        cells_frame = collect_cells(self.run_dir)
        summary = summarize(cells_frame, self.config)
        cells_csv = os.path.join(self.run_dir, 'cells.csv')
        summary_csv = os.path.join(self.run_dir, 'summary.csv')
        write_csv(cells_frame, cells_csv)
        write_csv(summary, summary_csv)

        result = RunResult(
            run_dir=self.run_dir,
            computed=sum(1 for d in documents if not d['skipped'] and d['status'] == 'completed'),
            skipped=sum(1 for d in documents if d['skipped']),
            failed=sum(1 for d in documents if d['status'] == 'failed'),
            total=len(documents)
        )
        self._write_manifest(documents, cells_csv, summary_csv)
        self._append_run_log(started, result)
        logger.info(f"Ejecución terminada: {result.computed} calculadas, {result.skipped} omitidas, "
                    f"{result.failed} fallidas -> {self.run_dir}")
        return result

    def _write_manifest(self, documents: List[Dict[str, Any]], cells_csv: str, summary_csv: str):
        def file_hash(path):
            with open(path, 'rb') as f:
                return content_hash(f.read())

        for document in documents:
            self.monitor.record_metric('cell_wall_time', document.get('wall_time', 0.0))
        manifest = {
            'config_hash': self.config_hash,
            'config': self.config.to_dict(),
            'code_version': Config.CODE_VERSION,
            'defaults': Config.as_dict(),
            'rng_algorithm': Config.SAMPLING_CONFIG['rng_algorithm'],
            'max_threads': self.max_threads,
            'cells': [{
                'cell_id': d['cell_id'],
                'cell_hash': d['cell_hash'],
                'status': d['status'],
                'checksum': d.get('checksum'),
                'wall_time': d.get('wall_time'),
                'skipped': d['skipped'],
                'error': d.get('error')
            } for d in documents],
            'outputs': {'cells.csv': file_hash(cells_csv), 'summary.csv': file_hash(summary_csv)},
            'system': self.monitor.snapshot()
        }
        write_json(os.path.join(self.run_dir, 'manifest.json'), manifest)

    def _append_run_log(self, started: datetime, result: RunResult):
        path = os.path.join(self.run_dir, 'run_log.json')
        entries = read_json(path) if os.path.exists(path) else []
        entries.append({'started': started.isoformat(), 'finished': datetime.now().isoformat(),
                        'computed': result.computed, 'skipped': result.skipped, 'failed': result.failed})
        write_json(path, entries)

def run(config: ExperimentConfig, output_dir: Optional[str] = None, max_threads: Optional[int] = None) -> RunResult:
    """Ejecuta un experimento completo"""
    return ExperimentRunner(config, output_dir, max_threads).run()

# Agregación (relectura pura de los JSON de celda)

def write_csv(frame: pd.DataFrame, path: str):
    """CSV con orden de columnas fijo y formato numérico estable"""
    atomic_write_bytes(path, frame.to_csv(index=False, float_format='%.12g').encode('utf-8'))

def collect_cells(run_dir: str) -> pd.DataFrame:
    """Tabla de métricas de todas las celdas completadas"""
    cells_dir = os.path.join(run_dir, 'cells')
    rows = []
    for name in sorted(os.listdir(cells_dir)) if os.path.isdir(cells_dir) else []:
        if not name.endswith('.json'):
            continue
        document = read_json(os.path.join(cells_dir, name))
        if document.get('status') == 'completed':
            rows.append(document['metrics'])
    if not rows:
        return pd.DataFrame()
    frame = pd.DataFrame(rows).replace({'inf': np.inf, '-inf': -np.inf}).infer_objects()
    keys = [k for k in ('L', 'delta', 'seed') if k in frame.columns]
    columns = keys + sorted(c for c in frame.columns if c not in keys)
    return frame[columns].sort_values(keys, kind='mergesort').reset_index(drop=True)

def summarize(cells_frame: pd.DataFrame, config: ExperimentConfig) -> pd.DataFrame:
    """Media, mediana, percentil 99 e IC bootstrap por grupo y estadístico"""
    group_keys = config.group_keys()
    columns = group_keys + ['statistic', 'seeds', 'mean', 'median', 'p99', 'ci_lo', 'ci_hi']
    if cells_frame.empty:
        return pd.DataFrame(columns=columns)

    statistics = [c for c in cells_frame.columns if c not in group_keys and c != 'seed']
    rows = []
    for keys, group in cells_frame.groupby(group_keys, sort=True):
        keys = keys if isinstance(keys, tuple) else (keys,)
        for statistic in statistics:
            values = pd.to_numeric(group[statistic], errors='coerce').to_numpy(dtype=float)
            values = values[np.isfinite(values)]
            if values.size == 0:
                continue
            ci_lo, ci_hi = bootstrap_ci(values, np.mean, config.bootstrap_samples, config.confidence,
                                        config.bootstrap_seed)
            row = dict(zip(group_keys, keys))
            row.update(statistic=statistic, seeds=int(values.size), mean=float(values.mean()),
                       median=float(np.median(values)), p99=float(np.percentile(values, 99)),
                       ci_lo=ci_lo, ci_hi=ci_hi)
            rows.append(row)
    return pd.DataFrame(rows, columns=columns)

# Ajuste del prefactor

@dataclass
class FitResult:
    """Ajuste y = a·log L + b (modelo 'log') o y = a·x^p (modelo 'power')"""
    model: str
    statistic: str
    estimates: Dict[str, float]
    ci: Dict[str, Tuple[float, float]]
    residual_norm: float
    n_points: int
    bootstrap: str
    target: float = Config.AKT_PREFACTOR

    @property
    def slope(self) -> float:
        return self.estimates['a'] if self.model == 'log' else self.estimates['p']

    @property
    def distance_to_target(self) -> Optional[float]:
        """|a - 1/(2π)| para el modelo logarítmico"""
        return abs(self.estimates['a'] - self.target) if self.model == 'log' else None

    def to_dict(self) -> Dict[str, Any]:
        return convert_numpy({
            'model': self.model,
            'statistic': self.statistic,
            'estimates': self.estimates,
            'ci': {k: list(v) for k, v in self.ci.items()},
            'residual_norm': self.residual_norm,
            'n_points': self.n_points,
            'bootstrap': self.bootstrap,
            'target': self.target,
            'distance_to_target': self.distance_to_target
        })

def _design(L: np.ndarray, y: np.ndarray, model: str) -> Tuple[np.ndarray, np.ndarray]:
    if model == 'log':
        return np.log(L), y
    if np.any(y <= 0):
        raise InvalidInputError("El modelo potencial requiere valores positivos")
    return np.log(L), np.log(y)

def _wls(x: np.ndarray, y: np.ndarray, weights: np.ndarray):
    return sm.WLS(y, sm.add_constant(x, has_constant='add'), weights=weights).fit()

def _estimates(params: np.ndarray, model: str) -> Dict[str, float]:
    intercept, slope = float(params[0]), float(params[1])
    if model == 'log':
        return {'a': slope, 'b': intercept}
    return {'a': float(np.exp(intercept)), 'p': slope}

def _clamped_ci(samples: np.ndarray, estimate: float, confidence: float) -> Tuple[float, float]:
    if samples.size == 0:
        return estimate, estimate
    alpha = 100.0 * (1.0 - confidence) / 2.0
    lo, hi = np.percentile(samples, [alpha, 100.0 - alpha])
    return float(min(lo, estimate)), float(max(hi, estimate))

def fit_prefactor(summary: Union[str, pd.DataFrame], model: str = 'log', statistic: str = 'w2_over_volume',
                  n_bootstrap: Optional[int] = None, seed: Optional[int] = None,
                  confidence: Optional[float] = None) -> FitResult:
    """Mínimos cuadrados ponderados de la media frente a log L con IC bootstrap

    Acepta un summary.csv (columnas L, statistic, mean, ci_lo, ci_hi): los pesos
    salen de la anchura de los IC y el bootstrap es paramétrico. Si recibe un
    cells.csv (una fila por semilla con la columna del estadístico) el bootstrap
    remuestrea semillas dentro de cada L.
    """
    if model not in ('log', 'power'):
        raise InvalidInputError(f"Modelo desconocido: {model}")
    frame = pd.read_csv(summary) if isinstance(summary, str) else summary.copy()
    n_bootstrap = n_bootstrap or Config.EXPERIMENT_CONFIG['bootstrap_samples']
    seed = Config.EXPERIMENT_CONFIG['bootstrap_seed'] if seed is None else seed
    confidence = confidence or Config.EXPERIMENT_CONFIG['confidence_level']
    rng = np.random.default_rng(seed)

    if {'statistic', 'mean'}.issubset(frame.columns):
        rows = frame[frame['statistic'] == statistic].sort_values('L')
        L = rows['L'].to_numpy(dtype=float)
        means = rows['mean'].to_numpy(dtype=float)
        if 'ci_lo' in rows and 'ci_hi' in rows:
            sigma = (rows['ci_hi'].to_numpy(dtype=float) - rows['ci_lo'].to_numpy(dtype=float)) / (2.0 * norm.ppf(0.5 + confidence / 2.0))
        else:
            sigma = np.zeros_like(means)
        groups = None
        mode = 'parametric'
    elif {'L', statistic}.issubset(frame.columns):
        frame = frame[np.isfinite(pd.to_numeric(frame[statistic], errors='coerce'))]
        groups = [g[statistic].to_numpy(dtype=float) for _, g in frame.groupby('L', sort=True)]
        L = np.array(sorted(frame['L'].unique()), dtype=float)
        means = np.array([g.mean() for g in groups])
        sigma = np.array([g.std(ddof=1) / np.sqrt(g.size) if g.size > 1 else 0.0 for g in groups])
        mode = 'cells'
    else:
        raise InvalidInputError(f"La tabla no contiene el estadístico '{statistic}'")

    if np.unique(L).size < 3:
        raise InvalidInputError(f"Se necesitan al menos 3 valores distintos de L (hay {np.unique(L).size})")

    x, y = _design(L, means, model)
    y_sigma = sigma if model == 'log' else sigma / means
    weighted = bool(np.all(np.isfinite(y_sigma)) and np.all(y_sigma > 0))
    weights = 1.0 / y_sigma ** 2 if weighted else np.ones_like(y)
    fit = _wls(x, y, weights)
    estimates = _estimates(fit.params, model)
    residual_norm = float(np.sqrt(np.sum(weights * fit.resid ** 2)))

    samples = {name: [] for name in estimates}
    if mode == 'cells' and any(g.size > 1 for g in groups):
        for _ in range(n_bootstrap):
            resampled = np.array([rng.choice(g, size=g.size, replace=True).mean() for g in groups])
            _, yb = _design(L, resampled, model)
            for name, value in _estimates(_wls(x, yb, weights).params, model).items():
                samples[name].append(value)
    elif mode == 'parametric' and weighted:
        for _ in range(n_bootstrap):
            resampled = means + sigma * rng.standard_normal(means.size)
            if model == 'power' and np.any(resampled <= 0):
                continue
            _, yb = _design(L, resampled, model)
            for name, value in _estimates(_wls(x, yb, weights).params, model).items():
                samples[name].append(value)
    else:
        mode = 'none'

    ci = {name: _clamped_ci(np.asarray(samples[name]), estimates[name], confidence) for name in estimates}
    result = FitResult(model=model, statistic=statistic, estimates=estimates, ci=ci, residual_norm=residual_norm,
                       n_points=int(L.size), bootstrap=mode)
    logger.info(f"fit_prefactor ({model}): pendiente {result.slope:.5f}, IC {ci['a' if model == 'log' else 'p']}")
    return result

# Inspección de artefactos y oráculo

def inspect_artifact(path: str) -> Dict[str, Any]:
    """Resumen legible de un JSON de celda o de un binario OTM1/OTP1/OTF1"""
    if path.endswith('.json'):
        document = read_json(path)
        return {key: document.get(key) for key in ('cell_id', 'kind', 'status', 'error', 'metrics', 'wall_time')}

    with open(path, 'rb') as f:
        payload = f.read()
    magic = payload[:4]
    if magic == Config.SAMPLING_CONFIG['binary_magic']:
        mu = DiscreteMeasure.from_bytes(payload)
        return {'format': 'OTM1', 'L': mu.domain.side_length, 'd': mu.domain.dimension, 'atoms': len(mu),
                'total_mass': mu.total_mass}
    if magic == Config.SOLVER_CONFIG['binary_magic']:
        count, total_cost = struct.unpack('<Qd', payload[4:20])
        return {'format': 'OTP1', 'pairs': int(count), 'total_cost': float(total_cost)}
    if magic == Config.FIELD_CONFIG['binary_magic']:
        phi = ScalarField.from_bytes(payload)
        return {'format': 'OTF1', 'L': phi.domain.side_length, 'd': phi.domain.dimension, 'm': phi.m,
                'max_abs': float(np.max(np.abs(phi.values)))}
    raise InvalidInputError(f"Formato de artefacto desconocido: {path}")

def oracle_check(instance: Dict[str, Any], rtol: float = 1e-9) -> Dict[str, Any]:
    """Compara solve_exact con el oráculo exhaustivo (masas iguales, n <= 9) o con el programa lineal"""
    dom = TorusDomain(float(instance['L']), int(instance.get('d', 2)))
    cost = instance.get('cost', 'periodic')
    src = measure_from_atoms(instance['source'], dom)
    tgt = measure_from_atoms(instance['target'], dom)
    plan, report = solve_exact(src, tgt, cost)

    uniform = (len(src) == len(tgt) and np.allclose(src.masses, src.masses[0], rtol=1e-12, atol=0)
               and np.allclose(tgt.masses, src.masses[0], rtol=1e-12, atol=0))
    if uniform and len(src) <= Config.SOLVER_CONFIG['brute_force_max_atoms']:
        reference = brute_force_oracle(src, tgt, cost)
    else:
        reference = linear_program_oracle(src, tgt, cost)
    tolerance = rtol * (1.0 + abs(reference.total_cost))
    agree = abs(plan.total_cost - reference.total_cost) <= tolerance
    if not agree:
        logger.warning(f"Oráculo en desacuerdo: {plan.total_cost:.12g} frente a {reference.total_cost:.12g}")
    return {
        'exact_cost': plan.total_cost,
        'oracle_cost': reference.total_cost,
        'oracle': reference.method,
        'agree': bool(agree),
        'certificate_ok': report.certificate_ok,
        'duality_gap': report.duality_gap
    }
