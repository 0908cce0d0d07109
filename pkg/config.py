"""
otlab - Configuration
Laboratorio numérico de transporte óptimo: parámetros por defecto del sistema
"""

import os
from typing import Dict, Any

class Config:
    """Configuración por defecto de otlab"""

    # Versión del código (se registra en el manifiesto de cada ejecución)
    CODE_VERSION = '1.0.0'

    # Directorios
    BASE_DIR = os.path.dirname(os.path.abspath(__file__))
    LOGGING_CONFIG_PATH = os.path.join(BASE_DIR, 'config', 'logging.json')
    EXPERIMENTS_CONFIG_DIR = os.path.join(BASE_DIR, 'config', 'experiments')

    # Geometría del toro
    GEOMETRY_CONFIG = {
        'default_dimension': 2,
        'default_side_length': 16.0
    }

    # Muestreo de medidas
    SAMPLING_CONFIG = {
        'rng_algorithm': 'numpy.Philox',
        'poisson_cap': 2 ** 31,
        'max_empty_resamples': 1000,
        'binary_magic': b'OTM1'
    }

    # Solvers de transporte
    SOLVER_CONFIG = {
        'emd_max_iter': 100_000_000,
        'cost_entry_cap': 10 ** 8,
        'memory_budget_bytes': 2 * 1024 ** 3,
        'cost_block_rows': 512,
        'certificate_tolerance': 1e-7,
        'marginal_tolerance': 1e-9,
        'mass_tolerance': 1e-9,
        'support_threshold': 1e-14,
        'eps_schedule': [1.0, 0.5, 0.25, 0.1, 0.05, 0.025, 0.01],
        'sinkhorn_max_iter': 20_000,
        'brute_force_max_atoms': 9,
        'monotonicity_max_pairs': 10 ** 4,
        'binary_magic': b'OTP1'
    }

    # Solvers de campos (Poisson periódico, molificador, Neumann en disco)
    FIELD_CONFIG = {
        'angular_bins': 256,
        'k_max': 64,
        'boundary_nodes': 256,
        'interpolation_order': 3,
        'mean_tolerance': 1e-9,
        'min_mollifier_cells': 2.0,
        'binary_magic': b'OTF1'
    }

    # Flujo de frontera
    FLUX_CONFIG = {
        'n_angle': 256,
        'n_time': 32,
        'tangential_threshold': 1e-14,
        'angular_smoothing': 0.0,
        'time_quadrature_nodes': 16
    }

    # Aproximación armónica
    HARMONIC_CONFIG = {
        'n_candidates': 8,
        'candidate_range': (3.0, 4.0),
        'kde_bandwidth_cells': 2.0,
        'quadrature_step': 0.05,
        'pareto_c_grid': [0.0, 0.5, 1.0, 2.0, 4.0, 8.0]
    }

    # Regularidad de mapas (iteración de Campanato sobre mapas sintéticos)
    REGULARITY_CONFIG = {
        'theta': 1.0 / 7.0,
        'alpha': 0.5,
        'excess_cap': 0.1,
        'n_samples': 40_000,
        'annulus_angles': 2048,
        'annulus_radii': 48,
        'max_step_norm': 1.0,
        'min_scale': 1e-6,
        'k_max': 16
    }

    # Cascada de Campanato sobre emparejamientos
    CAMPANATO_CONFIG = {
        'initial_radius_fraction': 1.0 / 8.0,
        'radius_band': 0.15,
        'n_candidates': 8,
        'energy_cap': 1e6,
        'c_data': 0.5,
        'm_local': 32,
        'rstar_min_radius': 2.0
    }

    # Experimentos
    EXPERIMENT_CONFIG = {
        'schema_version': 1,
        'kinds': ['matching-scaling', 'harmonic-approx', 'epsreg-decay', 'cascade', 'rstar-tail'],
        'side_lengths': [8, 16, 32, 64],
        'seeds': 64,
        'seed_base': 0,
        'grid_factor': 2,
        'bootstrap_samples': 2000,
        'bootstrap_seed': 12345,
        'confidence_level': 0.95,
        'output_dir': 'runs',
        'max_threads': os.cpu_count() or 1
    }

    # Prefactor teórico de la ley log L en d = 2
    AKT_PREFACTOR = 1.0 / (2.0 * 3.141592653589793)

    @classmethod
    def max_threads(cls) -> int:
        """Número máximo de hilos: OTLAB_THREADS si está definida, si no el valor por defecto"""
        value = os.getenv('OTLAB_THREADS')
        if value is None or not value.strip():
            return cls.EXPERIMENT_CONFIG['max_threads']
        from utils import ConfigError
        try:
            threads = int(value)
        except ValueError:
            raise ConfigError(f"OTLAB_THREADS debe ser un entero positivo, recibido '{value}'")
        if threads < 1:
            raise ConfigError(f"OTLAB_THREADS debe ser un entero positivo, recibido '{value}'")
        return threads

    @classmethod
    def as_dict(cls) -> Dict[str, Any]:
        """Exporta la configuración por defecto como diccionario"""
        return {
            'GEOMETRY_CONFIG': cls.GEOMETRY_CONFIG,
            'SAMPLING_CONFIG': {k: v for k, v in cls.SAMPLING_CONFIG.items() if k != 'binary_magic'},
            'SOLVER_CONFIG': {k: v for k, v in cls.SOLVER_CONFIG.items() if k != 'binary_magic'},
            'FIELD_CONFIG': {k: v for k, v in cls.FIELD_CONFIG.items() if k != 'binary_magic'},
            'FLUX_CONFIG': cls.FLUX_CONFIG,
            'HARMONIC_CONFIG': cls.HARMONIC_CONFIG,
            'REGULARITY_CONFIG': cls.REGULARITY_CONFIG,
            'CAMPANATO_CONFIG': cls.CAMPANATO_CONFIG,
            'EXPERIMENT_CONFIG': cls.EXPERIMENT_CONFIG
        }
