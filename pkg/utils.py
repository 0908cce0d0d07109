"""
Utilities and Helper Functions for otlab
Funciones de utilidad: errores, logging, persistencia atómica, hashing y bootstrap
"""

import os
import json
import time
import hashlib
import logging
import logging.config
import tempfile
from datetime import datetime
from functools import wraps
from typing import Dict, Any, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Taxonomía de errores

class OTLabError(Exception):
    """Error base de otlab"""

class InvalidInputError(OTLabError, ValueError):
    """Entrada inválida (masas, dominios, parámetros fuera de rango)"""

class ResourceLimitError(OTLabError):
    """Se supera un límite práctico de recursos"""

class ConvergenceError(OTLabError):
    """Un solver iterativo no converge; lleva el diagnóstico de la última iteración"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}

class DomainError(OTLabError):
    """Restricción o ventana vacía"""

class SamplingError(OTLabError):
    """Las muestras no cubren la región requerida"""

class ResolutionError(OTLabError):
    """Resolución de malla insuficiente para la operación"""

class StepRejectedError(OTLabError):
    """Paso de Campanato fuera del régimen perturbativo"""

    def __init__(self, message: str, diagnostics: Optional[Dict[str, Any]] = None, partial_trace: Any = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
        self.partial_trace = partial_trace

class ConfigError(OTLabError):
    """Error de configuración de experimento"""

class SystemMonitor:
    """Instantánea de recursos del sistema para manifiestos y presupuestos de memoria"""

    def __init__(self):
        self.start_time = datetime.now()
        self.metrics = {}

    def record_metric(self, metric_name: str, value: float):
        """Registra una métrica"""
        self.metrics.setdefault(metric_name, []).append(value)

    def available_memory(self) -> Optional[int]:
        """Memoria disponible en bytes (None si psutil no está disponible)"""
        try:
            import psutil
            return int(psutil.virtual_memory().available)
        except ImportError:
            logger.warning("psutil no disponible para métricas de memoria")
            return None

    def snapshot(self) -> Dict[str, Any]:
        """Obtiene el estado de recursos del sistema"""
        try:
            import psutil

            memory = psutil.virtual_memory()
            snapshot = {
                'cpu_count': psutil.cpu_count(logical=True),
                'memory_total': int(memory.total),
                'memory_available': int(memory.available),
                'process_rss': int(psutil.Process(os.getpid()).memory_info().rss)
            }
        except ImportError:
            logger.warning("psutil no disponible para métricas del sistema")
            snapshot = {'cpu_count': os.cpu_count(), 'status': 'monitoring_limited'}

        for metric_name, values in self.metrics.items():
            if values:
                snapshot[f'{metric_name}_total'] = float(sum(values))
                snapshot[f'{metric_name}_max'] = float(max(values))
        return snapshot

# Funciones de utilidad globales

def setup_logging(log_level: str = 'INFO', config_path: Optional[str] = None):
    """Configura logging del sistema desde config/logging.json"""
    numeric_level = getattr(logging, log_level.upper(), None)
    if not isinstance(numeric_level, int):
        raise ConfigError(f'Invalid log level: {log_level}')

    if config_path and os.path.exists(config_path):
        with open(config_path, 'r', encoding='utf-8') as f:
            logging_config = json.load(f)

        for handler in logging_config.get('handlers', {}).values():
            filename = handler.get('filename')
            if filename:
                if not os.path.isabs(filename):
                    filename = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(config_path))), filename)
                    handler['filename'] = filename
                ensure_directory(os.path.dirname(filename))

        logging_config.setdefault('loggers', {}).setdefault('', {})['level'] = log_level.upper()
        logging.config.dictConfig(logging_config)
    else:
        logging.basicConfig(level=numeric_level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')

def ensure_directory(directory_path: str):
    """Asegura que un directorio existe"""
    if directory_path:
        os.makedirs(directory_path, exist_ok=True)

def convert_numpy(obj: Any) -> Any:
    """Convierte tipos numpy a tipos nativos serializables en JSON"""
    if isinstance(obj, np.ndarray):
        return convert_numpy(obj.tolist())
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return convert_numpy(float(obj))
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, float):
        if np.isnan(obj):
            return None
        if np.isinf(obj):
            return 'inf' if obj > 0 else '-inf'
        return obj
    if isinstance(obj, dict):
        return {str(key): convert_numpy(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [convert_numpy(item) for item in obj]
    return obj

def canonical_json(data: Any) -> str:
    """Serialización JSON canónica (claves ordenadas, sin espacios)"""
    return json.dumps(convert_numpy(data), sort_keys=True, separators=(',', ':'), ensure_ascii=False)

def content_hash(data: Any) -> str:
    """SHA-256 del JSON canónico de un objeto (o de bytes)"""
    if isinstance(data, bytes):
        payload = data
    else:
        payload = canonical_json(data).encode('utf-8')
    return hashlib.sha256(payload).hexdigest()

def atomic_write_bytes(path: str, payload: bytes):
    """Escribe un archivo de forma atómica (temporal + rename)"""
    directory = os.path.dirname(os.path.abspath(path))
    ensure_directory(directory)
    fd, tmp_path = tempfile.mkstemp(prefix='.tmp_', dir=directory)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except Exception:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise

def atomic_write_text(path: str, text: str):
    """Escribe texto UTF-8 de forma atómica"""
    atomic_write_bytes(path, text.encode('utf-8'))

def write_json(path: str, data: Any, indent: int = 2):
    """Guarda un documento JSON de forma atómica"""
    atomic_write_text(path, json.dumps(convert_numpy(data), indent=indent, sort_keys=True, ensure_ascii=False) + '\n')

def read_json(path: str) -> Any:
    """Lee un documento JSON"""
    with open(path, 'r', encoding='utf-8') as f:
        return json.load(f)

def bootstrap_ci(values: Sequence[float], statistic=np.mean, n_bootstrap: int = 2000,
                 confidence: float = 0.95, seed: int = 12345) -> Tuple[float, float]:
    """Intervalo de confianza bootstrap por percentiles (determinista en la semilla)"""
    data = np.asarray(values, dtype=float)
    data = data[np.isfinite(data)]
    if data.size == 0:
        return float('nan'), float('nan')
    if data.size == 1:
        return float(data[0]), float(data[0])

    rng = np.random.default_rng(seed)
    indices = rng.integers(0, data.size, size=(n_bootstrap, data.size))
    estimates = np.apply_along_axis(statistic, 1, data[indices])
    alpha = (1.0 - confidence) / 2.0
    return float(np.percentile(estimates, 100 * alpha)), float(np.percentile(estimates, 100 * (1 - alpha)))

def safe_divide(numerator: float, denominator: float, default: float = 0.0) -> float:
    """División segura que evita división por cero"""
    try:
        return numerator / denominator if denominator != 0 else default
    except (TypeError, ZeroDivisionError):
        return default

def timing(func):
    """Decorador para medir tiempo de ejecución"""
    @wraps(func)
    def wrapper(*args, **kwargs):
        start_time = time.perf_counter()
        result = func(*args, **kwargs)
        logger.debug(f"{func.__name__} ejecutado en {time.perf_counter() - start_time:.3f} segundos")
        return result
    return wrapper
