"""
Transport Solvers for otlab
Problema de Kantorovich discreto con coste cuadrático (periódico o euclídeo):
solver exacto con certificado dual, Sinkhorn entrópico con recocido en ε,
oráculos independientes y diagnósticos de monotonía
"""

import os
import sys
import time
import struct
import logging
import itertools
from dataclasses import dataclass, field
from functools import cached_property
from typing import Dict, List, Any, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

# Añadir el directorio raíz al path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from config import Config
from geometry.torus import TorusDomain, COST_KINDS, ball_volume, cost_matrix, displacement, periodic_displacement
from measures.measures import DiscreteMeasure, restrict
from utils import (InvalidInputError, ResourceLimitError, ConvergenceError, DomainError,
                   SystemMonitor)

logger = logging.getLogger(__name__)

@dataclass
class SolveReport:
    """Resumen de una resolución de transporte"""
    method: str
    iterations: int
    marginal_error: float
    wall_time: float
    duality_gap: Optional[float] = None
    certificate_ok: Optional[bool] = None
    eps_schedule: Optional[List[float]] = None
    entropic_bias: Optional[float] = None
    split_sources: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'method': self.method,
            'iterations': int(self.iterations),
            'marginal_error': float(self.marginal_error),
            'wall_time': float(self.wall_time),
            'duality_gap': self.duality_gap,
            'certificate_ok': self.certificate_ok,
            'eps_schedule': self.eps_schedule,
            'entropic_bias': self.entropic_bias,
            'split_sources': int(self.split_sources),
            'extra': self.extra
        }

@dataclass(frozen=True, eq=False)
class TransportPlan:
    """Acoplamiento disperso (i, j, masa) entre dos medidas discretas"""
    source_index: np.ndarray
    target_index: np.ndarray
    mass: np.ndarray
    source: DiscreteMeasure
    target: DiscreteMeasure
    cost_kind: str
    total_cost: float
    method: str
    dual_source: Optional[np.ndarray] = None
    dual_target: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.cost_kind not in COST_KINDS:
            raise InvalidInputError(f"Tipo de coste desconocido: {self.cost_kind}")
        for name in ('source_index', 'target_index'):
            arr = np.asarray(getattr(self, name), dtype=np.int64).reshape(-1)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        mass = np.asarray(self.mass, dtype=np.float64).reshape(-1)
        mass.setflags(write=False)
        object.__setattr__(self, 'mass', mass)
        if not (self.source_index.size == self.target_index.size == mass.size):
            raise InvalidInputError("Los pares del plan tienen longitudes inconsistentes")
        if mass.size and np.any(mass <= 0):
            raise InvalidInputError("Las masas de los pares deben ser positivas")

    @property
    def domain(self) -> TorusDomain:
        return self.source.domain

    @property
    def n_pairs(self) -> int:
        return int(self.mass.size)

    @property
    def source_points(self) -> np.ndarray:
        return self.source.points[self.source_index]

    @property
    def target_points(self) -> np.ndarray:
        return self.target.points[self.target_index]

    @cached_property
    def displacements(self) -> np.ndarray:
        """Desplazamientos y - x con y anclado en su representante mínimo alrededor de x"""
        disp = displacement(self.source_points, self.target_points, self.domain, self.cost_kind)
        disp.setflags(write=False)
        return disp

    def pair_costs(self) -> np.ndarray:
        return np.sum(self.displacements ** 2, axis=1)

    def source_marginal(self) -> np.ndarray:
        return np.bincount(self.source_index, weights=self.mass, minlength=len(self.source))

    def target_marginal(self) -> np.ndarray:
        return np.bincount(self.target_index, weights=self.mass, minlength=len(self.target))

    def marginal_error(self) -> float:
        """Máximo error relativo de marginales"""
        scale = max(self.source.total_mass, np.finfo(float).tiny)
        err_src = np.max(np.abs(self.source_marginal() - self.source.masses), initial=0.0)
        err_tgt = np.max(np.abs(self.target_marginal() - self.target.masses), initial=0.0)
        return float(max(err_src, err_tgt) / scale)

    def split_sources(self) -> int:
        """Número de átomos fuente cuya masa se reparte entre varios destinos"""
        counts = np.bincount(self.source_index, minlength=len(self.source))
        return int(np.sum(counts > 1))

    def to_json_dict(self) -> Dict[str, Any]:
        pairs = [[int(i), int(j), float(m)] for i, j, m in zip(self.source_index, self.target_index, self.mass)]
        return {'pairs': pairs, 'cost': float(self.total_cost), 'method': self.method, 'cost_kind': self.cost_kind}

    @classmethod
    def from_json_dict(cls, data: Dict[str, Any], source: DiscreteMeasure, target: DiscreteMeasure) -> 'TransportPlan':
        pairs = np.asarray(data.get('pairs', []), dtype=np.float64).reshape(-1, 3)
        return cls(pairs[:, 0].astype(np.int64), pairs[:, 1].astype(np.int64), pairs[:, 2], source, target,
                   data.get('cost_kind', 'periodic'), float(data['cost']), data.get('method', 'unknown'))

    def to_bytes(self) -> bytes:
        """Formato binario OTP1: cabecera (magic, count, cost) + tripletas little-endian"""
        header = Config.SOLVER_CONFIG['binary_magic'] + struct.pack('<Qd', self.n_pairs, self.total_cost)
        records = np.empty(self.n_pairs, dtype=[('i', '<u8'), ('j', '<u8'), ('mass', '<f8')])
        records['i'] = self.source_index
        records['j'] = self.target_index
        records['mass'] = self.mass
        return header + records.tobytes()

    @classmethod
    def from_bytes(cls, payload: bytes, source: DiscreteMeasure, target: DiscreteMeasure,
                   cost_kind: str = 'periodic', method: str = 'unknown') -> 'TransportPlan':
        if payload[:4] != Config.SOLVER_CONFIG['binary_magic']:
            raise InvalidInputError("Cabecera OTP1 inválida")
        count, total_cost = struct.unpack('<Qd', payload[4:20])
        records = np.frombuffer(payload[20:], dtype=[('i', '<u8'), ('j', '<u8'), ('mass', '<f8')])
        if records.size != count:
            raise InvalidInputError("Tamaño de carga OTP1 inconsistente con la cabecera")
        return cls(records['i'].astype(np.int64), records['j'].astype(np.int64), records['mass'].astype(np.float64),
                   source, target, cost_kind, total_cost, method)

@dataclass
class MonotonicityReport:
    """Violaciones de (x₁-x₂)·(y₁-y₂) >= 0 sobre el soporte"""
    violations: int
    worst_pair: Optional[Tuple[int, int]]
    worst_inner: float
    checked_pairs: int
    subsampled: bool
    tolerance: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'violations': int(self.violations),
            'worst_pair': list(self.worst_pair) if self.worst_pair is not None else None,
            'worst_inner': float(self.worst_inner),
            'checked_pairs': int(self.checked_pairs),
            'subsampled': bool(self.subsampled),
            'tolerance': float(self.tolerance)
        }

# Construcción de planes

def _check_instance(src: DiscreteMeasure, tgt: DiscreteMeasure, cost: str):
    if cost not in COST_KINDS:
        raise InvalidInputError(f"Tipo de coste desconocido: {cost}")
    if src.domain != tgt.domain:
        raise InvalidInputError("Las medidas viven en dominios distintos")
    if len(src) == 0 or len(tgt) == 0:
        raise InvalidInputError("Medida vacía")
    total_src, total_tgt = src.total_mass, tgt.total_mass
    if abs(total_src - total_tgt) > Config.SOLVER_CONFIG['mass_tolerance'] * max(total_src, total_tgt):
        raise InvalidInputError(f"Masas totales distintas: {total_src:.12g} vs {total_tgt:.12g}")

def _check_resources(n_entries: int, memory_budget: Optional[int]) -> bool:
    """Comprueba el límite de entradas; devuelve True si la matriz cabe en memoria"""
    if n_entries > Config.SOLVER_CONFIG['cost_entry_cap']:
        raise ResourceLimitError(f"{n_entries} entradas de coste superan el límite práctico; usar solve_entropic")
    budget = memory_budget or Config.SOLVER_CONFIG['memory_budget_bytes']
    available = SystemMonitor().available_memory()
    if available is not None:
        budget = min(budget, available)
    # coste + plan denso + temporales
    return 3 * 8 * n_entries <= budget

def _plan_from_dense(plan_matrix: np.ndarray, costs: np.ndarray, src: DiscreteMeasure, tgt: DiscreteMeasure,
                     cost: str, method: str, duals: Tuple[np.ndarray, np.ndarray] = (None, None)) -> TransportPlan:
    threshold = Config.SOLVER_CONFIG['support_threshold'] * max(float(plan_matrix.max(initial=0.0)), np.finfo(float).tiny)
    rows, cols = np.nonzero(plan_matrix > threshold)
    mass = plan_matrix[rows, cols]
    total_cost = float(np.sum(mass * costs[rows, cols]))
    return TransportPlan(rows, cols, mass, src, tgt, cost, total_cost, method, duals[0], duals[1])

def plan_from_arrays(sources, targets, masses, dom: TorusDomain, cost: str = 'euclidean',
                     method: str = 'constructed') -> TransportPlan:
    """Plan con emparejamiento identidad i -> i entre átomos dados"""
    masses = np.asarray(masses, dtype=float).reshape(-1)
    src = DiscreteMeasure(sources, masses, dom, 'custom')
    tgt = DiscreteMeasure(targets, masses, dom, 'custom')
    index = np.arange(masses.size)
    disp = displacement(src.points, tgt.points, dom, cost)
    total_cost = float(np.sum(masses * np.sum(disp * disp, axis=1)))
    return TransportPlan(index, index, masses, src, tgt, cost, total_cost, method)

def _dual_certificate(u: np.ndarray, v: np.ndarray, src: DiscreteMeasure, tgt: DiscreteMeasure, cost: str,
                      plan: TransportPlan, mean_cost: float) -> Dict[str, Any]:
    """Factibilidad dual y holgura complementaria por bloques"""
    tol = Config.SOLVER_CONFIG['certificate_tolerance'] * mean_cost + 1e-14
    block = Config.SOLVER_CONFIG['cost_block_rows']
    min_slack = np.inf
    for start in range(0, len(src), block):
        stop = min(start + block, len(src))
        costs = cost_matrix(src.points[start:stop], tgt.points, src.domain, cost)
        slack = costs - u[start:stop, None] - v[None, :]
        min_slack = min(min_slack, float(slack.min()))

    support_slack = plan.pair_costs() - u[plan.source_index] - v[plan.target_index]
    max_support = float(np.max(np.abs(support_slack), initial=0.0))
    return {
        'tolerance': tol,
        'min_slack': min_slack,
        'max_support_slack': max_support,
        'feasible': bool(min_slack >= -tol),
        'complementary': bool(max_support <= tol)
    }

# Solvers

def solve_exact(src: DiscreteMeasure, tgt: DiscreteMeasure, cost: str = 'periodic',
                memory_budget: Optional[int] = None, max_iter: Optional[int] = None) -> Tuple[TransportPlan, SolveReport]:
    """Transporte óptimo exacto (network simplex) con certificado dual"""
    import ot

    _check_instance(src, tgt, cost)
    if not _check_resources(len(src) * len(tgt), memory_budget):
        raise ResourceLimitError(f"La matriz de costes {len(src)}x{len(tgt)} no cabe en el presupuesto de memoria")

    start_time = time.perf_counter()
    a = np.ascontiguousarray(src.masses, dtype=np.float64)
    b = np.ascontiguousarray(tgt.masses * (src.total_mass / tgt.total_mass), dtype=np.float64)
    costs = cost_matrix(src.points, tgt.points, src.domain, cost)

    plan_matrix, log = ot.emd(a, b, costs, numItermax=max_iter or Config.SOLVER_CONFIG['emd_max_iter'], log=True)
    if log.get('warning'):
        raise ConvergenceError(f"Network simplex sin óptimo: {log['warning']}",
                               diagnostics={'result_code': log.get('result_code'), 'cost': float(log.get('cost', np.nan))})

    u = np.asarray(log['u'], dtype=np.float64)
    v = np.asarray(log['v'], dtype=np.float64)
    plan = _plan_from_dense(plan_matrix, costs, src, tgt, cost, 'network_simplex', (u, v))
    mean_cost = float(costs.mean())
    del plan_matrix, costs

    certificate = _dual_certificate(u, v, src, tgt, cost, plan, mean_cost)
    dual_value = float(a @ u + b @ v)
    duality_gap = plan.total_cost - dual_value
    if not (certificate['feasible'] and certificate['complementary']):
        logger.warning(f"Certificado dual fuera de tolerancia: {certificate}")

    report = SolveReport(
        method='network_simplex',
        iterations=0,
        marginal_error=plan.marginal_error(),
        wall_time=time.perf_counter() - start_time,
        duality_gap=duality_gap,
        certificate_ok=certificate['feasible'] and certificate['complementary'],
        split_sources=plan.split_sources(),
        extra={'certificate': certificate, 'result_code': log.get('result_code'), 'mean_cost': mean_cost}
    )
    logger.debug(f"solve_exact: {len(src)}x{len(tgt)}, coste {plan.total_cost:.6g}, gap {duality_gap:.3g}")
    return plan, report

def _validate_schedule(eps_schedule: Sequence[float]) -> List[float]:
    schedule = [float(eps) for eps in eps_schedule]
    if not schedule:
        raise InvalidInputError("El calendario de ε está vacío")
    if any(eps <= 0 or not np.isfinite(eps) for eps in schedule):
        raise InvalidInputError("Los valores de ε deben ser positivos")
    if any(later >= earlier for earlier, later in zip(schedule, schedule[1:])):
        raise InvalidInputError("El calendario de ε debe ser estrictamente decreciente")
    return schedule

def _blocked_sinkhorn_log(a: np.ndarray, b: np.ndarray, src: DiscreteMeasure, tgt: DiscreteMeasure, cost: str,
                          reg: float, num_iter_max: int, stop_thr: float,
                          warmstart: Optional[Tuple[np.ndarray, np.ndarray]]) -> Tuple[np.ndarray, np.ndarray, int]:
    """Sinkhorn en dominio logarítmico con la matriz de costes recalculada por bloques"""
    block = Config.SOLVER_CONFIG['cost_block_rows']
    loga, logb = np.log(a), np.log(b)
    u = np.zeros(a.size) if warmstart is None else np.array(warmstart[0], dtype=float)
    v = np.zeros(b.size) if warmstart is None else np.array(warmstart[1], dtype=float)

    def column_lse(u_vec):
        acc = np.full(b.size, -np.inf)
        for start in range(0, a.size, block):
            stop = min(start + block, a.size)
            Mr = -cost_matrix(src.points[start:stop], tgt.points, src.domain, cost) / reg
            acc = np.logaddexp(acc, logsumexp(Mr + u_vec[start:stop, None], axis=0))
        return acc

    def row_lse(v_vec):
        out = np.empty(a.size)
        for start in range(0, a.size, block):
            stop = min(start + block, a.size)
            Mr = -cost_matrix(src.points[start:stop], tgt.points, src.domain, cost) / reg
            out[start:stop] = logsumexp(Mr + v_vec[None, :], axis=1)
        return out

    niter = 0
    for niter in range(1, num_iter_max + 1):
        v = logb - column_lse(u)
        u = loga - row_lse(v)
        if niter % 10 == 0:
            err = np.linalg.norm(np.exp(column_lse(u) + v) - b)
            if err < stop_thr:
                break
    return u, v, niter

def _blocked_plan(u: np.ndarray, v: np.ndarray, src: DiscreteMeasure, tgt: DiscreteMeasure, cost: str,
                  reg: float, scale: float, method: str) -> TransportPlan:
    block = Config.SOLVER_CONFIG['cost_block_rows']
    rows_all, cols_all, mass_all, cost_all = [], [], [], []
    for start in range(0, len(src), block):
        stop = min(start + block, len(src))
        costs = cost_matrix(src.points[start:stop], tgt.points, src.domain, cost)
        plan_block = np.exp(u[start:stop, None] - costs / reg + v[None, :]) * scale
        rows, cols = np.nonzero(plan_block > 0)
        rows_all.append(rows + start)
        cols_all.append(cols)
        mass_all.append(plan_block[rows, cols])
        cost_all.append(costs[rows, cols])
    mass = np.concatenate(mass_all)
    total_cost = float(np.sum(mass * np.concatenate(cost_all)))
    return TransportPlan(np.concatenate(rows_all), np.concatenate(cols_all), mass, src, tgt, cost, total_cost, method)

def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))

def solve_entropic(src: DiscreteMeasure, tgt: DiscreteMeasure, cost: str = 'periodic',
                   eps_schedule: Optional[Sequence[float]] = None, marginal_tol: Optional[float] = None,
                   max_iter: Optional[int] = None, memory_budget: Optional[int] = None) -> Tuple[TransportPlan, SolveReport]:
    """Sinkhorn logarítmico con recocido de ε y arranque en caliente; el sesgo entrópico se reporta, no se resta"""
    import ot

    _check_instance(src, tgt, cost)
    schedule = _validate_schedule(eps_schedule if eps_schedule is not None else Config.SOLVER_CONFIG['eps_schedule'])
    marginal_tol = Config.SOLVER_CONFIG['marginal_tolerance'] if marginal_tol is None else float(marginal_tol)
    if marginal_tol <= 0:
        raise InvalidInputError(f"marginal_tol debe ser positivo: {marginal_tol}")
    max_iter = max_iter or Config.SOLVER_CONFIG['sinkhorn_max_iter']
    fits_in_memory = _check_resources(len(src) * len(tgt), memory_budget)

    start_time = time.perf_counter()
    total = src.total_mass
    a = src.masses / total
    b = tgt.masses / tgt.total_mass
    # error L1 <= sqrt(m)·error L2 en la marginal de columnas
    stop_thr = 0.5 * marginal_tol / np.sqrt(b.size)

    costs = cost_matrix(src.points, tgt.points, src.domain, cost) if fits_in_memory else None
    log_u = log_v = None
    previous_eps = None
    iterations = 0
    plan_matrix = None
    for stage, eps in enumerate(schedule):
        warmstart = None
        if log_u is not None:
            warmstart = (log_u * previous_eps / eps, log_v * previous_eps / eps)
        if fits_in_memory:
            plan_matrix, log = ot.bregman.sinkhorn_log(a, b, costs, eps, numItermax=max_iter, stopThr=stop_thr,
                                                       log=True, warn=False, warmstart=warmstart)
            log_u, log_v = np.asarray(log['log_u']), np.asarray(log['log_v'])
            stage_iter = int(log.get('niter', max_iter))
        else:
            log_u, log_v, stage_iter = _blocked_sinkhorn_log(a, b, src, tgt, cost, eps, max_iter, stop_thr, warmstart)
        iterations += stage_iter
        previous_eps = eps
        logger.debug(f"solve_entropic: etapa {stage} ε={eps:.4g}, {stage_iter} iteraciones")

    eps_final = schedule[-1]
    if fits_in_memory:
        plan = _plan_from_dense(plan_matrix * total, costs, src, tgt, cost, 'sinkhorn_log')
        row_err = np.abs(plan_matrix.sum(axis=1) - a).sum()
        col_err = np.abs(plan_matrix.sum(axis=0) - b).sum()
    else:
        plan = _blocked_plan(log_u, log_v, src, tgt, cost, eps_final, total, 'sinkhorn_log_blocked')
        row_err = np.abs(plan.source_marginal() / total - a).sum()
        col_err = np.abs(plan.target_marginal() / total - b).sum()
    marginal_error = float(row_err + col_err)

    bias = eps_final * total * min(_entropy(a), _entropy(b))
    diagnostics = {
        'eps_final': eps_final,
        'iterations': iterations,
        'marginal_error': marginal_error,
        'cost': plan.total_cost
    }
    if not np.isfinite(marginal_error) or marginal_error > marginal_tol:
        raise ConvergenceError(f"Sinkhorn no alcanzó la tolerancia de marginales ({marginal_error:.3g} > {marginal_tol:.3g})",
                               diagnostics=diagnostics)

    report = SolveReport(
        method=plan.method,
        iterations=iterations,
        marginal_error=marginal_error,
        wall_time=time.perf_counter() - start_time,
        eps_schedule=schedule,
        entropic_bias=bias,
        split_sources=plan.split_sources(),
        extra={'blocked': not fits_in_memory}
    )
    return plan, report

# Oráculos independientes

def brute_force_oracle(src: DiscreteMeasure, tgt: DiscreteMeasure, cost: str = 'periodic') -> TransportPlan:
    """Mínimo exhaustivo sobre las n! permutaciones (instancias biyectivas de masa uniforme)"""
    n = len(src)
    if n != len(tgt):
        raise InvalidInputError("El oráculo exhaustivo requiere el mismo número de átomos")
    if n > Config.SOLVER_CONFIG['brute_force_max_atoms']:
        raise ResourceLimitError(f"n = {n} demasiado grande para enumeración exhaustiva")
    _check_instance(src, tgt, cost)
    unit = src.masses[0]
    if not (np.allclose(src.masses, unit, rtol=1e-12, atol=0) and np.allclose(tgt.masses, unit, rtol=1e-12, atol=0)):
        raise InvalidInputError("El oráculo exhaustivo requiere masas iguales")

    costs = cost_matrix(src.points, tgt.points, src.domain, cost)
    permutations = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
    totals = costs[np.arange(n)[None, :], permutations].sum(axis=1) * unit
    best = permutations[int(np.argmin(totals))]
    rows = np.arange(n)
    return TransportPlan(rows, best, np.full(n, unit), src, tgt, cost,
                         float(np.sum(costs[rows, best]) * unit), 'brute_force')

def linear_program_oracle(src: DiscreteMeasure, tgt: DiscreteMeasure, cost: str = 'periodic') -> TransportPlan:
    """Resolución independiente como programa lineal (HiGHS) para masas arbitrarias"""
    from scipy.optimize import linprog
    from scipy.sparse import kron, identity, csr_matrix, vstack

    _check_instance(src, tgt, cost)
    n, m = len(src), len(tgt)
    costs = cost_matrix(src.points, tgt.points, src.domain, cost)
    row_sums = kron(identity(n), csr_matrix(np.ones((1, m))))
    col_sums = kron(csr_matrix(np.ones((1, n))), identity(m))
    b_eq = np.concatenate([src.masses, tgt.masses * (src.total_mass / tgt.total_mass)])
    result = linprog(costs.reshape(-1), A_eq=vstack([row_sums, col_sums]).tocsr(), b_eq=b_eq,
                     bounds=(0, None), method='highs')
    if not result.success:
        raise ConvergenceError(f"linprog falló: {result.message}", diagnostics={'status': int(result.status)})
    return _plan_from_dense(result.x.reshape(n, m), costs, src, tgt, cost, 'linear_program')

# Diagnósticos

def check_monotonicity(plan: TransportPlan, tol: Optional[float] = None, max_pairs: Optional[int] = None,
                       seed: int = 0) -> MonotonicityReport:
    """Cuenta pares del soporte con (x₁-x₂)·(y₁-y₂) < -tol usando representantes anclados en x₁"""
    tol = 1e-9 * plan.domain.side_length ** 2 if tol is None else tol
    max_pairs = max_pairs or Config.SOLVER_CONFIG['monotonicity_max_pairs']

    indices = np.arange(plan.n_pairs)
    subsampled = plan.n_pairs > max_pairs
    if subsampled:
        rng = np.random.default_rng(seed)
        indices = np.sort(rng.choice(plan.n_pairs, size=max_pairs, replace=False))

    x = plan.source_points[indices]
    v = plan.displacements[indices]
    violations = 0
    worst_inner = np.inf
    worst_pair = None
    checked = 0
    for i in range(indices.size - 1):
        # x₂ anclado alrededor de x₁; y₁ - y₂ = v₁ - (d₁₂ + v₂)
        d12 = displacement(x[i], x[i + 1:], plan.domain, plan.cost_kind)
        inner = np.einsum('ij,ij->i', d12, d12) - np.einsum('ij,ij->i', d12, v[i] - v[i + 1:])
        checked += inner.size
        bad = inner < -tol
        violations += int(bad.sum())
        k = int(np.argmin(inner))
        if inner[k] < worst_inner:
            worst_inner = float(inner[k])
            worst_pair = (int(indices[i]), int(indices[i + 1 + k]))

    if worst_pair is None:
        worst_inner = 0.0
    return MonotonicityReport(violations, worst_pair, worst_inner, checked, subsampled, tol)

def disk_rectangle_overlap(x0: float, x1: float, y0: float, y1: float, radius: float) -> float:
    """Área exacta de la intersección del disco centrado en 0 con el rectángulo [x0,x1]x[y0,y1]"""
    R2 = radius * radius

    def chord_primitive(x):
        x = min(max(x, -radius), radius)
        return 0.5 * (x * np.sqrt(max(R2 - x * x, 0.0)) + R2 * np.arcsin(x / radius))

    a, b = max(x0, -radius), min(x1, radius)
    if a >= b:
        return 0.0
    cuts = {a, b}
    for y in (y0, y1):
        if abs(y) < radius:
            xc = np.sqrt(R2 - y * y)
            for c in (-xc, xc):
                if a < c < b:
                    cuts.add(c)
    points = sorted(cuts)

    area = 0.0
    for lo, hi in zip(points[:-1], points[1:]):
        mid = 0.5 * (lo + hi)
        s = np.sqrt(max(R2 - mid * mid, 0.0))
        top_circle = s < y1
        bottom_circle = -s > y0
        top = s if top_circle else y1
        bottom = -s if bottom_circle else y0
        if top <= bottom:
            continue
        arc = chord_primitive(hi) - chord_primitive(lo)
        width = hi - lo
        area += (arc if top_circle else y1 * width) - (-arc if bottom_circle else y0 * width)
    return float(area)

def ball_cells(radius: float, m_local: int, dimension: int = 2, subsamples: int = 8) -> Tuple[np.ndarray, np.ndarray]:
    """Celdas de una malla m_local^d sobre [-R, R]^d intersecadas con B_R: (centroides, áreas)"""
    if m_local < 1:
        raise InvalidInputError(f"m_local inválido: {m_local}")
    h = 2.0 * radius / m_local
    lower = -radius + np.arange(m_local) * h
    mesh = np.meshgrid(*([lower] * dimension), indexing='ij')
    lo = np.column_stack([g.reshape(-1) for g in mesh])
    hi = lo + h

    nearest = np.where(lo > 0, lo, np.where(hi < 0, hi, 0.0))
    farthest = np.maximum(np.abs(lo), np.abs(hi))
    near2 = np.sum(nearest ** 2, axis=1)
    far2 = np.sum(farthest ** 2, axis=1)
    R2 = radius * radius

    inside = far2 <= R2
    boundary = (~inside) & (near2 < R2)

    centroids = [0.5 * (lo[inside] + hi[inside])]
    areas = [np.full(int(inside.sum()), h ** dimension)]

    offsets = (np.arange(subsamples) + 0.5) / subsamples * h
    sub_mesh = np.meshgrid(*([offsets] * dimension), indexing='ij')
    sub = np.column_stack([g.reshape(-1) for g in sub_mesh])
    b_centroids, b_areas = [], []
    for corner, upper in zip(lo[boundary], hi[boundary]):
        samples = corner + sub
        keep = np.sum(samples ** 2, axis=1) < R2
        if dimension == 2:
            area = disk_rectangle_overlap(corner[0], upper[0], corner[1], upper[1], radius)
        else:
            area = h ** dimension * keep.mean()
        if area <= 0:
            continue
        if keep.any():
            centroid = samples[keep].mean(axis=0)
        else:
            centre = 0.5 * (corner + upper)
            centroid = centre * (0.999 * radius / np.linalg.norm(centre))
        b_centroids.append(centroid)
        b_areas.append(area)

    if b_areas:
        centroids.append(np.asarray(b_centroids))
        areas.append(np.asarray(b_areas))
    return np.concatenate(centroids, axis=0), np.concatenate(areas)

def ball_lebesgue_grid(dom: TorusDomain, center, radius: float, m_local: int, kappa: float) -> DiscreteMeasure:
    """Discretización de κ·χ_{B_R}(centro) con masa total κ|B_R|"""
    centroids, areas = ball_cells(radius, m_local, dom.dimension)
    masses = areas * (kappa * ball_volume(radius, dom.dimension) / areas.sum())
    return DiscreteMeasure(np.asarray(center, dtype=float) + centroids, masses, dom, 'grid',
                           {'m_local': int(m_local), 'kappa': float(kappa)})

def local_wasserstein(mu: DiscreteMeasure, center, radius: float, m_local: int) -> Tuple[float, float]:
    """W_{B_R}(μ, κ) con κ = μ(B_R)/|B_R| y coste euclídeo dentro de la bola"""
    restricted = restrict(mu, center, radius)
    if len(restricted) == 0:
        raise DomainError(f"Restricción vacía en B_{radius:g}({center})")

    d = mu.domain.dimension
    kappa = restricted.total_mass / ball_volume(radius, d)
    local_domain = TorusDomain(4.0 * radius, d)
    local_points = periodic_displacement(np.asarray(center, dtype=float), restricted.points, mu.domain)
    local_source = DiscreteMeasure(local_points, restricted.masses, local_domain, 'restriction')

    local_target = ball_lebesgue_grid(local_domain, np.zeros(d), radius, m_local, kappa)

    plan, _ = solve_exact(local_source, local_target, cost='euclidean')
    return float(np.sqrt(max(plan.total_cost, 0.0))), float(kappa)
