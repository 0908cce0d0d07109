"""
otlab - Main Application
Línea de comandos: run, fit, inspect y oracle sobre el laboratorio de transporte óptimo
"""

import os
import sys
import json
import logging
import argparse

# Añadir el directorio actual al path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from config import Config
from experiments.experiment_runner import load_config, run, fit_prefactor, inspect_artifact, oracle_check
from utils import ConfigError, OTLabError, convert_numpy, read_json, setup_logging

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2

def _print_json(data):
    print(json.dumps(convert_numpy(data), indent=2, sort_keys=True, ensure_ascii=False))

def cmd_run(args) -> int:
    """Ejecuta un experimento desde su TOML"""
    config = load_config(args.config)
    result = run(config, output_dir=args.output_dir, max_threads=args.threads)
    print(f"📁 Directorio: {result.run_dir}")
    print(f"✅ Calculadas: {result.computed}  ⏭️  Omitidas: {result.skipped}  ❌ Fallidas: {result.failed}")
    if result.exit_code != EXIT_OK:
        print("❌ Todas las celdas fallaron")
    return result.exit_code

def cmd_fit(args) -> int:
    """Ajusta el prefactor sobre un summary.csv o cells.csv"""
    result = fit_prefactor(args.summary, model=args.model, statistic=args.statistic,
                           n_bootstrap=args.bootstrap, seed=args.seed)
    _print_json(result.to_dict())
    return EXIT_OK

def cmd_inspect(args) -> int:
    """Muestra un JSON de celda o un artefacto binario"""
    _print_json(inspect_artifact(args.path))
    return EXIT_OK

def cmd_oracle(args) -> int:
    """Compara el solver exacto con el oráculo sobre una instancia JSON"""
    report = oracle_check(read_json(args.instance), rtol=args.rtol)
    _print_json(report)
    return EXIT_OK if report['agree'] else EXIT_ERROR

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='otlab', description='Laboratorio numérico de transporte óptimo')
    parser.add_argument('--log-level', default='INFO', help='Nivel de logging (DEBUG, INFO, WARNING, ...)')
    subparsers = parser.add_subparsers(dest='command', required=True)

    run_parser = subparsers.add_parser('run', help='Ejecutar un experimento')
    run_parser.add_argument('config', help='Archivo TOML del experimento')
    run_parser.add_argument('--output-dir', default=None, help='Directorio de salida (sustituye al del TOML)')
    run_parser.add_argument('--threads', type=int, default=None, help='Hilos (por defecto OTLAB_THREADS)')
    run_parser.set_defaults(handler=cmd_run)

    fit_parser = subparsers.add_parser('fit', help='Ajustar la pendiente frente a log L')
    fit_parser.add_argument('summary', help='summary.csv o cells.csv de una ejecución')
    fit_parser.add_argument('--model', choices=['log', 'power'], default='log', help='Modelo de ajuste')
    fit_parser.add_argument('--statistic', default='w2_over_volume', help='Estadístico a ajustar')
    fit_parser.add_argument('--bootstrap', type=int, default=Config.EXPERIMENT_CONFIG['bootstrap_samples'],
                            help='Remuestreos bootstrap')
    fit_parser.add_argument('--seed', type=int, default=Config.EXPERIMENT_CONFIG['bootstrap_seed'],
                            help='Semilla del bootstrap')
    fit_parser.set_defaults(handler=cmd_fit)

    inspect_parser = subparsers.add_parser('inspect', help='Inspeccionar un artefacto')
    inspect_parser.add_argument('path', help='JSON de celda o binario .otm/.otp/.otf')
    inspect_parser.set_defaults(handler=cmd_inspect)

    oracle_parser = subparsers.add_parser('oracle', help='Comprobar el solver exacto contra el oráculo')
    oracle_parser.add_argument('instance', help='Instancia JSON {L, d, cost, source, target}')
    oracle_parser.add_argument('--rtol', type=float, default=1e-9, help='Tolerancia relativa')
    oracle_parser.set_defaults(handler=cmd_oracle)
    return parser

def main(argv=None) -> int:
    """Función principal: devuelve el código de salida"""
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        setup_logging(args.log_level, Config.LOGGING_CONFIG_PATH)
    except ConfigError as e:
        print(f"❌ Error de configuración: {e}")
        return EXIT_CONFIG

    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Error de configuración: {str(e)}")
        print(f"❌ Error de configuración: {e}")
        return EXIT_CONFIG
    except (OTLabError, OSError) as e:
        logger.error(f"Error en {args.command}: {str(e)}")
        print(f"❌ Error: {e}")
        return EXIT_ERROR
    except KeyboardInterrupt:
        print("\n⏹️  Interrumpido")
        return EXIT_ERROR

if __name__ == "__main__":
    sys.exit(main())
