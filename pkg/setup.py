#!/usr/bin/env python3
"""
otlab - Setup & Installation Script
Script de instalación: entorno virtual, dependencias, directorios y configuraciones de ejemplo
"""

import os
import sys
import subprocess
from pathlib import Path
import argparse

# Configuraciones TOML de ejemplo (escala de escritorio)
EXPERIMENT_TEMPLATES = {
    'matching_scaling.toml': '''schema_version = 1
kind = "matching-scaling"
name = "matching-scaling"
output_dir = "runs"

[domain]
side_lengths = [8, 16, 32, 64]
dimension = 2

[seeds]
count = 64
base = 0

[solver]
method = "exact"

[resolution]
grid_factor = 2

[parameters]
save_artifacts = true
''',
    'harmonic_approx.toml': '''schema_version = 1
kind = "harmonic-approx"
name = "harmonic-density-family"
output_dir = "runs"

[domain]
side_lengths = [16]

[seeds]
count = 1
base = 0

[resolution]
grid_factor = 2
m_local = 32

[parameters]
source = "density-family"
deltas = [0.05, 0.025]
scale_fraction = 0.0625
''',
    'epsreg_decay.toml': '''schema_version = 1
kind = "epsreg-decay"
name = "epsreg-decay"
output_dir = "runs"

[seeds]
count = 4
base = 0

[parameters]
deltas = [0.001, 0.0005]
steps = 2
n_samples = 40000
''',
    'cascade.toml': '''schema_version = 1
kind = "cascade"
name = "cascade"
output_dir = "runs"

[domain]
side_lengths = [32, 64]

[seeds]
count = 64
base = 0

[parameters]
r_target = 4.0
c_data = 0.5
averaged_radii = [4.0, 8.0, 16.0]
''',
    'rstar_tail.toml': '''schema_version = 1
kind = "rstar-tail"
name = "rstar-tail"
output_dir = "runs"

[domain]
side_lengths = [16, 32, 64]

[seeds]
count = 64
base = 0

[parameters]
c_data = 0.5
'''
}

REQUIRED_MODULES = ['numpy', 'scipy', 'pandas', 'sklearn', 'statsmodels', 'psutil', 'ot']

class SystemSetup:
    """Configurador de otlab"""

    def __init__(self):
        self.project_root = Path(__file__).parent
        self.venv_path = self.project_root / "venv"
        self.logs_path = self.project_root / "logs"
        self.runs_path = self.project_root / "runs"
        self.experiments_path = self.project_root / "config" / "experiments"

    def _python_path(self) -> Path:
        if os.name == 'nt':  # Windows
            return self.venv_path / "Scripts" / "python.exe"
        return self.venv_path / "bin" / "python"

    def create_virtual_environment(self):
        """Crea entorno virtual"""
        print("🔧 Creando entorno virtual...")
        try:
            subprocess.run([sys.executable, "-m", "venv", str(self.venv_path)],
                           check=True, capture_output=True)
            print("✅ Entorno virtual creado correctamente")
            return True
        except subprocess.CalledProcessError as e:
            print(f"❌ Error creando entorno virtual: {e}")
            return False

    def install_dependencies(self):
        """Instala dependencias del proyecto (con respaldo a requirements-minimal.txt)"""
        print("📦 Instalando dependencias...")
        python_path = self._python_path()
        requirements_file = self.project_root / "requirements.txt"
        requirements_minimal = self.project_root / "requirements-minimal.txt"

        try:
            subprocess.run([str(python_path), "-m", "pip", "install", "--upgrade", "pip"],
                           check=True, capture_output=True)
            try:
                subprocess.run([str(python_path), "-m", "pip", "install", "-r", str(requirements_file)],
                               check=True, capture_output=True, timeout=600)
                print("✅ Dependencias completas instaladas")
                return True
            except (subprocess.CalledProcessError, subprocess.TimeoutExpired):
                print("⚠️ Fallo instalación completa, intentando dependencias mínimas...")
                subprocess.run([str(python_path), "-m", "pip", "install", "-r", str(requirements_minimal)],
                               check=True, capture_output=True, timeout=600)
                print("✅ Dependencias mínimas instaladas")
                return True
        except (subprocess.CalledProcessError, subprocess.TimeoutExpired) as e:
            print(f"❌ Error instalando dependencias: {e}")
            print("💡 Intentar instalación manual: pip install -r requirements-minimal.txt")
            return False

    def create_directory_structure(self):
        """Crea logs/, runs/ y config/experiments/"""
        print("📁 Creando estructura de directorios...")
        for path in (self.logs_path, self.runs_path, self.experiments_path):
            path.mkdir(parents=True, exist_ok=True)
            print(f"  📂 {path.relative_to(self.project_root)}")
        print("✅ Estructura de directorios creada")
        return True

    def create_config_files(self):
        """Escribe las configuraciones TOML de ejemplo que falten"""
        print("⚙️  Creando configuraciones de experimentos...")
        self.experiments_path.mkdir(parents=True, exist_ok=True)
        for name, content in EXPERIMENT_TEMPLATES.items():
            target = self.experiments_path / name
            if target.exists():
                print(f"  ⏭️  {name} ya existe")
                continue
            target.write_text(content, encoding='utf-8')
            print(f"  ✅ {name}")
        print("✅ Archivos de configuración creados")
        return True

    def run_tests(self):
        """Comprueba que las dependencias y los módulos del proyecto importan"""
        print("🧪 Comprobando importaciones...")
        sys.path.insert(0, str(self.project_root))
        ok = True
        for module in REQUIRED_MODULES:
            try:
                __import__(module)
                print(f"  ✅ {module}")
            except ImportError as e:
                print(f"  ❌ {module}: {e}")
                ok = False
        try:
            from experiments.experiment_runner import load_config
            for name in EXPERIMENT_TEMPLATES:
                load_config(str(self.experiments_path / name))
            print("  ✅ Configuraciones de ejemplo válidas")
        except Exception as e:
            print(f"  ❌ Error validando configuraciones: {e}")
            ok = False
        print("✅ Comprobaciones completadas" if ok else "⚠️ Hay comprobaciones fallidas")
        return ok

    def setup_complete(self):
        """Ejecuta todos los pasos"""
        print("\n🎯 CONFIGURACIÓN COMPLETA DE OTLAB")
        print("=" * 60)

        steps = [
            ("Crear entorno virtual", self.create_virtual_environment),
            ("Instalar dependencias", self.install_dependencies),
            ("Crear estructura de directorios", self.create_directory_structure),
            ("Crear archivos de configuración", self.create_config_files),
            ("Comprobar importaciones", self.run_tests)
        ]

        success_count = 0
        for step_name, step_function in steps:
            print(f"\n📋 {step_name}...")
            if step_function():
                success_count += 1
            else:
                print(f"⚠️  {step_name} falló, pero continuando...")

        print(f"\n🎉 CONFIGURACIÓN COMPLETADA: {success_count}/{len(steps)} pasos exitosos")
        if success_count == len(steps):
            print("\n🚀 PRÓXIMOS PASOS:")
            print("1. ./otlab run config/experiments/matching_scaling.toml")
            print("2. ./otlab fit runs/<experimento>/summary.csv --model log")
            print("3. python tests.py")
        else:
            print("\n❌ Configuración incompleta. Revisar errores anteriores.")

def main():
    """Función principal del script de configuración"""
    parser = argparse.ArgumentParser(description='otlab Setup')
    parser.add_argument('--step', choices=['venv', 'deps', 'dirs', 'config', 'test', 'all'],
                        default='all', help='Paso específico a ejecutar')
    args = parser.parse_args()

    setup = SystemSetup()
    if args.step == 'all':
        setup.setup_complete()
    elif args.step == 'venv':
        setup.create_virtual_environment()
    elif args.step == 'deps':
        setup.install_dependencies()
    elif args.step == 'dirs':
        setup.create_directory_structure()
    elif args.step == 'config':
        setup.create_config_files()
    elif args.step == 'test':
        setup.run_tests()

if __name__ == "__main__":
    main()
