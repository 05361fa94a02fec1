"""
Configuración centralizada de CarpetLab
"""
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """Configuración global del laboratorio (variables de entorno CARPETLAB_*)"""
    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="CARPETLAB_",
        case_sensitive=False,
        extra="ignore"
    )

    # Retículas
    max_gff_size: int = 513          # límite de memoria para factorizar el Laplaciano
    default_grid_resolution: int = 256
    default_eps_cells: float = 4.0   # radio del promedio circular, en celdas

    # Flujo de Loewner
    swallow_tolerance: float = 1e-6

    # Sopas de lazos
    max_bridge_steps: int = 4096
    default_bridge_steps: int = 16

    # Muestreadores por rechazo
    rejection_budget: int = 200

    # Orquestación
    default_workers: int = 1
    output_root: str = "runs"

    # Logging
    log_level: str = "INFO"


# Instancia global de configuración
settings = Settings()
