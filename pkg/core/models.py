"""
Modelos de datos para CarpetLab
Parámetros derivados de kappa, configuración de corridas y manifiestos.
"""
from __future__ import annotations

from enum import Enum
from typing import Dict, List, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

from core.config import settings


class Subcommand(str, Enum):
    """Subcomandos expuestos por carpet_lab.py"""
    PARAMS = "params"
    SLE_TRACE = "sle-trace"
    DIM_EST = "dim-est"
    LOOP_SOUP = "loop-soup"
    CARPET = "carpet"
    XI_ESTIMATE = "xi-estimate"
    MU0_ESTIMATE = "mu0-estimate"
    COVARIANCE_CHECK = "covariance-check"
    MARKOV_TEST = "markov-test"
    CLE4_COUPLING = "cle4-coupling"
    ODE_CHECK = "ode-check"
    BESSEL_CHECK = "bessel-check"
    STABLE_SCALING = "stable-scaling"
    UNIQUENESS_CHECK = "uniqueness-check"


class NormalizationMode(str, Enum):
    """Escala de las masas de una medida sobre la alfombra"""
    RAW = "raw"
    UNIT = "unit-expected-total"


class MarkedPointRule(str, Enum):
    """Cómo se sortea el punto marcado de un lazo"""
    QUANTUM = "quantum"
    EUCLIDEAN = "euclidean"


class SleParams(BaseModel):
    """Todos los parámetros escalares asociados a un valor de kappa"""
    model_config = ConfigDict(frozen=True)

    kappa: float = Field(..., description="Parámetro SLE")
    gamma: float = Field(..., gt=0, le=2, description="Parámetro LQG asociado a kappa")
    alpha: float = Field(..., description="4/kappa")
    alpha_hat: float = Field(..., description="kappa/4, índice estable para kappa > 4")
    Q: float = Field(..., description="2/gamma + gamma/2")
    d_carpet: float = Field(..., description="Dimensión de la alfombra 1 + 2/kappa + 3*kappa/32")
    d_curve: float = Field(..., description="Dimensión de la curva min(2, 1 + kappa/8)")
    soup_intensity: Optional[float] = Field(None, description="Intensidad c de la sopa de lazos (solo kappa <= 4)")
    f_exponent: float = Field(..., description="Exponente del peso de radio conforme F_D")
    length_shift_rate: float = Field(..., description="sqrt(kappa)/2: tasa con que un corrimiento del campo reescala las longitudes")
    mu0_radius_exponent: float = Field(..., description="2/gamma**2, exponente del radio conforme en el semiplano")


class RunConfig(BaseModel):
    """Una corrida: se lee del JSON y los flags de la CLI la sobrescriben"""
    model_config = ConfigDict(extra="forbid")

    subcommand: Subcommand
    kappa: float = Field(4.0, gt=0, lt=8, description="Parámetro SLE")
    kappas: List[float] = Field(default_factory=lambda: [2.0, 8 / 3, 4.0, 6.0])
    grid_size: int = Field(256, ge=16, le=4096)
    field_resolution: Optional[int] = Field(None, ge=16)
    eps: Optional[float] = Field(None, gt=0)
    dt: float = Field(1e-4, gt=0)
    n_steps: int = Field(10_000, ge=1)
    n_traces: int = Field(8, ge=1)
    n_fields: int = Field(4, ge=1)
    n_replicas: int = Field(16, ge=1)
    t_min: Optional[float] = Field(None, gt=0)
    t_cap: float = Field(2.0, gt=0)
    c_sequence: List[float] = Field(default_factory=lambda: [0.5, 0.8, 0.95, 1.0])
    scale: float = Field(2.0, ge=0.5, le=2.0, description="Factor de dilatación b para las pruebas de covarianza")
    seeds: List[int] = Field(default_factory=lambda: [0])
    workers: int = Field(default_factory=lambda: settings.default_workers, ge=1)
    output_dir: str = "runs/latest"
    export_csv: bool = True
    export_json: bool = True
    export_svg: bool = False

    @field_validator("seeds")
    @classmethod
    def validate_seeds(cls, v: List[int]) -> List[int]:
        """La lista de semillas no puede estar vacía ni tener negativos"""
        if not v:
            raise ValueError("seed list must be nonempty")
        if any(s < 0 for s in v):
            raise ValueError("seeds must be non-negative integers")
        return v

    @field_validator("c_sequence")
    @classmethod
    def validate_c_sequence(cls, v: List[float]) -> List[float]:
        if not v or any(c <= 0 or c > 1 for c in v):
            raise ValueError("c_sequence entries must lie in (0, 1]")
        return v

    @property
    def seed(self) -> int:
        return self.seeds[0]


class StageTiming(BaseModel):
    stage: str
    seconds: float = Field(..., ge=0)


class RunManifest(BaseModel):
    """Se escribe una vez por directorio de artefactos al terminar la corrida"""
    config: Dict = Field(..., description="Copia del RunConfig validado")
    params: Optional[SleParams] = Field(None, description="Parámetros del kappa de la corrida")
    started_at: str
    wall_clock_seconds: float = Field(..., ge=0)
    stage_timings: List[StageTiming] = Field(default_factory=list)
    assertions: Dict[str, bool] = Field(default_factory=dict)
    passed: bool
    checksums: Dict[str, str] = Field(default_factory=dict, description="sha256 por nombre de artefacto")
    warnings: List[str] = Field(default_factory=list)
