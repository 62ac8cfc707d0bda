"""Toolkit configuration settings."""
from pydantic_settings import BaseSettings, SettingsConfigDict
from typing import Optional


class Settings(BaseSettings):
    """Process-wide settings loaded from environment variables."""

    # Output Settings
    output_dir: str = "./runs"
    log_level: str = "INFO"
    csv_float_format: str = "%.17g"

    # Sampling Settings
    delta_lstar: float = 1e-4

    # Greedy Policy Solver (first-order condition of the one-step problem)
    greedy_damping: float = 0.5
    greedy_tolerance: float = 1e-10
    greedy_max_iterations: int = 200
    greedy_residual_tolerance: float = 1e-8
    greedy_fallback_grid: int = 11
    greedy_fallback_max_iterations: int = 5000

    # Finite-Horizon OCP Solver
    ocp_max_iterations: int = 2000
    ocp_tolerance: float = 1e-8
    ocp_armijo: float = 1e-4
    ocp_penalty_initial: float = 10.0
    ocp_penalty_factor: float = 10.0
    ocp_penalty_max: float = 1e6
    ocp_violation_tolerance: float = 1e-6
    ocp_soft_infeasibility: float = 1e-4

    # Riccati Iteration
    dare_tolerance: float = 1e-12
    dare_max_iterations: int = 100_000

    # Langfuse Settings (Optional - for tracing pipeline stages)
    langfuse_public_key: Optional[str] = None
    langfuse_secret_key: Optional[str] = None
    langfuse_host: str = "https://cloud.langfuse.com"

    model_config = SettingsConfigDict(
        env_file=".env",
        env_prefix="AVIMPC_",
        case_sensitive=False,
        extra="ignore",
    )


settings = Settings()
