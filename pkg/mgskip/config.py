import os
from dotenv import load_dotenv

load_dotenv()


class Settings:
    """Process-wide settings loaded from environment variables."""

    LOG_LEVEL: str = os.getenv("MGSKIP_LOG_LEVEL", "INFO")

    # Chebyshev weight: "standard" (1-√(1-ρ²))/(1+√(1-ρ²)) or "printed" (…)/(1+√(1+ρ²))
    ETA_FORM: str = os.getenv("MGSKIP_ETA_FORM", "standard")

    # Harness worker threads
    WORKERS: int = int(os.getenv("MGSKIP_WORKERS", "1"))

    # Centralized reference solver
    REFERENCE_TOL: float = float(os.getenv("MGSKIP_REFERENCE_TOL", "1e-12"))
    REFERENCE_MAX_ITER: int = int(os.getenv("MGSKIP_REFERENCE_MAX_ITER", "1000000"))

    OUTPUT_DIR: str = os.getenv("MGSKIP_OUTPUT_DIR", "results")


settings = Settings()
