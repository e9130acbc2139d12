"""
Configuration management for the Variational Imaging Prior toolkit
"""

from pydantic_settings import BaseSettings, SettingsConfigDict
from pydantic import Field


class Settings(BaseSettings):
    """Application settings"""

    model_config = SettingsConfigDict(env_file=".env", case_sensitive=True, extra="ignore")

    # Application
    APP_NAME: str = "Variational Imaging Prior"
    VERSION: str = "1.0.0"
    ENVIRONMENT: str = Field(default="development", validation_alias="ENVIRONMENT")
    DEBUG: bool = Field(default=True, validation_alias="DEBUG")

    # Server
    BACKEND_HOST: str = Field(default="0.0.0.0", validation_alias="BACKEND_HOST")
    BACKEND_PORT: int = Field(default=8005, validation_alias="BACKEND_PORT")

    # Logging
    LOG_LEVEL: str = Field(default="INFO", validation_alias="VIP_LOG")
    LOG_FORMAT: str = Field(default="json", validation_alias="VIP_LOG_FORMAT")

    # Runs
    RESULTS_ROOT: str = Field(default="./results", validation_alias="VIP_RESULTS_ROOT")
    DEFAULT_THREADS: int = Field(default=1, ge=1, validation_alias="VIP_THREADS")


# Global settings instance
settings = Settings()


def get_settings() -> Settings:
    """Get application settings"""
    return settings
