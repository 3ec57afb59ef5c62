"""HTTP service layer: pydantic schemas and the FastAPI application."""

from .app import app, create_app
from .schemas import SCHEMA_VERSION

__all__ = ["app", "create_app", "SCHEMA_VERSION"]
