#!/usr/bin/env python3
"""
Variational Imaging Prior - Server Startup Script
Run this script to start the FastAPI server.
"""

import uvicorn

from src.backend.core.config import settings
from src.backend.main import app

if __name__ == "__main__":
    print(f"Starting {settings.APP_NAME} server on http://localhost:{settings.BACKEND_PORT}")
    print(f"API documentation at http://localhost:{settings.BACKEND_PORT}/docs")
    uvicorn.run(app, host=settings.BACKEND_HOST, port=settings.BACKEND_PORT)
