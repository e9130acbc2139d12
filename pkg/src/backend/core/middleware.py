"""
Middleware for the Variational Imaging Prior HTTP surface
"""

from fastapi import Request
import time
import structlog

logger = structlog.get_logger()


class LoggingMiddleware:
    """Request/response logging middleware"""

    def __init__(self, app):
        self.app = app

    async def __call__(self, scope, receive, send):
        if scope["type"] != "http":
            await self.app(scope, receive, send)
            return

        request = Request(scope, receive)
        start_time = time.perf_counter()
        logger.info("Request started", method=request.method, path=request.url.path)

        async def send_wrapper(message):
            if message["type"] == "http.response.start":
                logger.info(
                    "Request completed",
                    method=request.method,
                    path=request.url.path,
                    status_code=message["status"],
                    process_time=time.perf_counter() - start_time,
                )
            await send(message)

        await self.app(scope, receive, send_wrapper)
