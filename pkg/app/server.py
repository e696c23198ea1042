import logging
from pathlib import Path
from typing import Optional

import uvicorn
from fastapi import FastAPI
from starlette.responses import RedirectResponse

from app.config import Config, ServerConfig
from app.routers.runs_router import runs_router

logger = logging.getLogger("server")


def create_app(runs_dir: Optional[Path] = None) -> FastAPI:
    """
    Read-only results API over a directory of runs (one sub-directory per train, sweep or
    export run). Nothing here trains; the CLI writes the artifacts this serves.
    """
    app = FastAPI(
        description="""
    Browse the artifacts of second-order semi-supervised training runs:

    - resolved run configurations
    - metrics series (iteration, L, H, validation and test accuracy)
    - sweep tables (lambda, label rate, batch composition, mode comparisons)
    - exported pooled feature vectors
    """,
        title="SOP-SSL Lab Results API",
    )
    app.state.runs_dir = Path(runs_dir) if runs_dir is not None else Config.RUNS_DIR

    @app.get("/", include_in_schema=False)
    def read_root():
        return RedirectResponse(url="/docs")

    app.include_router(runs_router)
    logger.info(f"Serving runs from {app.state.runs_dir}")
    return app


def serve(runs_dir: Optional[Path] = None, host: str = ServerConfig.HOST, port: int = ServerConfig.PORT) -> None:
    uvicorn.run(create_app(runs_dir), host=host, port=port)


if __name__ == "__main__":
    serve()
