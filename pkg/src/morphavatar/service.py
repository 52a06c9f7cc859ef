"""HTTP render service for a fitted avatar.

The service wraps an immutable AvatarRuntime: GET /meta reports the
expression dimensionality, orbit bounds and native resolution; POST /render
turns an expression vector plus orbit angles into a PNG frame; GET
/expressions returns the expression database. Requested angles outside the
generation-time ellipse are clamped to its boundary and the clamp is
reported in the X-Orbit-Clamped response header. A static viewer bundle, if
present, is served under /ui.
"""

from __future__ import annotations

import io
import threading
from contextlib import asynccontextmanager
from pathlib import Path

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from PIL import Image
from pydantic import BaseModel, Field

from .errors import ConfigError, MorphAvatarError
from .pipeline import AvatarRuntime


class RenderRequest(BaseModel):
    phi: list[float]
    azimuth: float = 0.0
    elevation: float = 0.0
    width: int = Field(default=0, ge=0, le=1024)
    height: int = Field(default=0, ge=0, le=1024)


class MetaResponse(BaseModel):
    k_expr: int
    psi_max: float
    theta_max: float
    resolution: int
    n_splats: int
    n_expressions: int


def find_ui_bundle() -> Path | None:
    here = Path(__file__).resolve()
    for root in (Path.cwd(), *here.parents):
        candidate = root / "frontend" / "dist"
        if (candidate / "index.html").exists():
            return candidate
    return None


def create_app(avatar_path, defer_load: bool = False, ui_dir=None) -> FastAPI:
    """Build the service; with ``defer_load`` the avatar loads on startup and
    requests arriving earlier get 503."""
    state: dict = {"runtime": None}
    lock = threading.Lock()

    def load_now():
        with lock:
            if state["runtime"] is None:
                state["runtime"] = AvatarRuntime(avatar_path)
        return state["runtime"]

    @asynccontextmanager
    async def lifespan(_app):
        load_now()
        yield

    app = FastAPI(title="morphavatar render service", lifespan=lifespan)
    if not defer_load:
        load_now()

    def need_runtime() -> AvatarRuntime:
        rt = state["runtime"]
        if rt is None:
            raise HTTPException(status_code=503, detail="avatar still loading")
        return rt

    @app.get("/meta", response_model=MetaResponse)
    def meta():
        rt = need_runtime()
        return MetaResponse(
            k_expr=rt.k_expr,
            psi_max=float(rt.bounds["psi_max"]),
            theta_max=float(rt.bounds["theta_max"]),
            resolution=rt.latent_res,
            n_splats=rt.splats.n_splats,
            n_expressions=int(rt.db_representatives.shape[0]),
        )

    @app.get("/expressions")
    def expressions():
        rt = need_runtime()
        return {"representatives": rt.db_representatives.tolist(),
                "weights": rt.db_weights.tolist()}

    @app.post("/render")
    def render(req: RenderRequest):
        rt = need_runtime()
        if len(req.phi) != rt.k_expr:
            return JSONResponse(status_code=400, content={
                "error": "phi has the wrong length",
                "expected_length": rt.k_expr,
                "got_length": len(req.phi),
            })
        width = req.width or rt.latent_res
        height = req.height or rt.latent_res
        _, _, clamped = rt.clamp_orbit(req.azimuth, req.elevation)
        try:
            img = rt.render(req.phi, req.azimuth, req.elevation, width, height)
        except ConfigError as e:
            return JSONResponse(status_code=400, content={"error": str(e),
                                                          "expected_length": rt.k_expr})
        except MorphAvatarError as e:
            return JSONResponse(status_code=500, content={"error": str(e)})
        buf = io.BytesIO()
        Image.fromarray((np.clip(img, 0, 1) * 255.0).round().astype(np.uint8)).save(
            buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png",
                        headers={"X-Orbit-Clamped": "true" if clamped else "false"})

    bundle = Path(ui_dir) if ui_dir else find_ui_bundle()
    if bundle is not None and bundle.exists():
        app.mount("/ui", StaticFiles(directory=str(bundle), html=True), name="ui")

    return app


def serve(avatar_path, host: str = "127.0.0.1", port: int = 8421, ui_dir=None) -> None:
    import uvicorn
    app = create_app(avatar_path, defer_load=True, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")
