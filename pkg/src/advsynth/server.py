"""HTTP JSON API over the annotation service, plus image and UI hosting."""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI, HTTPException
from fastapi.responses import FileResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .annotation import (
    AnnotationService,
    DuplicateImageError,
    PartialSubmissionError,
    QuorumConflictError,
    StalePageError,
)


class SubmitBody(BaseModel):
    worker: str
    labels: list[int | str]


class BatchItem(BaseModel):
    id: str
    hash: str
    k: int
    meta: dict = {}


class BatchBody(BaseModel):
    mode: str = "label"
    items: list[BatchItem]


def create_app(
    service: AnnotationService,
    image_dir: Path | None = None,
    ui_dir: Path | None = None,
) -> FastAPI:
    app = FastAPI(title="annotation service")

    @app.get("/api/page")
    def get_page(worker: str, mode: str | None = None):
        page = service.next_page(worker, mode)
        if page is None:
            return {"page_id": None, "worker_id": worker, "mode": mode, "items": [], "empty": True}
        return {
            "page_id": page.page_id,
            "worker_id": page.worker_id,
            "mode": page.mode,
            "items": page.items,
            "empty": False,
        }

    @app.post("/api/page/{page_id}")
    def submit(page_id: str, body: SubmitBody):
        try:
            return service.submit_page(body.worker, page_id, list(body.labels))
        except (StalePageError, QuorumConflictError) as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except (PartialSubmissionError, ValueError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/api/batches")
    def enqueue(body: BatchBody):
        try:
            batch_id = service.enqueue_batch([item.model_dump() for item in body.items], body.mode)
        except DuplicateImageError as exc:
            raise HTTPException(status_code=409, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"batch_id": batch_id}

    @app.get("/api/stats")
    def stats():
        return service.stats()

    if image_dir is not None:
        image_dir = Path(image_dir)

        @app.get("/images/{image_id}.png")
        def image(image_id: str):
            path = image_dir / f"{image_id}.png"
            if not path.exists() or not path.resolve().is_relative_to(image_dir.resolve()):
                raise HTTPException(status_code=404, detail=f"no image {image_id}")
            return FileResponse(path, media_type="image/png")

    if ui_dir is not None and Path(ui_dir).exists():
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")

    return app


def serve(service: AnnotationService, image_dir, ui_dir, host: str, port: int) -> None:
    import uvicorn

    uvicorn.run(create_app(service, image_dir, ui_dir), host=host, port=port, log_level="info")
