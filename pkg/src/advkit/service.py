"""HTTP annotation service.

Wraps an AnnotationStore with the endpoints the browser tool consumes:
fetch the next unjudged pair, stream image bytes, submit judgments
(append-only, duplicates rejected with 409), and read progress/aggregate
views recomputed from the log.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import FileResponse
from pydantic import BaseModel, Field

from advkit.annotations import (
    AnnotationStore,
    DuplicateSubmissionError,
    TaskCompleteError,
    UnknownImageError,
)
from advkit.scoring import AnnotationRecord


class TaskView(BaseModel):
    image_id: str
    clean_url: str
    adv_url: str
    remaining_slots: int


class ProgressView(BaseModel):
    total_images: int
    completed_images: int
    total_records: int
    required_votes: int
    per_image: dict[str, int]


class NextTaskResponse(BaseModel):
    done: bool
    task: TaskView | None = None
    progress: ProgressView


class AnnotationIn(BaseModel):
    image_id: str
    annotator_id: str
    semantic_preserved: bool
    quality_level: int = Field(ge=1, le=5)


class SubmitResponse(BaseModel):
    accepted: bool
    image_id: str
    annotator_id: str


class PerImageAggregate(BaseModel):
    id: str
    s_s: int
    s_q_mean: float
    counted: bool


class AggregateResponse(BaseModel):
    s_obj: float
    s_quality: float | None
    incomplete_ids: list[str]
    per_image: list[PerImageAggregate]


def create_app(store: AnnotationStore) -> FastAPI:
    app = FastAPI(title="annotation service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.get("/tasks/next", response_model=NextTaskResponse)
    def next_task(annotator: str):
        if not annotator:
            raise HTTPException(status_code=422, detail="annotator id required")
        task = store.next_task(annotator)
        progress = ProgressView(**store.progress())
        if task is None:
            return NextTaskResponse(done=True, task=None, progress=progress)
        return NextTaskResponse(
            done=False,
            task=TaskView(
                image_id=task.image_id,
                clean_url=f"/images/{task.image_id}/clean",
                adv_url=f"/images/{task.image_id}/adv",
                remaining_slots=task.remaining_slots,
            ),
            progress=progress,
        )

    @app.get("/images/{image_id}/{kind}")
    def image_bytes(image_id: str, kind: str):
        try:
            path = store.image_path(image_id, kind)
        except UnknownImageError:
            raise HTTPException(status_code=404, detail="unknown image or kind")
        return FileResponse(path, media_type="image/png")

    @app.post("/annotations", response_model=SubmitResponse, status_code=201)
    def submit(body: AnnotationIn):
        record = AnnotationRecord(
            image_id=body.image_id,
            annotator_id=body.annotator_id,
            semantic_preserved=body.semantic_preserved,
            quality_level=body.quality_level,
        )
        try:
            store.submit(record)
        except UnknownImageError:
            raise HTTPException(status_code=404, detail="unknown image")
        except DuplicateSubmissionError:
            raise HTTPException(status_code=409, detail="already judged by this annotator")
        except TaskCompleteError:
            raise HTTPException(status_code=409, detail="image already fully judged")
        return SubmitResponse(accepted=True, image_id=body.image_id,
                              annotator_id=body.annotator_id)

    @app.get("/progress", response_model=ProgressView)
    def progress():
        return ProgressView(**store.progress())

    @app.get("/aggregate", response_model=AggregateResponse)
    def aggregate():
        report = store.aggregate()
        return AggregateResponse(**report.to_dict())

    return app


def serve_annotations(store_dir, host: str = "127.0.0.1", port: int = 8750):
    """Run the annotation service until interrupted."""
    import uvicorn

    app = create_app(AnnotationStore(store_dir))
    uvicorn.run(app, host=host, port=port)
