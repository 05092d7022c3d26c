"""Annotation task store: pair assignments, an append-only judgment log, and
aggregation over it.

Tasks are served in stable image-id order. Each image pair collects exactly
five judgments from distinct annotators; submissions are append-only and a
second judgment by the same annotator for the same image is rejected. All
progress and aggregate views are recomputed from the log, never cached.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass

from advkit.scoring import AnnotationRecord, SubjectiveReport, aggregate_records

REQUIRED_VOTES = 5
LOG_NAME = "annotations.jsonl"
TASKS_NAME = "tasks.json"


class UnknownImageError(KeyError):
    pass


class DuplicateSubmissionError(ValueError):
    pass


class TaskCompleteError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotationTask:
    """One pair still needing judgments."""

    image_id: str
    clean_path: str
    adv_path: str
    remaining_slots: int


def write_task_store(store_dir, image_ids, clean_dir, adv_dir,
                     success_by_id: dict, asr: float, run_hash: str) -> str:
    """Materialize tasks.json next to the attack artifacts."""
    os.makedirs(str(store_dir), exist_ok=True)
    tasks = [
        {
            "image_id": image_id,
            "clean": os.path.join(str(clean_dir), f"{image_id}.png"),
            "adv": os.path.join(str(adv_dir), f"{image_id}.png"),
            "attacked_successfully": bool(success_by_id[image_id]),
        }
        for image_id in image_ids
    ]
    payload = {
        "run_hash": run_hash,
        "asr": asr,
        "required_votes": REQUIRED_VOTES,
        "tasks": tasks,
    }
    path = os.path.join(str(store_dir), TASKS_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)
    return path


def read_annotation_log(path) -> list[AnnotationRecord]:
    records = []
    if not os.path.exists(str(path)):
        return records
    with open(str(path), encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(AnnotationRecord.from_line(line))
    return records


class AnnotationStore:
    """Disk-backed store; submissions serialize through one lock and append
    a single line each, so a crash never corrupts earlier records."""

    def __init__(self, store_dir):
        self.root = str(store_dir)
        with open(os.path.join(self.root, TASKS_NAME), encoding="utf-8") as fh:
            meta = json.load(fh)
        self.asr = float(meta["asr"])
        self.run_hash = meta.get("run_hash", "")
        self.required_votes = int(meta.get("required_votes", REQUIRED_VOTES))
        self.tasks = {t["image_id"]: t for t in meta["tasks"]}
        self.order = [t["image_id"] for t in meta["tasks"]]
        self.log_path = os.path.join(self.root, LOG_NAME)
        self._lock = threading.Lock()
        self._seen: set[tuple[str, str]] = set()
        self._counts: dict[str, int] = {i: 0 for i in self.order}
        for rec in read_annotation_log(self.log_path):
            self._seen.add((rec.annotator_id, rec.image_id))
            self._counts[rec.image_id] = self._counts.get(rec.image_id, 0) + 1

    def records(self) -> list[AnnotationRecord]:
        return read_annotation_log(self.log_path)

    def image_path(self, image_id: str, kind: str) -> str:
        if image_id not in self.tasks:
            raise UnknownImageError(image_id)
        if kind not in ("clean", "adv"):
            raise UnknownImageError(kind)
        return self.tasks[image_id][kind]

    def next_task(self, annotator_id: str) -> AnnotationTask | None:
        """First image in stable order the annotator can still judge."""
        with self._lock:
            for image_id in self.order:
                count = self._counts[image_id]
                if count >= self.required_votes:
                    continue
                if (annotator_id, image_id) in self._seen:
                    continue
                task = self.tasks[image_id]
                return AnnotationTask(
                    image_id=image_id,
                    clean_path=task["clean"],
                    adv_path=task["adv"],
                    remaining_slots=self.required_votes - count,
                )
        return None

    def submit(self, record: AnnotationRecord) -> None:
        with self._lock:
            if record.image_id not in self.tasks:
                raise UnknownImageError(record.image_id)
            key = (record.annotator_id, record.image_id)
            if key in self._seen:
                raise DuplicateSubmissionError(f"{record.annotator_id} already judged {record.image_id}")
            if self._counts[record.image_id] >= self.required_votes:
                raise TaskCompleteError(f"{record.image_id} already has {self.required_votes} judgments")
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(record.to_line() + "\n")
            self._seen.add(key)
            self._counts[record.image_id] += 1

    def progress(self) -> dict:
        with self._lock:
            complete = sum(1 for c in self._counts.values() if c >= self.required_votes)
            return {
                "total_images": len(self.order),
                "completed_images": complete,
                "total_records": sum(self._counts.values()),
                "required_votes": self.required_votes,
                "per_image": {i: self._counts[i] for i in self.order},
            }

    def aggregate(self) -> SubjectiveReport:
        success = {i: self.tasks[i]["attacked_successfully"] for i in self.order}
        return aggregate_records(self.records(), success, asr=self.asr)
