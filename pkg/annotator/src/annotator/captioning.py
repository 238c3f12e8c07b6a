"""Caption sources: the deterministic stub and the pretrained-model path.

Stub mode emits the dataset's templated captions verbatim and never loads
a model, so the whole test suite is network-free.  The real path lazily
imports transformers; the identifiers below are documented defaults and
plain config values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DEFAULT_CAPTION_MODEL = "Salesforce/blip-image-captioning-base"
DEFAULT_ENCODER_MODEL = "openai/clip-vit-base-patch32"
DEFAULT_PROMPT = ("describe the driving scene, the vehicles, pedestrians "
                  "and traffic lights ahead")


@dataclass
class AnnotationJob:
    dataset: str
    prompt: str = DEFAULT_PROMPT
    view: str = "front"                       # front | all
    caption_model: str = DEFAULT_CAPTION_MODEL
    encoder_model: str = DEFAULT_ENCODER_MODEL
    stub: bool = True
    out: str = "embeddings.btxe"
    provenance: str | None = None

    def validate(self):
        if not self.prompt:
            raise ValueError("prompt must be non-empty")
        if self.view not in ("front", "all"):
            raise ValueError(f"view must be front|all, got {self.view!r}")
        return self


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path} is not a binary PPM")
    fields = []
    pos = 2
    while len(fields) < 3:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    pos += 1
    w, h = int(fields[0]), int(fields[1])
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3)


class ModelCaptioner:
    """Pretrained image-captioning model behind the stub's interface."""

    def __init__(self, model_id: str, prompt: str):
        try:
            from transformers import (AutoProcessor,
                                      BlipForConditionalGeneration)
        except ImportError as e:
            raise RuntimeError(
                "real captioning needs the 'real' extra "
                "(pip install annotator[real])") from e
        self.processor = AutoProcessor.from_pretrained(model_id)
        self.model = BlipForConditionalGeneration.from_pretrained(model_id)
        self.prompt = prompt

    def caption(self, image: np.ndarray) -> str:
        from PIL import Image
        pil = Image.fromarray(image)
        inputs = self.processor(pil, self.prompt, return_tensors="pt")
        out = self.model.generate(**inputs, max_new_tokens=40)
        return self.processor.decode(out[0], skip_special_tokens=True)


def caption_frames(job: AnnotationJob, frames) -> dict[str, str]:
    """One caption per frame; stub mode echoes the dataset templates."""
    job.validate()
    captioner = None
    if not job.stub:
        captioner = ModelCaptioner(job.caption_model, job.prompt)
    out = {}
    for frame in frames:
        if job.stub:
            caps = frame.captions
        else:
            fdir = (Path(job.dataset) / "scenes" / f"{frame.seed:05d}"
                    / "frames" / f"{frame.step:03d}")
            cams = range(6) if job.view == "all" else (0,)
            caps = [captioner.caption(_read_ppm(fdir / f"cam{k}.ppm"))
                    for k in cams]
            if job.view == "front":
                caps = [caps[0]] + frame.captions[1:]
        if job.view == "all":
            out[frame.frame_id] = "; ".join(caps)
        else:
            out[frame.frame_id] = caps[0]
    return out
