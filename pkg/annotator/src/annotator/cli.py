"""Command line: annotate --dataset DIR --view front --stub --out FILE.

Writes the BTXE embedding file plus an optional JSON-lines provenance
sidecar describing every refinement edit.
"""

from __future__ import annotations

import argparse
import json
import sys

from .captioning import (DEFAULT_CAPTION_MODEL, DEFAULT_ENCODER_MODEL,
                         DEFAULT_PROMPT, AnnotationJob, caption_frames)
from .dataset import load_frames
from .encode import encode_and_export
from .refine import refine_caption


def annotate(job: AnnotationJob) -> dict:
    frames = load_frames(job.dataset)
    captions = caption_frames(job, frames)
    refined = [refine_caption(f, captions[f.frame_id]) for f in frames]
    table = encode_and_export(refined, job.out, stub=job.stub,
                              encoder_model=job.encoder_model,
                              provenance_path=job.provenance)
    return {"frames": len(frames), "out": job.out,
            "removed_mentions": sum(len(r.removed) for r in refined),
            "appended": sum(len(r.appended) for r in refined)}


def build_parser():
    p = argparse.ArgumentParser(prog="annotate")
    p.add_argument("--dataset", required=True)
    p.add_argument("--view", choices=("front", "all"), default="front")
    p.add_argument("--stub", action="store_true",
                   help="use the deterministic stub, never load a model")
    p.add_argument("--out", default="embeddings.btxe")
    p.add_argument("--prompt", default=DEFAULT_PROMPT)
    p.add_argument("--caption-model", default=DEFAULT_CAPTION_MODEL)
    p.add_argument("--encoder-model", default=DEFAULT_ENCODER_MODEL)
    p.add_argument("--provenance")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    job = AnnotationJob(dataset=args.dataset, prompt=args.prompt,
                        view=args.view, caption_model=args.caption_model,
                        encoder_model=args.encoder_model, stub=args.stub,
                        out=args.out, provenance=args.provenance)
    try:
        result = annotate(job)
    except (FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
