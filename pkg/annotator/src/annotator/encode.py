"""Encode refined captions and export them as a BTXE file."""

from __future__ import annotations

import json

import numpy as np

from .btxe import write_btxe
from .refine import RefinedCaption
from .stub import MAX_TOKENS, STUB_DIM, stub_embed


class ClipTextEncoder:
    """Frozen pretrained text encoder; captions truncate at 77 tokens."""

    def __init__(self, model_id: str):
        try:
            import torch
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as e:
            raise RuntimeError(
                "real encoding needs the 'real' extra "
                "(pip install annotator[real])") from e
        self._torch = torch
        self.tokenizer = CLIPTokenizer.from_pretrained(model_id)
        self.model = CLIPTextModel.from_pretrained(model_id)
        self.model.eval()

    def encode(self, text: str) -> np.ndarray:
        with self._torch.no_grad():
            tokens = self.tokenizer(text, truncation=True,
                                    max_length=MAX_TOKENS,
                                    return_tensors="pt")
            out = self.model(**tokens).pooler_output[0].numpy()
        vec = out.astype(np.float64)
        vec /= np.linalg.norm(vec)
        return vec.astype(np.float32).astype(np.float64)


def encode_and_export(refined: list[RefinedCaption], out_path,
                      stub: bool = True, encoder_model: str | None = None,
                      provenance_path=None) -> dict[str, np.ndarray]:
    """L2-normalized embeddings written bit-exactly to the BTXE file."""
    encoder = None
    if not stub:
        encoder = ClipTextEncoder(encoder_model)
    table: dict[str, np.ndarray] = {}
    for rc in refined:
        if stub:
            table[rc.frame_id] = stub_embed(rc.refined, dim=STUB_DIM)
        else:
            table[rc.frame_id] = encoder.encode(rc.refined)
    write_btxe(out_path, table)
    if provenance_path:
        with open(provenance_path, "w") as f:
            for rc in refined:
                f.write(json.dumps(rc.to_dict(), sort_keys=True) + "\n")
    return table
