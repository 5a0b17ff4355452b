"""Modality importance, attention traces and ensembling."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from tdlab.distillation import CorpusStats, select_for_text
from tdlab.errors import ValidationError
from tdlab.student import StudentModel, instance_batch, predict
from tdlab.synth_world import Instance, Vocab
from tdlab.teacher import TeacherModel, encode_image, encode_text, qa_text


@dataclass
class MITable:
    mi_vision: np.ndarray  # [layers, heads]
    mi_text: np.ndarray

    @property
    def per_layer_mean_vision(self) -> np.ndarray:
        return self.mi_vision.mean(axis=1)

    @property
    def per_layer_mean_text(self) -> np.ndarray:
        return self.mi_text.mean(axis=1)

    def gap(self) -> float:
        """Mean over layers of |MI_vision - MI_text| (per-layer head means)."""
        return float(np.abs(self.per_layer_mean_vision - self.per_layer_mean_text).mean())

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "head", "mi_vision", "mi_text"])
            L, H = self.mi_vision.shape
            for l in range(L):
                for h in range(H):
                    w.writerow([l, h, repr(float(self.mi_vision[l, h])), repr(float(self.mi_text[l, h]))])

    @classmethod
    def from_csv(cls, path: Path) -> "MITable":
        rows = list(csv.DictReader(Path(path).open()))
        L = max(int(r["layer"]) for r in rows) + 1
        H = max(int(r["head"]) for r in rows) + 1
        v, t = np.zeros((L, H)), np.zeros((L, H))
        for r in rows:
            v[int(r["layer"]), int(r["head"])] = float(r["mi_vision"])
            t[int(r["layer"]), int(r["head"])] = float(r["mi_text"])
        return cls(v, t)

    def render(self, out_dir: Path, stem: str = "mi") -> tuple[Path, Path]:
        """Write the per-layer line chart and the layer x head heat maps."""
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        layers = np.arange(self.mi_vision.shape[0])
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(layers, self.per_layer_mean_vision, marker="o", label="vision")
        ax.plot(layers, self.per_layer_mean_text, marker="s", label="text")
        ax.set_xlabel("layer")
        ax.set_ylabel("modality importance")
        ax.set_ylim(0, 1)
        ax.legend()
        fig.tight_layout()
        line = out_dir / f"{stem}_line.png"
        fig.savefig(line)
        plt.close(fig)

        fig, axes = plt.subplots(1, 2, figsize=(6, 3))
        for ax, mat, title in zip(axes, (self.mi_vision, self.mi_text), ("vision", "text")):
            im = ax.imshow(mat, vmin=0, vmax=1, cmap="viridis", aspect="auto")
            ax.set_title(title)
            ax.set_xlabel("head")
            ax.set_ylabel("layer")
        fig.colorbar(im, ax=axes.tolist())
        heat = out_dir / f"{stem}_heat.png"
        fig.savefig(heat)
        plt.close(fig)
        return line, heat


def mi_from_attention(attn: torch.Tensor, vision: torch.Tensor, text: torch.Tensor, query: int = 0) -> MITable:
    """MI from attentions [N, L, H, S, S] and bool position masks [N, S].

    Per sequence, the query row's mass on each modality set is renormalised to
    sum to one; the table holds the mean over sequences.
    """
    if attn.dim() != 5:
        raise ValidationError("attention tensor must be [N, layers, heads, S, S]")
    a = attn[:, :, :, query, :].double()  # [N, L, H, S]
    v = (a * vision[:, None, None, :].double()).sum(-1)
    t = (a * text[:, None, None, :].double()).sum(-1)
    tot = v + t
    if bool((tot <= 0).any()):
        raise ValidationError("query row puts no mass on either modality")
    return MITable((v / tot).mean(0).numpy(), (t / tot).mean(0).numpy())


def modality_importance(model: StudentModel, probe: Sequence[Instance], n_shapes: int, n_colors: int,
                        chunk: int = 128) -> MITable:
    """[CLS]-row MI over every (question, answer_k) sequence of the probe split."""
    if not probe:
        raise ValidationError("empty probe split")
    vs, ts, ws = [], [], []
    with torch.no_grad():
        for i in range(0, len(probe), chunk):
            b = instance_batch(probe[i:i + chunk], n_shapes, n_colors, dtype=next(model.parameters()).dtype)
            out = model(b, keep_attentions=True)
            vis = out.vision_positions()
            txt = out.valid & ~vis
            txt[:, 0] = False  # [CLS] belongs to neither set
            tab = mi_from_attention(out.attentions, vis, txt)
            vs.append(tab.mi_vision)
            ts.append(tab.mi_text)
            ws.append(len(b))
    w = np.asarray(ws, dtype=float) / sum(ws)
    return MITable(np.tensordot(w, np.stack(vs), 1), np.tensordot(w, np.stack(ts), 1))


# ---------------------------------------------------------------------- traces


def cls_text_attention(model: StudentModel, instance: Instance, k: int, n_shapes: int, n_colors: int) -> np.ndarray:
    """[CLS] attention to each text token of pair k, averaged over layers and heads."""
    b = instance_batch([instance], n_shapes, n_colors, dtype=next(model.parameters()).dtype)
    with torch.no_grad():
        out = model(b, keep_attentions=True)
    n = len(qa_text(instance, k))
    return out.attentions[k, :, :, 0, 1:1 + n].double().mean(dim=(0, 1)).numpy()


def attention_trace(
    after: StudentModel,
    instance: Instance,
    teacher: TeacherModel,
    corpus: CorpusStats,
    vocab: Vocab,
    *,
    m: int = 2,
    k: int | None = None,
    before: StudentModel | None = None,
    n_shapes: int,
    n_colors: int,
) -> dict:
    """Per-token record for one question+answer pair: student [CLS] attention
    before/after distillation and the token-selection scores."""
    k = instance.gold_index if k is None else k
    text = qa_text(instance, k)
    with torch.no_grad():
        img = encode_image(teacher, instance.scene)
        toks, _ = encode_text(teacher, text)
    sel = select_for_text(img, toks, text, corpus, m)
    post = cls_text_attention(after, instance, k, n_shapes, n_colors)
    pre = cls_text_attention(before, instance, k, n_shapes, n_colors) if before is not None else None
    chosen = set(sel.indices)
    rows = []
    for l, tok in enumerate(text):
        rows.append({
            "position": l,
            "token": int(tok),
            "word": vocab.tokens[tok],
            "attn_pre": None if pre is None else float(pre[l]),
            "attn_post": float(post[l]),
            "s_vr": float(sel.s_vr[l]),
            "s_si": float(sel.s_si[l]),
            "combined": float(sel.combined[l]),
            "selected": l in chosen,
        })
    return {"instance_id": instance.instance_id, "answer": k, "no_signal": sel.no_signal, "tokens": rows}


def write_traces(path: Path, records: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")


# ---------------------------------------------------------------------- ensembling


def ensemble_from_logits(logits: Sequence[torch.Tensor]) -> tuple[torch.Tensor, torch.Tensor]:
    """Average softmax probabilities; argmax with ties to the lowest index."""
    if not logits:
        raise ValidationError("ensemble needs at least one model")
    stacked = torch.stack([l.double().softmax(-1) for l in logits])
    # sort before summing so the result does not depend on model order
    probs = stacked.sort(0).values.sum(0) / len(logits)
    best = probs.max(-1, keepdim=True).values
    # first index attaining the max
    pred = (probs == best).double().argmax(-1)
    return pred, probs


def ensemble_predict(models: Sequence[StudentModel], instances: Instance | Sequence[Instance], n_shapes: int,
                     n_colors: int) -> tuple[torch.Tensor, torch.Tensor]:
    single = isinstance(instances, Instance)
    items = [instances] if single else list(instances)
    pred, probs = ensemble_from_logits([predict(m, items, n_shapes, n_colors) for m in models])
    return (pred[0], probs[0]) if single else (pred, probs)
