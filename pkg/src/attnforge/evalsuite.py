"""Evaluation protocol: sensitivity vs. self-attending and control
captions (with WER on the differing subsets), controllability k@1/k@5
over all boxes and over the distinct subset, median box filtering, and
corpus BLEU for base-model quality.
"""

import json
from dataclasses import dataclass, field
from collections import Counter
from pathlib import Path

import numpy as np


class BundleError(ValueError):
    """The caption bundle is missing required records."""


# ------------------------------------------------------------------ box filter

def filter_boxes(boxes):
    """Keep boxes whose area w*h is >= the median area; ties are kept.

    boxes: sequence of objects with .w/.h attributes or {'w':..,'h':..} dicts.
    Returns the retained boxes in input order.
    """
    boxes = list(boxes)
    if not boxes:
        raise ValueError("no boxes to filter")

    def area(b):
        if isinstance(b, dict):
            return b["w"] * b["h"]
        return b.w * b.h

    median = float(np.median([area(b) for b in boxes]))
    return [b for b in boxes if area(b) >= median]


# --------------------------------------------------------------------- metrics

def caption_differs(a, b) -> bool:
    """True iff the token sequences are not identical."""
    return list(a) != list(b)


def wer(hypothesis, reference) -> float:
    """Token-level Levenshtein distance divided by reference length."""
    ref = list(reference)
    hyp = list(hypothesis)
    if not ref:
        raise ValueError("empty reference")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


def knn(index: "EmbeddingIndex", word: str, k: int = 5) -> list[str]:
    """k nearest vocabulary words by cosine distance; the query itself is
    excluded, ties broken by ascending vocabulary id."""
    if word not in index.ids:
        raise KeyError(f"word {word!r} not in embedding index")
    q = index.vectors[index.ids[word]]
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ValueError(f"zero-norm embedding for {word!r}")
    norms = np.linalg.norm(index.vectors, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("zero-norm embedding vector in index")
    dist = 1.0 - (index.vectors @ q) / (norms * qn)
    order = sorted(range(len(index.words)),
                   key=lambda i: (dist[i], index.vocab_ids[i]))
    return [index.words[i] for i in order if index.words[i] != word][:k]


@dataclass
class EmbeddingIndex:
    """Learned word embeddings, special tokens excluded."""
    words: list[str]
    vectors: np.ndarray
    vocab_ids: list[int]
    ids: dict = field(init=False)

    def __post_init__(self):
        self.ids = {w: i for i, w in enumerate(self.words)}

    @classmethod
    def from_model(cls, model) -> "EmbeddingIndex":
        words, rows, vids = [], [], []
        for vid, tok in enumerate(model.vocab.tokens):
            if tok.startswith("<") and tok.endswith(">"):
                continue
            words.append(tok)
            rows.append(model.store["embed"].value[vid])
            vids.append(vid)
        return cls(words=words, vectors=np.array(rows), vocab_ids=vids)


def _contains_contiguous(caption, phrase) -> bool:
    n = len(phrase)
    return any(list(caption[i:i + n]) == list(phrase) for i in range(len(caption) - n + 1))


def category_match(caption, category, expansion: str = "none",
                   index: EmbeddingIndex | None = None, k: int = 5) -> bool:
    """k@1: the category token sequence appears contiguously in the caption.
    k@5 (expansion='k5'): a k@1 match, or any of the k nearest embedding
    neighbors of any category token appears in the caption."""
    category = list(category)
    if not category:
        raise ValueError("empty category")
    caption = list(caption)
    if _contains_contiguous(caption, category):
        return True
    if expansion == "none":
        return False
    if expansion != "k5":
        raise ValueError(f"unknown expansion {expansion!r}")
    if index is None:
        raise ValueError("k5 expansion requires an embedding index")
    cap_set = set(caption)
    for tok in category:
        if tok not in index.ids:
            continue
        if any(nb in cap_set for nb in knn(index, tok, k)):
            return True
    return False


# ---------------------------------------------------------------------- bundle

@dataclass
class BoxCaption:
    scene: int
    box: int
    category: str
    method: str           # unlimited | limited | additive
    param: float | None
    caption: list[str]


@dataclass
class CaptionBundle:
    self_captions: dict            # scene -> tokens
    controls: dict                 # (method, param, scene) -> tokens
    box_captions: list[BoxCaption]

    def methods(self) -> list[tuple[str, float | None]]:
        seen = []
        for bc in self.box_captions:
            key = (bc.method, bc.param)
            if key not in seen:
                seen.append(key)
        return seen

    def validate(self):
        missing = []
        for bc in self.box_captions:
            if bc.scene not in self.self_captions:
                missing.append(f"self caption for scene {bc.scene}")
            if (bc.method, bc.param, bc.scene) not in self.controls:
                missing.append(f"control caption for {bc.method}-{bc.param} scene {bc.scene}")
        if missing:
            raise BundleError("incomplete bundle: " + "; ".join(sorted(set(missing))[:10]))


def load_bundle(paths) -> CaptionBundle:
    """Assemble a bundle from one or more forcing-output JSONL files."""
    self_captions, controls, box_captions = {}, {}, []
    if isinstance(paths, (str, Path)):
        paths = [paths]
    for path in paths:
        with open(path, encoding="utf-8") as f:
            for line in f:
                if not line.strip():
                    continue
                d = json.loads(line)
                method = d["method"]
                if method == "self":
                    self_captions[d["scene"]] = d["caption"]
                elif method == "control":
                    controls[(d["mirror"], d["param"], d["scene"])] = d["caption"]
                else:
                    box_captions.append(BoxCaption(
                        scene=d["scene"], box=d["box"], category=d["category"],
                        method=method, param=d["param"], caption=d["caption"]))
    return CaptionBundle(self_captions, controls, box_captions)


# --------------------------------------------------------------------- reports

@dataclass
class MethodRow:
    method: str
    param: float | None
    general_sens: float = 0.0
    method_sens: float = 0.0
    wer_general: float = 0.0
    wer_method: float = 0.0
    k1: float = 0.0
    k5: float = 0.0
    k1_distinct: float = 0.0
    k5_distinct: float = 0.0
    n_total: int = 0
    n_distinct_k1: int = 0
    n_distinct_k5: int = 0


@dataclass
class SensitivityReport:
    rows: list[MethodRow]


@dataclass
class ControllabilityReport:
    rows: list[MethodRow]


def _pct(num, den):
    return 100.0 * num / den if den else 0.0


def sensitivity(bundle: CaptionBundle) -> SensitivityReport:
    """General sensitivity: share of box captions differing from the
    self-attending caption. Method sensitivity: share differing from the
    control caption. Mean WER over the differing subsets only."""
    bundle.validate()
    rows = []
    for method, param in bundle.methods():
        subset = [bc for bc in bundle.box_captions
                  if bc.method == method and bc.param == param]
        gen_diff, met_diff = [], []
        for bc in subset:
            self_cap = bundle.self_captions[bc.scene]
            ctrl_cap = bundle.controls[(method, param, bc.scene)]
            if caption_differs(bc.caption, self_cap):
                gen_diff.append(wer(bc.caption, self_cap))
            if caption_differs(bc.caption, ctrl_cap):
                met_diff.append(wer(bc.caption, ctrl_cap))
        rows.append(MethodRow(
            method=method, param=param,
            general_sens=_pct(len(gen_diff), len(subset)),
            method_sens=_pct(len(met_diff), len(subset)),
            wer_general=float(np.mean(gen_diff)) if gen_diff else 0.0,
            wer_method=float(np.mean(met_diff)) if met_diff else 0.0,
            n_total=len(subset)))
    return SensitivityReport(rows=rows)


def distinct_subset(bundle: CaptionBundle, expansion: str = "none",
                    index: EmbeddingIndex | None = None) -> set:
    """(scene, box) pairs whose category (or, for k5, any neighbor too)
    is absent from the scene's self-attending caption."""
    retained = set()
    for bc in bundle.box_captions:
        key = (bc.scene, bc.box)
        self_cap = bundle.self_captions[bc.scene]
        if not category_match(self_cap, bc.category.split(), expansion, index):
            retained.add(key)
    return retained


def controllability(bundle: CaptionBundle, index: EmbeddingIndex) -> ControllabilityReport:
    bundle.validate()
    distinct_k1 = distinct_subset(bundle, "none")
    distinct_k5 = distinct_subset(bundle, "k5", index)
    rows = []
    for method, param in bundle.methods():
        subset = [bc for bc in bundle.box_captions
                  if bc.method == method and bc.param == param]
        n_k1 = sum(category_match(bc.caption, bc.category.split()) for bc in subset)
        n_k5 = sum(category_match(bc.caption, bc.category.split(), "k5", index)
                   for bc in subset)
        d1 = [bc for bc in subset if (bc.scene, bc.box) in distinct_k1]
        d5 = [bc for bc in subset if (bc.scene, bc.box) in distinct_k5]
        nd1 = sum(category_match(bc.caption, bc.category.split()) for bc in d1)
        nd5 = sum(category_match(bc.caption, bc.category.split(), "k5", index)
                  for bc in d5)
        rows.append(MethodRow(
            method=method, param=param,
            k1=_pct(n_k1, len(subset)), k5=_pct(n_k5, len(subset)),
            k1_distinct=_pct(nd1, len(d1)), k5_distinct=_pct(nd5, len(d5)),
            n_total=len(subset), n_distinct_k1=len(d1), n_distinct_k5=len(d5)))
    return ControllabilityReport(rows=rows)


def combined_rows(bundle: CaptionBundle, index: EmbeddingIndex) -> list[MethodRow]:
    sens = {(r.method, r.param): r for r in sensitivity(bundle).rows}
    rows = []
    for row in controllability(bundle, index).rows:
        s = sens[(row.method, row.param)]
        row.general_sens, row.method_sens = s.general_sens, s.method_sens
        row.wer_general, row.wer_method = s.wer_general, s.wer_method
        rows.append(row)
    return rows


CSV_HEADER = ("method,param,general_sens,method_sens,wer_general,wer_method,"
              "k1,k5,k1_distinct,k5_distinct,n_total,n_distinct_k1,n_distinct_k5")


def rows_to_csv(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        param = "" if r.param is None else f"{r.param:g}"
        lines.append(",".join([
            r.method, param,
            f"{r.general_sens:.4f}", f"{r.method_sens:.4f}",
            f"{r.wer_general:.4f}", f"{r.wer_method:.4f}",
            f"{r.k1:.4f}", f"{r.k5:.4f}",
            f"{r.k1_distinct:.4f}", f"{r.k5_distinct:.4f}",
            str(r.n_total), str(r.n_distinct_k1), str(r.n_distinct_k5)]))
    return "\n".join(lines) + "\n"


def _label(r) -> str:
    return r.method if r.param is None else f"{r.method}-{r.param:g}"


def format_tables(rows) -> str:
    out = ["Sensitivity (% of box captions deviating; WER on differing subset)",
           f"{'':14s} {'general (diff)':>16s} {'method (diff)':>16s}"]
    for r in rows:
        out.append(f"{_label(r):14s} {r.general_sens:10.2f} ({r.wer_general:.2f})"
                   f" {r.method_sens:10.2f} ({r.wer_method:.2f})")
    out.append("")
    out.append("Controllability (% of box captions containing their category)")
    out.append(f"{'':14s} {'k@1':>8s} {'k@5':>8s} {'k@1 dist':>10s} {'k@5 dist':>10s}")
    for r in rows:
        out.append(f"{_label(r):14s} {r.k1:8.2f} {r.k5:8.2f}"
                   f" {r.k1_distinct:10.2f} {r.k5_distinct:10.2f}")
    out.append(f"(n={rows[0].n_total if rows else 0} box captions per method;"
               f" distinct subsets k@1={rows[0].n_distinct_k1 if rows else 0},"
               f" k@5={rows[0].n_distinct_k5 if rows else 0})")
    return "\n".join(out) + "\n"


# ------------------------------------------------------------------------ BLEU

def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates, references, n_max: int = 4) -> list[float]:
    """Corpus BLEU-1..n_max (x100): clipped n-gram precision, uniform
    weights, brevity penalty with closest-reference length (ties toward
    the shorter reference). No smoothing. references is a list of
    reference lists, aligned with candidates."""
    if not candidates or len(candidates) != len(references):
        raise ValueError("candidates and references must be non-empty and aligned")
    clipped = np.zeros(n_max)
    total = np.zeros(n_max)
    cand_len, ref_len = 0, 0
    for cand, refs in zip(candidates, references):
        cand = list(cand)
        refs = [list(r) for r in refs]
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            cgrams = _ngrams(cand, n)
            if not cgrams:
                continue
            max_ref = Counter()
            for r in refs:
                rgrams = _ngrams(r, n)
                for g, c in rgrams.items():
                    max_ref[g] = max(max_ref[g], c)
            total[n - 1] += sum(cgrams.values())
            clipped[n - 1] += sum(min(c, max_ref[g]) for g, c in cgrams.items())
    bp = 1.0 if cand_len > ref_len else np.exp(1.0 - ref_len / max(cand_len, 1))
    scores = []
    for n in range(1, n_max + 1):
        precisions = [clipped[k] / total[k] if total[k] else 0.0 for k in range(n)]
        if any(p == 0.0 for p in precisions):
            scores.append(0.0)
            continue
        scores.append(100.0 * bp * float(np.exp(np.mean(np.log(precisions)))))
    return scores
