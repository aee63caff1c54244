"""Assemble graph encoder, aligner and prompts around a frozen LM for each method."""

from __future__ import annotations

import contextlib
from dataclasses import replace

import torch
from torch import nn

from .alignment import CgpAligner, GnpAligner, ProjectorAligner
from .config import METHODS, AblationConfig, AlignConfig, EncoderConfig, derive_seed
from .embeddings import OneHotTypeFeatures, TypeEmbeddingTables, edge_feature_matrix, initial_node_embeddings
from .encoder import EncoderStack, PooledGraph, TopKPooler
from .graph_model import Sample
from .lm import (
    PERSONA,
    FrozenLM,
    PromptBundle,
    classify_constrained,
    forward_with_prompt,
    label_token_ids,
    render_grace_prompt,
    render_prompt,
)

GRAPH_METHODS = ("cgp", "projector", "gnp")


@contextlib.contextmanager
def _seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


class VulnDetector(nn.Module):
    """One model class for every method; ``method`` decides which parts exist.

    ``cgp``       soft prompt + type tables + encoder/pooler + CGP aligner
    ``prompt``    soft prompt only (initialised from the persona sentence)
    ``projector`` encoder/pooler over one-hot types + mean-pool projector
    ``gnp``       encoder/pooler over one-hot types + GNP aligner
    ``zero-shot`` / ``grace``  nothing trainable
    """

    def __init__(
        self,
        lm: FrozenLM,
        method: str = "cgp",
        encoder_cfg: EncoderConfig | None = None,
        align_cfg: AlignConfig | None = None,
        ablation: AblationConfig | None = None,
        seed: int = 0,
    ):
        super().__init__()
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}")
        self.method = method
        self.lm = lm
        self.ablation = ablation or AblationConfig()
        if self.ablation.active() and method != "cgp":
            raise ValueError("ablation toggles apply to the cgp method only")
        self.align_cfg = align_cfg or AlignConfig()
        d = lm.d_lm
        self.encoder_cfg = replace(encoder_cfg or EncoderConfig(width=d), width=d)
        self.true_id, self.false_id = label_token_ids(lm)

        if method in ("cgp", "prompt"):
            with _seeded(derive_seed(seed, "soft_prompt")):
                init = torch.randn(self.align_cfg.num_prompts, d)
            if method == "prompt":
                init = self._text_init(PERSONA, self.align_cfg.num_prompts)
            self.soft_prompt = nn.Parameter(init)

        if method == "cgp":
            with _seeded(derive_seed(seed, "type_tables")):
                self.type_tables = TypeEmbeddingTables(d, self.align_cfg.d_te)
            d_edge = None if self.ablation.no_edge_types else self.align_cfg.d_te
        elif method in GRAPH_METHODS:
            with _seeded(derive_seed(seed, "type_features")):
                self.type_features = OneHotTypeFeatures(d)
            d_edge = self.type_features.d_te

        if method in GRAPH_METHODS:
            with _seeded(derive_seed(seed, "encoder")):
                self.encoder = EncoderStack(self.encoder_cfg, d_edge)
                self.pooler = TopKPooler(d, self.encoder_cfg.k)
            with _seeded(derive_seed(seed, "aligner")):
                aligner_cls = {"cgp": CgpAligner, "projector": ProjectorAligner, "gnp": GnpAligner}[method]
                self.aligner = aligner_cls(d, self.align_cfg)

    def _text_init(self, text: str, rows: int) -> torch.Tensor:
        ids = self.lm.tokenize(text)
        want = [ids[i % len(ids)] for i in range(rows)]
        return self.lm.embed(want).detach().clone()

    # -- forward pieces ---------------------------------------------------------

    def render(self, sample: Sample, max_tokens: int) -> PromptBundle:
        if self.method == "grace":
            return render_grace_prompt(sample.graph, sample.code, self.lm.tokenize, max_tokens)
        return render_prompt(sample.code, self.lm.tokenize, max_tokens)

    def text_embeddings(self, bundle: PromptBundle) -> torch.Tensor:
        return self.lm.embed(bundle.token_ids).to(self._dtype())

    def _dtype(self):
        return next(self.lm.parameters()).dtype

    def graph_features(self, sample: Sample) -> PooledGraph:
        graph = sample.graph
        if self.method == "cgp":
            abl = self.ablation
            h1 = initial_node_embeddings(
                graph, self.type_tables, use_node_types=not abl.no_node_types, use_positional=not abl.no_positional
            )
            edge_feats = None if abl.no_edge_types else edge_feature_matrix(graph, self.type_tables)
        else:
            h1 = self.type_features.nodes(graph)
            edge_feats = self.type_features.edges(graph)
        return self.pooler(self.encoder(h1, graph, edge_feats))

    def prompt_rows(self, sample: Sample, x_t: torch.Tensor) -> torch.Tensor | None:
        """Z for this sample, or None when nothing is injected."""
        if self.method in ("zero-shot", "grace"):
            return None
        if self.method == "prompt":
            return self.soft_prompt
        if self.method == "cgp" and (self.ablation.no_alignment or self.ablation.no_mha):
            if self.ablation.no_alignment:
                return self.soft_prompt
            return self.aligner.ffn(self.soft_prompt)
        h3 = self.graph_features(sample).h3
        if self.method == "cgp":
            return self.aligner(self.soft_prompt, x_t, h3, use_projector=not self.ablation.no_projector)
        if self.method == "gnp":
            return self.aligner(h3, x_t)
        return self.aligner(h3)

    def answer_logits(self, sample: Sample, max_tokens: int = 16000) -> torch.Tensor:
        bundle = self.render(sample, max_tokens)
        x_t = self.text_embeddings(bundle)
        z = self.prompt_rows(sample, x_t)
        logits = forward_with_prompt(self.lm, z, x_t)
        offset = 0 if z is None else z.shape[0]
        return logits[offset + bundle.answer_position]

    def training_logits(self, sample: Sample, max_tokens: int = 4096):
        """Logits over [Z; text; answer], next-token targets and the supervised rows T.

        The answer token is appended after the alignment step sees the text, so
        Z never depends on the label.
        """
        bundle = self.render(sample, max_tokens)
        x_t = self.text_embeddings(bundle)
        z = self.prompt_rows(sample, x_t)
        answer = self.true_id if sample.label else self.false_id
        seq_text = torch.cat([x_t, self.lm.embed([answer]).to(x_t.dtype)], dim=0)
        logits = forward_with_prompt(self.lm, z, seq_text)
        n_s = 0 if z is None else z.shape[0]
        tokens = torch.full((logits.shape[0],), -100, dtype=torch.long)
        tokens[n_s:] = torch.tensor(list(bundle.token_ids) + [answer])
        # row i predicts the token at i + 1
        targets = torch.full_like(tokens, -100)
        targets[:-1] = tokens[1:]
        mask = torch.zeros(logits.shape[0], dtype=torch.bool)
        mask[bundle.supervised_positions(n_s)] = True
        return logits, targets, mask

    @torch.no_grad()
    def predict(self, sample: Sample, max_tokens: int = 16000) -> tuple[bool, float]:
        was_training = self.training
        self.eval()
        try:
            return classify_constrained(self.answer_logits(sample, max_tokens), self.true_id, self.false_id)
        finally:
            self.train(was_training)


def build_model(lm: FrozenLM, method: str, seed: int = 0, ablation: AblationConfig | None = None,
                encoder_cfg: EncoderConfig | None = None, align_cfg: AlignConfig | None = None) -> VulnDetector:
    return VulnDetector(lm, method, encoder_cfg, align_cfg, ablation, seed)
