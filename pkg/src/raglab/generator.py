"""Context-grounded answer generation and its instruction-tuning loss.

Prompts place retrieved document text before the question:

    [BOS] doc_1 [SEP] doc_2 ... [SEP] question [SEP] answer [EOS]

Training masks the loss to the answer tokens plus the closing EOS. When the
combined documents overflow the context window the document region is
head-truncated (bytes are dropped from its front), never the question or the
answer. With no documents at all the prompt degrades to [BOS] question [SEP].
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .autograd import Tensor
from .backbone import BackboneParams, greedy_decode, masked_token_loss, sequence_logprob
from .tokenizer import BOS, EOS, SEP, detokenize, tokenize

MAX_PROMPT_DOCS = 3


@dataclass(frozen=True)
class QDATuple:
    """A (question, gold doc id, answer) supervision row."""

    question: str
    doc_id: str
    answer: str

    def __post_init__(self):
        if not self.question or not self.doc_id or not self.answer:
            raise ValueError("question, doc_id and answer must all be non-empty")


@dataclass(frozen=True)
class PromptLayout:
    """Token ids of one prompt plus span bookkeeping.

    Spans are half-open [start, stop) index ranges into ids. target_mask marks
    the positions whose tokens the training loss predicts (answer + EOS); it is
    all zeros for an inference prompt built without an answer.
    """

    ids: tuple[int, ...]
    doc_span: tuple[int, int]
    question_span: tuple[int, int]
    answer_span: tuple[int, int]
    target_mask: tuple[int, ...]
    doc_truncated: bool
    no_context: bool


def build_prompt(
    question: str,
    docs: Sequence[str],
    answer: str | None,
    max_seq_len: int,
) -> PromptLayout:
    """Assemble a generation prompt, budgeting the window around the fixed parts."""
    if not question:
        raise ValueError("question must be non-empty")
    if answer is not None and not answer:
        raise ValueError("answer must be non-empty when given")
    if len(docs) > MAX_PROMPT_DOCS:
        raise ValueError(f"at most {MAX_PROMPT_DOCS} documents fit in a prompt")

    q_ids = list(tokenize(question).ids)
    a_ids = list(tokenize(answer).ids) if answer is not None else []
    # BOS + [SEP after docs] + question + SEP (+ answer + EOS)
    fixed = 1 + len(q_ids) + 1 + (len(a_ids) + 1 if answer is not None else 0)

    no_context = len(docs) == 0
    doc_truncated = False
    if no_context:
        region: list[int] = []
    else:
        fixed += 1
        budget = max_seq_len - fixed
        if budget < 0:
            raise ValueError("question and answer alone exceed the context window")
        region = []
        for i, doc in enumerate(docs):
            if i > 0:
                region.append(SEP)
            region.extend(tokenize(doc).ids)
        if len(region) > budget:
            region = region[len(region) - budget :]
            doc_truncated = True
    if fixed > max_seq_len:
        raise ValueError("question and answer alone exceed the context window")

    ids = [BOS]
    doc_span = (1, 1 + len(region))
    ids.extend(region)
    if not no_context:
        ids.append(SEP)
    q_start = len(ids)
    ids.extend(q_ids)
    question_span = (q_start, len(ids))
    ids.append(SEP)
    a_start = len(ids)
    if answer is not None:
        ids.extend(a_ids)
        ids.append(EOS)
    answer_span = (a_start, a_start + len(a_ids))

    mask = [0] * len(ids)
    if answer is not None:
        for j in range(a_start, len(ids)):  # answer tokens and the EOS
            mask[j] = 1
    return PromptLayout(
        ids=tuple(ids),
        doc_span=doc_span,
        question_span=question_span,
        answer_span=answer_span,
        target_mask=tuple(mask),
        doc_truncated=doc_truncated,
        no_context=no_context,
    )


def rag_it_loss(params: BackboneParams, adapter, layouts: Sequence[PromptLayout]) -> Tensor:
    """Mean NLL over the masked (answer + EOS) tokens of a batch of layouts."""
    if not layouts:
        raise ValueError("empty batch")
    for lay in layouts:
        if not any(lay.target_mask):
            raise ValueError("layout has no target positions; build it with an answer")
    return masked_token_loss(
        params,
        [list(lay.ids) for lay in layouts],
        [list(lay.target_mask) for lay in layouts],
        adapter,
    )


def answer(
    params: BackboneParams,
    adapter,
    question: str,
    docs: Sequence[str],
    max_new: int = 64,
) -> tuple[str, bool]:
    """Greedy-decode an answer; returns (text, no_context flag)."""
    layout = build_prompt(question, docs, None, params.config.max_seq_len)
    generated = greedy_decode(params, list(layout.ids), max_new, adapter)
    return detokenize(generated), layout.no_context


def score_candidate(params: BackboneParams, adapter, question: str, title: str) -> float:
    """Log-probability of a candidate item title given the bare question prompt.

    The title is tail-truncated if the window demands it; the question never is.
    """
    if not title:
        raise ValueError("title must be non-empty")
    layout = build_prompt(question, [], None, params.config.max_seq_len)
    context = list(layout.ids)
    room = params.config.max_seq_len - len(context)
    if room < 1:
        raise ValueError("question alone exceeds the context window")
    title_ids = list(tokenize(title, max_len=room).ids)
    return sequence_logprob(params, context, title_ids, adapter)
