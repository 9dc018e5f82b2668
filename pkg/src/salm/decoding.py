"""Inference: greedy decoding, nucleus sampling, trie-biased beam search.

The biasing analog of external-graph shallow fusion: every hypothesis carries
a cursor into a token-level prefix trie of the keyword list. Walking an edge
earns context_score immediately; falling off the trie mid-keyword rolls the
partial bonus back (and re-enters from the root if the current token starts a
new match); completing a keyword locks its bonus in and resets the cursor.
Hypotheses are finalized with their pending bonus rolled back, so a finished
hypothesis is only ever credited for fully matched keywords.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import torch

from .config import BiasConfig, NucleusConfig
from .errors import ValidationError
from .model import SALM, PromptLayout, TokenSequence
from .tokenizer import EOS_ID


def _check_max_new(max_new: int) -> None:
    if max_new <= 0:
        raise ValidationError("max_new must be positive")


# ---- greedy ------------------------------------------------------------------


def greedy_decode_batch(model: SALM, layouts: list[PromptLayout],
                        max_new: int, eos_id: int = EOS_ID) -> list[list[int]]:
    _check_max_new(max_new)
    state, logits = model.decode_start(layouts)
    outs: list[list[int]] = [[] for _ in layouts]
    finished = [False] * len(layouts)
    for _ in range(max_new):
        tokens = logits.argmax(dim=-1)
        for b, out in enumerate(outs):
            if not finished[b]:
                tid = int(tokens[b])
                if tid == eos_id:
                    finished[b] = True
                else:
                    out.append(tid)
        if all(finished):
            break
        logits = model.decode_step(state, tokens)
    return outs


def greedy_decode(model: SALM, layout: PromptLayout, max_new: int,
                  eos_id: int = EOS_ID) -> TokenSequence:
    """Iteratively appends the argmax token until EOS or max_new."""
    with torch.no_grad():
        ids = greedy_decode_batch(model, [layout], max_new, eos_id)[0]
    return TokenSequence(ids=ids, role="answer")


# ---- nucleus sampling --------------------------------------------------------


def nucleus_support(logits: torch.Tensor, config: NucleusConfig):
    """Truncated support: temperature, then top-k, then smallest top-p prefix.

    Returns (ids, probs) sorted by descending probability; probs are the
    renormalized sampling distribution over the support.
    """
    probs = torch.softmax(logits.to(torch.float64) / config.temperature, dim=-1)
    k = min(config.top_k, probs.shape[-1])
    top_probs, top_idx = probs.topk(k)
    cum = top_probs.cumsum(-1)
    # tiny slack so an exactly-reached boundary counts as "mass >= top_p"
    keep = min(int((cum < config.top_p - 1e-9).sum()) + 1, k)
    support_probs = top_probs[:keep]
    return top_idx[:keep], support_probs / support_probs.sum()


def nucleus_step(logits: torch.Tensor, config: NucleusConfig,
                 generator: torch.Generator) -> int:
    ids, probs = nucleus_support(logits, config)
    choice = torch.multinomial(probs, 1, generator=generator)
    return int(ids[choice])


def nucleus_decode_batch(model: SALM, layouts: list[PromptLayout],
                         config: NucleusConfig, max_new: int,
                         eos_id: int = EOS_ID,
                         generator: torch.Generator | None = None) -> list[list[int]]:
    _check_max_new(max_new)
    if generator is None:
        generator = torch.Generator().manual_seed(config.seed)
    state, logits = model.decode_start(layouts)
    outs: list[list[int]] = [[] for _ in layouts]
    finished = [False] * len(layouts)
    for _ in range(max_new):
        tokens = torch.zeros(len(layouts), dtype=torch.long)
        for b, out in enumerate(outs):
            if finished[b]:
                tokens[b] = eos_id
                continue
            tid = nucleus_step(logits[b], config, generator)
            tokens[b] = tid
            if tid == eos_id:
                finished[b] = True
            else:
                out.append(tid)
        if all(finished):
            break
        logits = model.decode_step(state, tokens)
    return outs


def nucleus_decode(model: SALM, layout: PromptLayout, config: NucleusConfig,
                   max_new: int, eos_id: int = EOS_ID,
                   trace: list | None = None) -> TokenSequence:
    """Seeded nucleus sampling; optionally records (support, token) per step."""
    _check_max_new(max_new)
    generator = torch.Generator().manual_seed(config.seed)
    with torch.no_grad():
        state, logits = model.decode_start([layout])
        out: list[int] = []
        for _ in range(max_new):
            ids, probs = nucleus_support(logits[0], config)
            choice = torch.multinomial(probs, 1, generator=generator)
            tid = int(ids[choice])
            if trace is not None:
                trace.append((ids.tolist(), tid))
            if tid == eos_id:
                break
            out.append(tid)
            logits = model.decode_step(state, torch.tensor([tid]))
    return TokenSequence(ids=out, role="answer")


# ---- keyword trie ------------------------------------------------------------


class TrieNode:
    __slots__ = ("children", "end_of_keyword")

    def __init__(self):
        self.children: dict[int, TrieNode] = {}
        self.end_of_keyword = False


@dataclass
class KeywordTrie:
    root: TrieNode
    edge_bonus: float = 1.0
    num_keywords: int = 0
    num_nodes: int = 0  # excluding the root

    @property
    def is_empty(self) -> bool:
        return not self.root.children


def empty_trie() -> KeywordTrie:
    return KeywordTrie(root=TrieNode())


def build_keyword_trie(keywords: list[str], tokenizer) -> KeywordTrie:
    """One terminal path per distinct keyword; shared prefixes share nodes."""
    root = TrieNode()
    num_nodes = 0
    seen: set[str] = set()
    for keyword in keywords:
        norm = keyword.strip().lower()
        if not norm:
            raise ValidationError("keywords must be nonempty strings")
        if norm in seen:
            continue
        seen.add(norm)
        ids = tokenizer.encode(norm)
        node = root
        for tid in ids:
            child = node.children.get(tid)
            if child is None:
                child = TrieNode()
                node.children[tid] = child
                num_nodes += 1
            node = child
        node.end_of_keyword = True
    return KeywordTrie(root=root, num_keywords=len(seen), num_nodes=num_nodes)


def trie_advance(trie: KeywordTrie, node: TrieNode, pending: float, token: int):
    """One biasing transition.

    Returns (node, pending, locked_delta) in edge-bonus units. A mismatch
    rolls the pending bonus back and retries the token from the root; a
    completed keyword converts pending into locked and resets to the root.
    """
    child = node.children.get(token)
    if child is None:
        node, pending = trie.root, 0.0
        child = node.children.get(token)
        if child is None:
            return trie.root, 0.0, 0.0
    pending += trie.edge_bonus
    if child.end_of_keyword:
        return trie.root, 0.0, pending
    return child, pending, 0.0


# ---- biased beam search ------------------------------------------------------


@dataclass
class _Hyp:
    tokens: list[int] = field(default_factory=list)
    logp: float = 0.0
    locked: float = 0.0   # bonus units from completed keywords
    pending: float = 0.0  # bonus units of the current partial match
    node: TrieNode | None = None
    finished: bool = False
    row: int = -1         # cache row while alive

    def score(self, context_score: float) -> float:
        return self.logp + context_score * (self.locked + self.pending)


def _finalize(hyp: _Hyp) -> _Hyp:
    # finishing rolls back any partial-match bonus and parks the cursor at root
    return replace(hyp, pending=0.0, finished=True, row=-1)


def beam_search_batch(model: SALM, layouts: list[PromptLayout],
                      trie: KeywordTrie | None, config: BiasConfig,
                      max_new: int, eos_id: int = EOS_ID) -> list[list[int]]:
    """Length-synchronous beam search over LM log-probs plus trie bonuses.

    No length normalization. Per hypothesis and step the candidate tokens are
    the top gamma by LM log-prob plus every token with a trie edge from the
    hypothesis' cursor or the root (biasing arcs are always scored, so the
    expansion window cannot starve a keyword path). Candidates whose *biased*
    score delta trails the best candidate's by more than alpha are dropped.
    EOS is forced after max_new.
    """
    _check_max_new(max_new)
    if trie is None:
        trie = empty_trie()
    cs = config.context_score
    width = config.beam_width
    max_expand = max(1, int(config.gamma))

    state, logits = model.decode_start(layouts)
    beams: list[list[_Hyp]] = [
        [_Hyp(node=trie.root, row=u)] for u in range(len(layouts))]

    for step in range(max_new):
        if not any(not h.finished for beam in beams for h in beam):
            break
        logprobs = logits.log_softmax(dim=-1)
        new_beams: list[list[_Hyp]] = []
        for beam in beams:
            pool = [h for h in beam if h.finished]
            for hyp in beam:
                if hyp.finished:
                    continue
                row_lp = logprobs[hyp.row]
                top_lp, top_ids = row_lp.topk(min(max_expand, row_lp.shape[-1]))
                cand_ids = list(dict.fromkeys(
                    top_ids.tolist()
                    + sorted(hyp.node.children)
                    + sorted(trie.root.children)))
                scored = []
                for tid in cand_ids:
                    lp = float(row_lp[tid])
                    if tid == eos_id:
                        new_hyp = _finalize(
                            replace(hyp, logp=hyp.logp + lp, tokens=list(hyp.tokens)))
                    else:
                        node, pending, locked_delta = trie_advance(
                            trie, hyp.node, hyp.pending, tid)
                        new_hyp = _Hyp(tokens=hyp.tokens + [tid],
                                       logp=hyp.logp + lp,
                                       locked=hyp.locked + locked_delta,
                                       pending=pending, node=node, row=hyp.row)
                    scored.append(new_hyp)
                best = max(h.score(cs) for h in scored)
                pool.extend(h for h in scored if best - h.score(cs) <= config.alpha)
            pool.sort(key=lambda h: h.score(cs), reverse=True)
            new_beams.append(pool[:width])
        beams = new_beams

        last_step = step == max_new - 1
        alive: list[_Hyp] = []
        parent_rows: list[int] = []
        fed_tokens: list[int] = []
        for beam in beams:
            for i, hyp in enumerate(beam):
                if hyp.finished:
                    continue
                if last_step:
                    beam[i] = _finalize(hyp)
                    continue
                parent_rows.append(hyp.row)
                fed_tokens.append(hyp.tokens[-1])
                alive.append(hyp)
        if not alive:
            break
        for new_row, hyp in enumerate(alive):
            hyp.row = new_row
        state = model.state_select(state, torch.tensor(parent_rows, dtype=torch.long))
        logits = model.decode_step(state, torch.tensor(fed_tokens, dtype=torch.long))

    results = []
    for beam in beams:
        done = [h for h in beam if h.finished]
        best = max(done, key=lambda h: h.score(cs))
        results.append(best.tokens)
    return results


def biased_beam_search(model: SALM, layout: PromptLayout, trie: KeywordTrie | None,
                       config: BiasConfig, max_new: int,
                       eos_id: int = EOS_ID) -> TokenSequence:
    with torch.no_grad():
        ids = beam_search_batch(model, [layout], trie, config, max_new, eos_id)[0]
    return TokenSequence(ids=ids, role="answer")
