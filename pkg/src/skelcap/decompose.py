"""Skeleton-attribute decomposition of parse trees and its inverse (fusion).

The rule: within every lowest-level noun phrase, the last word is kept as a
skeletal object word and all words before it become that word's attribute
sequence. Every other leaf passes through as a skeleton word with no
attributes. Fusion re-interleaves attributes immediately before their
skeletal word.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

from .treebank import ParseTree, leaves, lowest_nps


class DecomposeError(ValueError):
    pass


@dataclass(frozen=True)
class SkeletonToken:
    surface: str
    is_np_head: bool = False
    attributes: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.attributes and not self.is_np_head:
            raise DecomposeError("only NP heads may carry attributes")


@dataclass(frozen=True)
class DecomposedCaption:
    skeleton: Tuple[SkeletonToken, ...]
    original_length: int

    @property
    def skeleton_words(self):
        return [t.surface for t in self.skeleton]


def _leaf_nodes(node, out):
    if node.is_leaf:
        out.append(node)
    else:
        for c in node.children:
            _leaf_nodes(c, out)


def decompose(tree: ParseTree) -> DecomposedCaption:
    """Apply the lowest-NP head/attribute split to a parse tree."""
    all_leaves = []
    _leaf_nodes(tree.root, all_leaves)
    # Map each leaf position to the lowest NP covering it, if any.
    np_of_leaf = [None] * len(all_leaves)
    np_spans = []
    pos_of = {id(leaf): i for i, leaf in enumerate(all_leaves)}
    for np_idx, np_node in enumerate(lowest_nps(tree)):
        np_leaves = []
        _leaf_nodes(np_node, np_leaves)
        positions = [pos_of[id(leaf)] for leaf in np_leaves]
        np_spans.append(positions)
        for p in positions:
            np_of_leaf[p] = np_idx

    tokens: List[SkeletonToken] = []
    handled = set()
    for pos, leaf in enumerate(all_leaves):
        np_idx = np_of_leaf[pos]
        if np_idx is None:
            tokens.append(SkeletonToken(surface=leaf.token))
            continue
        if np_idx in handled:
            continue
        handled.add(np_idx)
        span = np_spans[np_idx]
        words = [all_leaves[p].token for p in span]
        tokens.append(SkeletonToken(surface=words[-1], is_np_head=True,
                                    attributes=tuple(words[:-1])))
    return DecomposedCaption(skeleton=tuple(tokens), original_length=len(all_leaves))


def fuse(d: DecomposedCaption) -> List[str]:
    """Inverse of decompose: attributes then their skeletal word, in order."""
    out: List[str] = []
    for tok in d.skeleton:
        out.extend(tok.attributes)
        out.append(tok.surface)
    return out


def fuse_predicted(skeleton_words: Sequence[str],
                   attrs: Sequence[Sequence[str]]) -> List[str]:
    """Interleave predicted attribute sequences before their skeleton words."""
    if len(skeleton_words) != len(attrs):
        raise DecomposeError(
            f"{len(skeleton_words)} skeleton words but {len(attrs)} attribute sequences")
    out: List[str] = []
    for word, a in zip(skeleton_words, attrs):
        out.extend(a)
        out.append(word)
    return out


def format_decomposition(d: DecomposedCaption) -> str:
    """One-line dump: skeleton words, each head followed by ``{attr ...}`` if any."""
    parts = []
    for tok in d.skeleton:
        parts.append(tok.surface)
        if tok.attributes:
            parts.append("{" + " ".join(tok.attributes) + "}")
    return " ".join(parts)


def parse_decomposition(line: str) -> DecomposedCaption:
    """Inverse of format_decomposition.

    Heads with empty attribute lists are indistinguishable from plain skeleton
    words in this format, so reparsed tokens are NP heads iff they carry
    attributes.
    """
    tokens: List[SkeletonToken] = []
    parts = line.split()
    i = 0
    while i < len(parts):
        word = parts[i]
        if word.startswith("{"):
            raise DecomposeError(f"attribute group without a preceding word: {line!r}")
        i += 1
        attrs: List[str] = []
        if i < len(parts) and parts[i].startswith("{"):
            group = []
            while i < len(parts):
                group.append(parts[i])
                i += 1
                if group[-1].endswith("}"):
                    break
            else:
                raise DecomposeError(f"unterminated attribute group: {line!r}")
            raw = " ".join(group)[1:-1].strip()
            attrs = raw.split() if raw else []
        tokens.append(SkeletonToken(surface=word, is_np_head=bool(attrs),
                                    attributes=tuple(attrs)))
    length = sum(1 + len(t.attributes) for t in tokens)
    return DecomposedCaption(skeleton=tuple(tokens), original_length=length)
