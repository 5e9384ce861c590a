"""The full observation pipeline: parse, prune, ratio-prune, number."""
from __future__ import annotations

import logging
from typing import Optional

from .dom import DomTree, PrunedDom, assign_node_ids, parse_html
from .pruning import PruneConfig, default_config, prune
from .tokenizer import TokenizerProfile, prune_attributes_by_ratio

LOGGER = logging.getLogger(__name__)


def preprocess_tree(
    tree: DomTree,
    config: Optional[PruneConfig] = None,
    tok: Optional[TokenizerProfile] = None,
) -> PrunedDom:
    """Prune an already parsed tree and number its elements.

    Ratio pruning only runs when a tokenizer is given. Source indices from
    ``tree`` survive, so raw elements can be mapped to node IDs afterwards.
    """

    config = config or default_config()
    pruned = prune(tree, config)
    if tok is not None:
        pruned = prune_attributes_by_ratio(pruned, tok, config)
    pd = assign_node_ids(pruned, config.attribute_order)
    LOGGER.debug("Preprocessed page into %d elements", len(pd))
    return pd


def preprocess_html(
    text: str,
    config: Optional[PruneConfig] = None,
    tok: Optional[TokenizerProfile] = None,
) -> PrunedDom:
    return preprocess_tree(parse_html(text), config, tok)
