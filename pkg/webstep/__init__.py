"""webstep package."""

__all__ = [
    "actions",
    "agent",
    "chunking",
    "cli",
    "dom",
    "evaluation",
    "llm",
    "preprocess",
    "pruning",
    "selector",
    "tokenizer",
    "workflows",
]
