"""Bundled reference data: published token counts, mixtures and the update chain.

Domain ids use ``<source>:<topic>`` for partitioned sources and a bare name for
single-domain sources.
"""

from functools import lru_cache
from importlib import resources

from ._io import read_json
from .domains import DomainSet, DomainUpdate, Mixture


@lru_cache(maxsize=None)
def _load(name):
    with resources.as_file(resources.files("mixopt") / "data" / name) as path:
        return read_json(path)


def token_counts() -> dict:
    """Token counts grouped by source: ``{"dclm": {...}, "stack-edu": {...}, ...}``."""
    return {k: dict(v) for k, v in _load("token_counts.json").items()}


def published_mixtures() -> dict:
    """Final-stage mixtures keyed by method (``natural``, ``full_recompute``, ``partial_reuse``)."""
    return {k: dict(v) for k, v in _load("published_mixtures.json").items()}


def published_mixture(name: str, d: DomainSet | None = None) -> Mixture:
    w = published_mixtures()[name]
    d = d if d is not None else final_domain_set()
    return Mixture.from_mapping(d, w)


def pdf_total() -> int:
    return sum(token_counts()["pdf"].values())


ADD6 = ("arxiv", "finemath-3plus", "pdf", "wikipedia", "algebraicstack", "pes2o")
# partial reuse on the chain also recomputes these unaffected ids at the given stage
CHAIN_EXTRA_RECOMPUTE = {1: ("dclm:software_development",)}


def update_chain():
    """The six-stage development chain (24 -> 39 -> 45 -> 45 -> 44 -> 64 domains).

    Returns the initial domain set and a list of ``(label, DomainUpdate)``.
    The unpartitioned PDF domain carries the sum of its children's tokens; the
    Revise step keeps its id and count.
    """
    tc = token_counts()
    initial = DomainSet(tuple(tc["dclm"].items()))
    single = dict(tc["single"], pdf=pdf_total())
    steps = [
        ("add stack-edu", DomainUpdate.add(tuple(tc["stack-edu"].items()))),
        ("add sources", DomainUpdate.add(tuple((i, single[i]) for i in ADD6))),
        ("revise pdf", DomainUpdate.revise("pdf", "pdf", single["pdf"])),
        ("remove algebraicstack", DomainUpdate.remove(["algebraicstack"])),
        ("partition pdf", DomainUpdate.partition("pdf", tuple(tc["pdf"].items()))),
    ]
    return initial, steps


def final_domain_set() -> DomainSet:
    """The 64-domain set at the end of the chain."""
    from .domains import apply_update

    d, steps = update_chain()
    for _, u in steps:
        d, _ = apply_update(d, u)
    return d


def source_of(domain_id: str) -> str:
    """Source prefix of an id (``dclm:games`` -> ``dclm``; ``arxiv`` -> ``arxiv``)."""
    return domain_id.split(":", 1)[0]
