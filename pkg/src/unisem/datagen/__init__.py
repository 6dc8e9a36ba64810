from .generate import Corpus, DomainData, Instance, build_kb, generate_corpus, stable_seed
from .masking import mask_entities, unmask
from .normalize import denormalize, normalize_external
from .spec import DomainSpec, PropertySpec, Template, default_bundle, load_bundle, save_bundle
from .stats import corpus_stats, format_stats

__all__ = [
    "Corpus", "DomainData", "Instance", "build_kb", "generate_corpus", "stable_seed",
    "mask_entities", "unmask", "denormalize", "normalize_external",
    "DomainSpec", "PropertySpec", "Template", "default_bundle", "load_bundle", "save_bundle",
    "corpus_stats", "format_stats",
]
