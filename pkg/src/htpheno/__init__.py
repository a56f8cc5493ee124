"""High-throughput phenotyping of clinical summaries.

Signs are identified and categorized by a pluggable backend, mapped to HPO
terms, and summarized as 30-category disease vectors for heatmaps and PCA.
"""
from .categories import CATEGORIES
from .categorize import DiseaseVectorizer, VectorTable, binarize, categorize_signs, vectorize_corpus
from .corpus import ClinicalSummary, SeriesManifest, is_usable, preprocess
from .embeddings import EmbeddingStore, cosine, embed_phrase, load_vectors
from .extraction import Sign, identify_signs, lexicon_extract, parse_sign_response
from .normalize import EmbeddingNormalizer, NormalizedSign, normalize_backend, normalize_embedding, verify_mapping
from .ontology import HpoIndex, HpoTerm, load_ontology
from .analytics import PhenotypePCA, build_heatmap, centroids, pca_project

__version__ = "0.1.0"
