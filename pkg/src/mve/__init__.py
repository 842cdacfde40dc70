"""Multi-vector dense retrieval engine.

Documents and queries are represented by one embedding per token. Retrieval
runs in two stages: per-query-embedding candidate generation over an
inverted-file index, then exact MaxSim reranking of the candidate union with
the complete query representation. The number of query embeddings that take
part in the first stage is configurable, with orderings by occurrence or by
collection statistics deciding which ones run first.

Submodules:
    core        tokenization, the deterministic token embedder, lexicon
    index       embedding store, k-means coarse quantizer, IVF, persistence
    retrieval   candidate generation, pruned union, MaxSim reranking
    evaluation  nDCG/MAP/MRR, paired significance tests, the pruning sweep
    engine      configuration and engine-directory assembly
    cli         the ``mve`` command line tool
"""

__version__ = "0.1.0"
