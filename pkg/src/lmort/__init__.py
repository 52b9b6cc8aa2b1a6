"""Desk-scale retrieval tuner toolkit over frozen layered hidden states.

Submodules:
    hidden_states   data model + HSD/qrels/JSONL formats
    synthetic_llm   frozen toy causal transformer + task generator
    space_analysis  per-layer alignment/uniformity diagnostics
    lmort_core      the bi-attention tuner (analytic forward/backward)
    training        contrastive training with Adam
    retrieval       exact top-K search + NDCG@10 evaluation
    cli             command-line workflow

The package root stays import-light so the CLI can cap BLAS threads before
numpy loads; import the submodules directly.
"""

__version__ = "0.1.0"
