"""Early Modern French language-model workbench.

Corpus compilation with licence tiers, graphemic normalization, byte-level
BPE, masked-language-model pretraining of a bidirectional encoder, POS
fine-tuning with mean subword pooling, century-stratified evaluation, and
carbon accounting. Everything runs at desk scale on one CPU.
"""

__version__ = "0.1.0"
