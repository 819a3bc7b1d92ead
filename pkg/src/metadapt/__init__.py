"""Meta-transfer learning for cross-subject EEG classification.

Pipeline: synthesize multi-subject data -> pretrain a representation
network on pooled source subjects -> episodic meta-training with a
base/meta dual-learner update -> few-shot adaptation to a held-out
subject, with accuracy / ROC-AUC / retention reporting.
"""

__version__ = "0.1.0"
