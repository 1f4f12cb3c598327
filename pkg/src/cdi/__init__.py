"""Intent discovery toolkit.

Clusters unlabeled utterance embeddings into intents through a three-stage
training pipeline (contrastive pretraining, supervised fine-tuning with a
forgetting-prevention term, iterative pseudo-label deep clustering) and an
incremental human-in-the-loop discovery session.
"""

__version__ = "0.1.0"
