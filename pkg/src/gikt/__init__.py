"""GIKT: graph-based interaction knowledge tracing.

A library and CLI for predicting student answer correctness from exercise
logs. Question and skill embeddings are mixed over the question-skill
bipartite graph with sampled graph convolutions, student state evolves
through a stacked LSTM, a recap stage selects relevant history, and a
pairwise attention module turns (state, history) x (question, skills)
interactions into a probability. Everything trains on a built-in
reverse-mode autodiff engine; numpy is the only runtime dependency.
"""

__version__ = "0.1.0"
