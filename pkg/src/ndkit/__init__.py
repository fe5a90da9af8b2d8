"""ndkit: negative-distillation toolkit for diverse dialogue generation.

Builds a negative teacher from the high-entropy (generic) half of a dialogue
corpus, distills a student to maximize its distance from the teacher's
predictions and intermediate features, and measures diversity/consistency of
the generated responses.
"""

__version__ = "0.1.0"
