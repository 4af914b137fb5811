"""Self-supervised class-aware sounding object localization.

Stage 1 learns audio-visual localization on single-source scenes and
clusters the localized object features into a dictionary; stage 2 uses the
dictionary and the mixed-sound category distribution to localize the
sounding objects of each class in multi-source scenes.
"""

__version__ = "0.1.0"
