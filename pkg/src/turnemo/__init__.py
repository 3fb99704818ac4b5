"""Turn-attentive emotion classification for three-turn conversations."""

LABELS = ("happy", "sad", "angry", "others")
EMOTIONS = ("happy", "sad", "angry")
LEXICON_EMOTIONS = ("joy", "sadness", "anger")

__version__ = "0.1.0"
