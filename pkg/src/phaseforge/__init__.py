"""Phonetic-aware speech enhancement: training and evaluation toolkit."""
