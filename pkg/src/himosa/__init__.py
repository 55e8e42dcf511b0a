"""HIMOSA super-resolution."""
