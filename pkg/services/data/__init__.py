"""
Synthetic paired-scene data and PPM image I/O
"""
