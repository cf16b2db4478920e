"""
Adversarial side: patch discriminators, perceptual extractors and losses
"""
