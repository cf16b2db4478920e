"""
Adversarial training, checkpoints, evaluation and ablation runs
"""
