"""
Integration Tests

End-to-end runs of the training pipeline on synthetic scenes.
"""
