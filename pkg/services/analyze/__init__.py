"""
Static parameter/MAC analysis and the gradient-check suite
"""
