"""
Long-running jobs
"""
