"""
xview library packages
"""
