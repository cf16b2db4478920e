"""
Network modules: layers, encoder/decoder blocks, attention and the generator
"""
