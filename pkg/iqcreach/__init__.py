"""
iqcreach - robust backward reachability with integral quadratic constraints
"""

__version__ = "0.1.0"
