"""Doubly-robust policy learning with tree-based CATE estimators and a simulation harness."""

__version__ = "0.1.0"
