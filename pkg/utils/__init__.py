"""
Utilities Package

This package contains experiment config parsing and the run-directory,
file-format and manifest helpers.
"""
