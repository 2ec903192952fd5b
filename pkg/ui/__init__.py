"""
User Interface Package

This package prints experiment plans and run summaries to the terminal.
"""
