"""
Logging configuration and utilities
"""
