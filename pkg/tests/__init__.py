"""
Test package for firecast.
"""
