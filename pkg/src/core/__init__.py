"""
Core occupancy pipeline modules
"""
