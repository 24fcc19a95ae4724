"""
Utils package for the dynamic-scene Gaussian SLAM pipeline
"""
