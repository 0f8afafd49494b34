"""Online direct data-driven inverse controller design and simulation"""
