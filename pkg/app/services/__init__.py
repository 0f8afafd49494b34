"""Controller, estimation, tuning and simulation services"""
