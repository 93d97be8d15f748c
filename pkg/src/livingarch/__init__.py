"""Simulation and learning toolkit for an interactive sensor/actuator sculpture.

Modules
-------
sculpture   node topology, actuator envelopes and IR sensing
behaviour   the pre-scripted behaviour engine and its parameter vector
nn          dense networks with layer norm, Adam and checkpoints
agent       DDPG learner with adaptive parameter-space noise
visitors    simplified brightest-LED task, its oracle, visitor scenarios
metrics     IR calibration, engagement, active counts, Mann-Whitney U
analysis    K-Means over learner actions and quantile tables
harness     run configuration, scheduling, reports and benchmarks
"""
__version__ = "0.1.0"
