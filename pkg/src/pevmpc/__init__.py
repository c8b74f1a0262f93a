"""Joint PEV charging and AC optimal power flow: semidefinite relaxation,
rank-one penalty repair, receding-horizon control and offline bounds."""

__version__ = "0.1.0"
