"""LQR initialization, value iteration, certificates and receding-horizon control."""
