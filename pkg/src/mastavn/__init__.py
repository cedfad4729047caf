"""Multi-agent audio-visual navigation on grid worlds with a joint
encoder/decoder transformer policy, trained by actor-critic on a small
reverse-mode autodiff engine."""

__version__ = "0.1.0"
