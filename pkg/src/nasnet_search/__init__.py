"""Cell-based neural architecture search: genome encoding, cell compiler, autodiff
tensor engine, child trainer, RNN controller (PPO / REINFORCE), search orchestrator."""

__version__ = "0.1.0"
