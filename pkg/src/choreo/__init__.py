"""Chart choreography toolkit: turn audio into playable 4-panel step charts.

The pipeline has two learned stages: *placement* predicts at which 10 ms
frames steps occur, *selection* predicts which of the 256 arrow combinations
goes at each placed time. Supporting modules handle simfile I/O, audio
features, evaluation metrics, and a small deterministic neural kernel.
"""

__version__ = "0.1.0"
