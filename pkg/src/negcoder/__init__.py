"""Code conversation transcripts against a coding scheme with an LLM.

The pipeline: parse a transcript into units, cut it into segments, build an
in-context-learning prompt per segment, run the model several times, align
each run's output back onto the units and majority-vote the codes.
"""

__version__ = "0.1.0"
