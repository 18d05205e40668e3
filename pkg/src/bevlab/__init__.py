"""Desk-scale laboratory for cross-view supervision of BEV map construction.

A frozen overhead-view teacher encoder supervises an ego-view camera
student through dense feature alignment in a shared bird's-eye-view grid.
The package generates synthetic scenes, trains the paired encoders end to
end on a hand-rolled autodiff engine, and evaluates map quality and
representation similarity under several supervision variants.
"""

__version__ = "0.1.0"
