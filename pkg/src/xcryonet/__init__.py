"""Grid-square screening toolkit for cryo-EM atlas images.

Modules
-------
mrc_io      MRC/CCP4-2014 volume reader and writer
montage     tile-to-montage assembly from stage coordinates
extract     template matching and square cropping
autolabel   automatic brightness/squareness scoring, label CSV I/O
diffcore    dense tensors, reverse-mode autodiff, Adam, checkpoints
model       the multi-branch attention-guided scoring network
train       alternating training schedule and evaluation
synthgrid   synthetic labeled square generator
cli         command line entry points
"""

__version__ = "0.1.0"
