"""Shared bits for the demo scripts: an output folder and a print helper."""
import os

import numpy as np

OUT = os.path.join(os.path.dirname(os.path.abspath(__file__)), "out")
os.makedirs(OUT, exist_ok=True)


def show_grid(title, sal):
    print(title)
    with np.printoptions(precision=2, suppress=True, sign=" "):
        print(sal.as_grid())
