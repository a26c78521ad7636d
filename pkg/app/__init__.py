"""Backward deep BSDE solver for European and Bermudan options."""
