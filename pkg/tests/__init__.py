"""Test suite for the backward deep BSDE solver."""
