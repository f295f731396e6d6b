"""Attestation stub for the gating stage."""
import sys
sys.stdin.readline()
