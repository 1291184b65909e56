"""Tests for cdpr-sim."""
