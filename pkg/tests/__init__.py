"""Tests for the system identification benchmark."""
