"""Utility helpers for the app."""
