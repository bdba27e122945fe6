"""Tests for the optocool package."""
