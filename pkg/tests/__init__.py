"""Tests for rxsplat"""
