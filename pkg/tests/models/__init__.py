"""Tests for the joint transformer and checkpoint archive"""
