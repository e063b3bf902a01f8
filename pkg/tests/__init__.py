"""Test utilities package."""


