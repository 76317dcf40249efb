"""Representation-editing PEFT laboratory."""
