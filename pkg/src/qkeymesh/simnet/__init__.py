"""Discrete-event simulation harness"""
