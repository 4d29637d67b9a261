"""Autoencoder stochastic flow map learning."""
