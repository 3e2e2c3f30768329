"""Density models: coupling flows, a Gaussian baseline, and marginals."""

from faultflow.density.bundle import ModelBundle, fit_all, fit_bundle, load_store, save_store
from faultflow.density.fit import fit, split_indices, validation_split
from faultflow.density.flow import AffineWhitening, CouplingFlow
from faultflow.density.model import DensityModel, FitConfig, ModelKind, identity_model
from faultflow.density.preprocess import Standardizer
from faultflow.density.univariate import UnivariateModel, fit_univariate, fit_values, silverman_bandwidth

__all__ = [
    "AffineWhitening",
    "CouplingFlow",
    "DensityModel",
    "FitConfig",
    "ModelBundle",
    "ModelKind",
    "Standardizer",
    "UnivariateModel",
    "fit",
    "fit_all",
    "fit_bundle",
    "fit_univariate",
    "fit_values",
    "identity_model",
    "load_store",
    "save_store",
    "silverman_bandwidth",
    "split_indices",
    "validation_split",
]
