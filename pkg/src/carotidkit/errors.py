"""Typed errors shared across the toolkit.

Every contract violation raises a named subclass of :class:`CarotidKitError`
so callers (CLI, HTTP service, tests) can map failures without string
matching.
"""


class CarotidKitError(Exception):
    """Base class for all toolkit errors."""


# --- volume / sampling ---

class NonOrthonormalAxes(CarotidKitError):
    pass


# --- centerline geometry ---

class DegeneratePolyline(CarotidKitError):
    pass


class ParallelInitialNormal(CarotidKitError):
    pass


class SeedOutsideMask(CarotidKitError):
    pass


class Disconnected(CarotidKitError):
    pass


# --- contours ---

class TooFewSeeds(CarotidKitError):
    pass


class IndexOutOfRange(CarotidKitError):
    pass


class MinimumSeeds(CarotidKitError):
    pass


class GridTooSmall(CarotidKitError):
    pass


class EmptyMask(CarotidKitError):
    pass


class ComponentTooSmall(CarotidKitError):
    pass


# --- biomarkers ---

class NonpositiveReference(CarotidKitError):
    pass


class NoOverlap(CarotidKitError):
    pass


class FlatWaveform(CarotidKitError):
    pass


# --- pathlines ---

class EmptyLumen(CarotidKitError):
    pass


class InvalidStep(CarotidKitError):
    pass


# --- surfaces ---

class EmptyIsoSurface(CarotidKitError):
    pass


class NoUsableProfiles(CarotidKitError):
    pass


# --- phantoms ---

class SpecInvalid(CarotidKitError):
    pass


# --- storage ---

class UnsupportedFormat(CarotidKitError):
    pass


class CorruptHeader(CarotidKitError):
    pass


class ShapeMismatch(CarotidKitError):
    pass


class SchemaVersionUnsupported(CarotidKitError):
    pass


class SessionValidationError(CarotidKitError):
    pass


class IoFailure(CarotidKitError):
    pass
