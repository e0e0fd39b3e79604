"""Exception hierarchy shared across the package.

Every error the engine raises deliberately derives from FwesimError so the
CLI can map failure classes onto stable exit codes.
"""


class FwesimError(Exception):
    """Base class for all errors raised by fwesim."""


class ConfigError(FwesimError):
    """Invalid configuration document or command-line arguments."""


# --- volume I/O ---------------------------------------------------------

class MalformedHeader(FwesimError):
    """File is not a NIfTI-1 file (bad magic or header length)."""


class UnsupportedDatatype(FwesimError):
    """NIfTI datatype code outside the supported set."""


class TruncatedData(FwesimError):
    """Data payload shorter than the header dimensions imply."""


class RequiresScaling(FwesimError):
    """Writing non-integral data to an integer datatype would quantize."""


# --- synthesis ----------------------------------------------------------

class KernelTooWide(FwesimError):
    """Smoothing kernel support exceeds the grid extent."""


class DurationZero(FwesimError):
    """Paradigm with a non-positive activity or rest duration."""


class RankDeficientDesign(FwesimError):
    """First-level design matrix is rank deficient."""


# --- group models -------------------------------------------------------

class GroupTooLarge(FwesimError):
    """Requested group sizes exceed the subject pool."""


class MissingVariances(FwesimError):
    """Mixed-effects estimator called without per-subject variances."""


# --- spatial diagnostics ------------------------------------------------

class EmptyOverlap(FwesimError):
    """Mask too thin to form any voxel pair at the requested lag."""


class DegenerateResiduals(FwesimError):
    """Residual stack with zero difference variance along an axis."""


class DimMismatch(FwesimError):
    """Volumes or masks with incompatible grid dimensions."""


# --- inference ----------------------------------------------------------

class CdtTooLow(FwesimError):
    """Cluster defining threshold below the validity floor of the closed form."""


class InsufficientIterations(FwesimError):
    """Monte Carlo null too small for the requested tail quantile."""


class CdtMissing(FwesimError):
    """Cluster-level query on a resampling null built without a CDT."""


class TooFewSubjects(FwesimError):
    """Resampling scheme needs more subjects than provided."""


class MismatchedInputs(FwesimError):
    """Backend comparison over analyses that did not share inputs."""


class CampaignCellFailure(FwesimError):
    """One or more campaign cells failed (raised only under --strict)."""
