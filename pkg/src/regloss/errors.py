"""Exception and warning types shared by every regloss module."""


class ReglossError(Exception):
    """Base class for all library errors."""


class DomainError(ReglossError):
    """A point or cube lies outside the domain of a field."""


class TimeRangeError(ReglossError):
    """A requested time is negative or beyond a schedule's horizon."""


class NoClosedForm(ReglossError):
    """An exact flow map was requested for a field that has none."""


class ZeroGradient(ReglossError):
    """The datum has (numerically) vanishing gradient on the region of interest."""


class PointOffTrack(ReglossError):
    """A point is outside the closed octagonal track."""


class UnsupportedField(ReglossError):
    """A field lacks the stream-function data needed for an extension."""


class AmplitudeSearchFailed(ReglossError):
    """No certified shear amplitude was found within the search budget."""


class NoGrowthData(ReglossError):
    """The datum is constant on the probe region, so no density point exists."""


class SlotRejected(ReglossError):
    """A cube slot failed its mass lower bound after all allowed halvings."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SuperCritical(ReglossError):
    """The regularity exponent gamma is not positive."""


class AliasWarning(UserWarning):
    """A sampled field carries noticeable energy in its top frequency octave."""


class FiniteDifferenceWarning(UserWarning):
    """A derivative of order above two was approximated by nested differences."""
