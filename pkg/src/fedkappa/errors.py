"""Exception taxonomy shared across the package.

Every error the public API raises derives from FedKappaError so callers can
catch one base type. Names follow the operation contracts.
"""


class FedKappaError(Exception):
    """Base class for all fedkappa errors."""


class InvalidShape(FedKappaError):
    """Array shape or length does not match what the operation requires."""


class SpecMismatch(FedKappaError):
    """Parameter vector does not belong to the model spec it is used with."""


class InvalidLabel(FedKappaError):
    """Class index outside the configured label space."""


class InvalidConfig(FedKappaError):
    """Configuration value or combination that cannot be run."""


class ProtocolError(FedKappaError):
    """Base class for wire-protocol failures."""


class BadMagic(ProtocolError):
    """Frame or file does not start with the expected magic bytes."""


class VersionMismatch(ProtocolError):
    """Frame, file, or message version is not supported."""


class Truncated(ProtocolError):
    """Frame or file ends before its declared payload length."""


class NoUpdates(FedKappaError):
    """Aggregation requested with an empty update list."""


class StaleUpdate(ProtocolError):
    """Delta submitted for a round the server is no longer in."""


class DuplicateClient(ProtocolError):
    """Client attempted a second submission (or join) in the same round."""


class UnknownClient(ProtocolError):
    """Message from a client id that is not on the roster."""


class FederationAborted(FedKappaError):
    """Federation stopped before completing all rounds.

    Carries the round index at which the run aborted.
    """

    def __init__(self, round_index: int, reason: str = ""):
        self.round_index = round_index
        self.reason = reason
        msg = f"federation aborted at round {round_index}"
        if reason:
            msg += f": {reason}"
        super().__init__(msg)


class EmptySplit(FedKappaError):
    """A dataset split that must contain samples is empty."""


class NoCandidates(FedKappaError):
    """Model selection requested over an empty history."""


class InvalidProfile(FedKappaError):
    """Site profile whose fields cannot produce a dataset."""


class TooFewPatients(FedKappaError):
    """Fewer patients available than splits requested."""


class DegenerateMarginals(FedKappaError):
    """Kappa denominator is zero: both raters constant and identical."""


class IoError(FedKappaError):
    """Missing or unwritable artifact; message names the offending path."""
