"""Exception types raised across the marketplace simulator."""


class MarketError(Exception):
    """Base class for every error raised by this package."""


# crypto
class MessageTooLarge(MarketError):
    pass


class DecryptFailure(MarketError):
    pass


class DuplicateNonce(MarketError):
    pass


# ledger
class UnknownChain(MarketError):
    pass


class UnknownContract(MarketError):
    pass


class InsufficientBalance(MarketError):
    pass


# certificate authority
class ImplausibleSample(MarketError):
    pass


# blob store
class EmptyBlob(MarketError):
    pass


class NotFound(MarketError):
    pass


class StorageFailure(MarketError):
    pass


# broker
class CertInvalid(MarketError):
    pass


class CertExpired(MarketError):
    pass


class SensorTypeMismatch(MarketError):
    pass


class DuplicateOrder(MarketError):
    pass


class InvalidDD(MarketError):
    pass


class InvalidInput(MarketError):
    pass


class StateError(MarketError):
    pass


class WrongAmount(MarketError):
    pass


class ScoreOutOfRange(MarketError):
    pass


# agents
class CertExpiredLocally(MarketError):
    pass


class NonceMismatch(MarketError):
    pass


class PriceMismatch(MarketError):
    pass


class InsufficientFunds(MarketError):
    pass


# metrics
class TradeIncomplete(MarketError):
    pass


class ZeroPrice(MarketError):
    pass


# runner
class ConfigParse(MarketError):
    pass


class InvariantViolation(MarketError):
    def __init__(self, name: str, detail: str = ""):
        self.name = name
        super().__init__(f"{name}: {detail}" if detail else name)


class UnknownAttack(MarketError):
    pass
