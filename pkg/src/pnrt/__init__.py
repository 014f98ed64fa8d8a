"""Partial-null randomization tests for network interference."""

from .design import (
    Bernoulli,
    CompleteRandomization,
    EnumeratedPool,
    StratifiedComplete,
    enumerate_support,
    sample,
)
from .engines import (
    ConditioningEvent,
    TestResult,
    TieRule,
    crt,
    exhaustive_pval,
    frt,
    naive_rt,
    pnrt_min,
    pnrt_pair,
)
from .errors import ContractError, FormatError, InputError, PNRTError, SupportTooLarge
from .network import (
    CoordinateProximity,
    DenseProximity,
    DistanceThresholds,
    MembershipTable,
    exposure_profile,
    imputable_set,
    interval_members,
    load_network,
)
from .stats import OutcomeData, StatisticSpec, evaluate

__version__ = "0.1.0"
