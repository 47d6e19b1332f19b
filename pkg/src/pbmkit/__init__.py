"""Policy-based network management toolkit.

Goal graphs refine into strategies, strategies compile into policy
rules, rules decide and shape traffic flows, and a versioned repository
feeds a TCP decision service.  See the module docstrings for the
individual pieces: model, dsl, refiner, pdp, pep_sim, netrepo, cli.
"""

from .dsl import Binding, Document, ParseError, parse, serialize
from .model import (
    ActionSet,
    Admission,
    Bandwidth,
    Catalogs,
    Condition,
    EntityGroup,
    FlowDescriptor,
    Goal,
    GoalGraph,
    PolicyRule,
    PriorityBand,
    Refinement,
    RefinementMode,
    Scope,
    ServiceClass,
    ServiceMatcher,
    TimeClass,
    TimeWindow,
    UnknownReferenceError,
    condition_matches,
    priority_band,
    timestamp_at,
    validate_graph,
)
from .netrepo import (
    Message,
    MessageKind,
    PdpServer,
    PepSession,
    ProtocolError,
    RepoError,
    RepoVersion,
    decode_message,
    encode_message,
    fnv1a64,
    repo_commit,
    repo_load,
    repo_log,
)
from .pdp import (
    Conflict,
    ConflictKind,
    Decision,
    DecisionFlag,
    DeviceProfile,
    DEFAULT_PROFILES,
    TranslationError,
    decide,
    detect_conflicts,
    translate_to_device,
)
from .pep_sim import (
    AllocationReport,
    FlowAllocation,
    Pipe,
    TraceError,
    allocate,
    read_trace,
    replay,
    write_report,
)
from .refiner import (
    RefineError,
    Strategy,
    StrategyExplosionError,
    compile_strategy,
    enumerate_strategies,
)

__version__ = "0.1.0"

__all__ = [
    "ActionSet",
    "Admission",
    "AllocationReport",
    "Bandwidth",
    "Binding",
    "Catalogs",
    "Condition",
    "Conflict",
    "ConflictKind",
    "Decision",
    "DecisionFlag",
    "DeviceProfile",
    "DEFAULT_PROFILES",
    "Document",
    "EntityGroup",
    "FlowAllocation",
    "FlowDescriptor",
    "Goal",
    "GoalGraph",
    "Message",
    "MessageKind",
    "ParseError",
    "PdpServer",
    "PepSession",
    "Pipe",
    "PolicyRule",
    "PriorityBand",
    "ProtocolError",
    "Refinement",
    "RefinementMode",
    "RefineError",
    "RepoError",
    "RepoVersion",
    "Scope",
    "ServiceClass",
    "ServiceMatcher",
    "Strategy",
    "StrategyExplosionError",
    "TimeClass",
    "TimeWindow",
    "TraceError",
    "TranslationError",
    "UnknownReferenceError",
    "allocate",
    "compile_strategy",
    "condition_matches",
    "decide",
    "decode_message",
    "detect_conflicts",
    "encode_message",
    "enumerate_strategies",
    "fnv1a64",
    "parse",
    "priority_band",
    "read_trace",
    "repo_commit",
    "repo_load",
    "repo_log",
    "replay",
    "serialize",
    "timestamp_at",
    "translate_to_device",
    "validate_graph",
    "write_report",
]
