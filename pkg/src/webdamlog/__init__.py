"""WebdamLog: distributed datalog with delegation between autonomous peers."""

from .parser import ParseError, parse_fact, parse_program, parse_rule, render
from .peer import Peer, StageError, StageReport
from .syntax import Atom, Constant, Fact, Literal, Rule, RuleClass, Schema, Variable, classify_rule, validate_rule
from .transport.sim import SimNetConfig, SimNetwork

__version__ = "0.1.0"

__all__ = [
    "Atom",
    "Constant",
    "Fact",
    "Literal",
    "ParseError",
    "Peer",
    "Rule",
    "RuleClass",
    "Schema",
    "SimNetConfig",
    "SimNetwork",
    "StageError",
    "StageReport",
    "Variable",
    "classify_rule",
    "parse_fact",
    "parse_program",
    "parse_rule",
    "render",
    "validate_rule",
]
