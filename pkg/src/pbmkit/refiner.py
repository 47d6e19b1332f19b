"""Goal refinement: enumerate leaf strategies and compile them into rules.

A strategy for a goal is a set of leaf goals that achieves it.  A leaf
achieves itself; an AND goal needs one strategy per child (their union);
an OR goal is achieved by any one child's strategy.  Duplicate leaf sets
arising from shared subgoals collapse to one strategy.
"""
from __future__ import annotations

from dataclasses import dataclass

from .model import GoalGraph, PolicyRule, RefinementMode, natural_key, validate_graph
from .dsl import Document

DEFAULT_STRATEGY_CAP = 10_000


class RefineError(Exception):
    """Unknown root, invalid graph, or an unbindable leaf."""


class StrategyExplosionError(RefineError):
    """Enumeration aborted because the strategy count exceeded the cap."""


@dataclass(frozen=True)
class Strategy:
    id: str  # "S1", "S2", ... in enumeration order
    root: str
    leaves: tuple[str, ...]  # sorted by natural id order


def enumerate_strategies(
    graph: GoalGraph, root: str, cap: int = DEFAULT_STRATEGY_CAP
) -> list[Strategy]:
    """All distinct leaf strategies for root, deterministically ordered.

    Strategies are sorted lexicographically by their sorted leaf lists and
    numbered S1, S2, ...  Raises StrategyExplosionError when any
    intermediate family grows beyond cap.
    """
    violations = validate_graph(graph)
    if violations:
        raise RefineError(f"invalid goal graph: {violations[0]}")
    if root not in graph.goals:
        raise RefineError(f"unknown goal {root}")
    memo: dict[str, list[frozenset[str]]] = {}

    def solve(goal_id: str) -> list[frozenset[str]]:
        cached = memo.get(goal_id)
        if cached is not None:
            return cached
        ref = graph.refinements.get(goal_id)
        if ref is None:
            family: list[frozenset[str]] = [frozenset((goal_id,))]
        elif ref.mode is RefinementMode.OR:
            family = []
            seen: set[frozenset[str]] = set()
            for child in ref.children:
                for leaves in solve(child):
                    if leaves not in seen:
                        seen.add(leaves)
                        family.append(leaves)
            _check_cap(family, cap)
        else:  # AND: one strategy per child, unioned
            family = [frozenset()]
            for child in ref.children:
                grown: list[frozenset[str]] = []
                seen = set()
                for base in family:
                    for leaves in solve(child):
                        union = base | leaves
                        if union not in seen:
                            seen.add(union)
                            grown.append(union)
                family = grown
                _check_cap(family, cap)
        memo[goal_id] = family
        return family

    families = solve(root)
    ordered = sorted(
        (tuple(sorted(leaves, key=natural_key)) for leaves in families),
        key=lambda t: tuple(natural_key(leaf) for leaf in t),
    )
    return [Strategy(f"S{i}", root, leaves) for i, leaves in enumerate(ordered, 1)]


def _check_cap(family: list, cap: int) -> None:
    if len(family) > cap:
        raise StrategyExplosionError(
            f"strategy enumeration exceeded the cap of {cap}"
        )


def compile_strategy(doc: Document, strategy: Strategy) -> list[PolicyRule]:
    """One rule per strategy leaf, in leaf order, numbered P1, P2, ...

    Each leaf must carry a binding; the rule copies the binding's subject,
    target, condition and actions and records the leaf in based_on.
    """
    rules: list[PolicyRule] = []
    for position, leaf in enumerate(strategy.leaves):
        binding = doc.bindings.get(leaf)
        if binding is None:
            raise RefineError(f"goal {leaf} has no binding")
        rules.append(
            PolicyRule(
                id=f"P{position + 1}",
                subject=binding.subject,
                target=binding.target,
                condition=binding.condition,
                actions=binding.actions,
                order=position,
                based_on=leaf,
            )
        )
    return rules
