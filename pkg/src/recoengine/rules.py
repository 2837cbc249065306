"""Rule lifecycle, composite and template rules, and the class registry.

Every rule follows the same lifecycle: ``init()`` validates the configuration
once at load time (a rule failing it is discarded), ``condition()`` is checked
each time the rule is scheduled, and ``fire()`` runs ``action()`` when the
condition holds. The default action pushes one notification and logs one
event.

Composite rules consult their children's ``condition()`` only; a child's
``action()`` is never run by its parent.
"""

from __future__ import annotations

import json
import operator
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, ClassVar, Iterable, Mapping, Sequence

from . import expr as exprlang
from .events import (
    DISCARDED, FIRED, NOTIFY_FAILED, EventRecord, EventSink, NullNotifier, Notification,
    Notifier, PublishResult,
)
from .measurements import MeasurementCache, MissingMeasurement
from .model import RuleRecord, is_absolute_uri
from .store import (
    BASE_RULE_SCHEMA, RESOURCE_SCHEMAS, ClassSchema, SchemaRegistry,
    check_schema, schema,
)


class RegistrationError(ValueError):
    pass


class RuleError(Exception):
    """A rule could not be evaluated this tick (it is skipped, not discarded)."""


class RuleRejected(Exception):
    """A rule record that cannot become a live rule."""

    def __init__(self, rid: str, class_name: str | None, reasons: Sequence[str],
                 fields: Sequence[str] = ()):
        super().__init__(f"rule {rid} ({class_name}) rejected: {'; '.join(reasons)}")
        self.rid, self.class_name = rid, class_name
        self.reasons = list(reasons)
        self.fields = list(fields)


@dataclass
class TickContext:
    """What a firing rule can see and use during one tick."""

    tick_id: int
    now: float
    cache: MeasurementCache
    notifier: Notifier = field(default_factory=NullNotifier)
    events: EventSink | None = None
    area_path: Callable[[str], Sequence[str]] = lambda rid: ()


@dataclass(frozen=True)
class ActionOutcome:
    delivered: int
    failures: tuple[str, ...] = ()
    record: EventRecord | None = None


@dataclass(frozen=True)
class FireResult:
    triggered: bool
    outcome: ActionOutcome | None = None
    error: str | None = None
    failed_uri: str | None = None

    @property
    def skipped(self) -> bool:
        return self.error is not None


class Rule:
    """Base class for all rules. Subclasses implement :meth:`condition`."""

    schema: ClassVar[ClassSchema] = BASE_RULE_SCHEMA
    # (min, max) number of children; max None means unbounded.
    arity: ClassVar[tuple[int, int | None]] = (0, 0)

    def __init__(self, rid: str, fields: Mapping[str, Any], children: Sequence[Rule] = ()):
        self.rid = rid
        self.class_name = type(self).__name__
        self.fields = dict(fields)
        self.children = list(children)
        self.name = self.fields.get("name") or ""
        self.description = self.fields.get("description") or ""
        self.suggestion = self.fields.get("suggestion") or ""
        self.uri = self.fields.get("uri") or f"urn:rule:{rid.lstrip('#')}"
        self.period = self.fields.get("period")
        self.valid = False
        self.problems: list[str] = []

    def __repr__(self) -> str:
        return f"<{self.class_name} {self.rid} {self.name!r}>"

    @property
    def parameter_uris(self) -> list[str]:
        """Measurement endpoints read by this rule itself (``*_uri`` fields)."""
        return [v for k, v in self.fields.items() if k.endswith("_uri") and isinstance(v, str)]

    def required_uris(self) -> set[str]:
        uris = set(self.parameter_uris)
        for c in self.children:
            uris |= c.required_uris()
        return uris

    def walk(self):
        yield self
        for c in self.children:
            yield from c.walk()

    def init(self) -> bool:
        problems = []
        if not isinstance(self.name, str) or not self.name:
            problems.append("name is empty")
        if not is_absolute_uri(self.uri):
            problems.append(f"uri {self.uri!r} is not an absolute URI")
        for u in self.parameter_uris:
            if not is_absolute_uri(u):
                problems.append(f"parameter URI {u!r} is not absolute")
        if self.period is not None and not (
                isinstance(self.period, (int, float)) and self.period > 0):
            problems.append("period must be > 0")
        lo, hi = self.arity
        n = len(self.children)
        if n < lo or (hi is not None and n > hi):
            want = f"exactly {lo}" if lo == hi else f"at least {lo}" if hi is None else f"{lo}..{hi}"
            problems.append(f"{self.class_name} needs {want} children, has {n}")
        for c in self.children:
            if not c.valid:
                problems.append(f"child {c.rid} is not valid")
        problems.extend(self.setup())
        self.problems = problems
        self.valid = not problems
        return self.valid

    def setup(self) -> list[str]:
        """Class-specific initialisation; returns a list of problems."""
        return []

    def condition(self, cache: MeasurementCache, now: float) -> bool:
        raise NotImplementedError

    def notification(self, ctx: TickContext) -> Notification:
        return Notification(self.name, self.suggestion, tuple(ctx.area_path(self.rid)), ctx.now,
                            ctx.cache.values(sorted(self.required_uris())))

    def action(self, ctx: TickContext) -> ActionOutcome:
        note = self.notification(ctx)
        record = EventRecord(FIRED, ctx.now, self.rid, self.class_name, self.name, self.suggestion,
                             note.area_path, note.values, ctx.tick_id)
        if ctx.events is not None:
            ctx.events.append(record)
        try:
            result = ctx.notifier.publish(note)
        except Exception as exc:
            result = PublishResult(0, (f"notifier unavailable: {exc}",))
        if ctx.events is not None:
            for failure in result.failures:
                ctx.events.append(EventRecord(
                    NOTIFY_FAILED, ctx.now, self.rid, self.class_name, self.name, self.suggestion,
                    note.area_path, note.values, ctx.tick_id, failure))
        return ActionOutcome(result.delivered, tuple(result.failures), record)

    def fire(self, ctx: TickContext) -> FireResult:
        try:
            triggered = self.condition(ctx.cache, ctx.now)
        except MissingMeasurement as exc:
            return FireResult(False, error=str(exc), failed_uri=exc.uri)
        except (RuleError, exprlang.ExprError) as exc:
            return FireResult(False, error=str(exc))
        if not isinstance(triggered, bool):
            return FireResult(False, error=f"condition returned {type(triggered).__name__}, not bool")
        if not triggered:
            return FireResult(False)
        return FireResult(True, self.action(ctx))

    def describe(self) -> tuple:
        """Structural fingerprint, for comparing rule trees."""
        return (self.class_name, self.rid, json.dumps(self.fields, sort_keys=True),
                tuple(c.describe() for c in self.children))


# -- composites --------------------------------------------------------------

COMPOSITE_SCHEMA = schema("CompositeRule")


class AnyCompositeRule(Rule):
    """True when at least one child condition holds.

    Every child is evaluated each time (no short-circuit) so stateful children
    such as RepeatingRule observe every tick.
    """

    schema = schema("AnyCompositeRule", "CompositeRule")
    arity = (1, None)

    def condition(self, cache, now):
        results = [c.condition(cache, now) for c in self.children]
        return any(results)


class AllCompositeRule(Rule):
    """True when every child condition holds (children all evaluated)."""

    schema = schema("AllCompositeRule", "CompositeRule")
    arity = (1, None)

    def condition(self, cache, now):
        results = [c.condition(cache, now) for c in self.children]
        return all(results)


class RepeatingRule(Rule):
    """True when the child held on MORE than ``min_occurrences`` evaluations
    within the last ``window_duration`` seconds (inclusive window).

    Each evaluation contributes at most one occurrence. Evaluation times must
    be non-decreasing.
    """

    schema = schema("RepeatingRule", "CompositeRule",
                    window_duration="duration*", min_occurrences="integer*")
    arity = (1, 1)

    def setup(self):
        self.window = self.fields.get("window_duration")
        self.min_occurrences = self.fields.get("min_occurrences")
        self.hits: deque[float] = deque()
        problems = []
        if not isinstance(self.window, (int, float)) or isinstance(self.window, bool) or not self.window > 0:
            problems.append("window_duration must be > 0")
        if not isinstance(self.min_occurrences, int) or isinstance(self.min_occurrences, bool) \
                or self.min_occurrences < 1:
            problems.append("min_occurrences must be an integer >= 1")
        return problems

    def condition(self, cache, now):
        if self.children[0].condition(cache, now):
            self.hits.append(now)
        cutoff = now - self.window
        while self.hits and self.hits[0] < cutoff:
            self.hits.popleft()
        return len(self.hits) > self.min_occurrences


# -- templates ---------------------------------------------------------------

TEMPLATE_SCHEMA = schema("TemplateRule")

COMPARATORS: dict[str, Callable[[float, float], bool]] = {
    "<": operator.lt, "<=": operator.le, ">": operator.gt,
    ">=": operator.ge, "==": operator.eq, "!=": operator.ne,
}
NEGATED = {"<": ">=", "<=": ">", ">": "<=", ">=": "<", "==": "!=", "!=": "=="}


class ComparisonRule(Rule):
    """``measurement <operator> threshold`` with exact float semantics."""

    schema = schema("ComparisonRule", "TemplateRule",
                    parameter_uri="uri*", operator="string*", threshold="number*")

    def setup(self):
        op = self.fields.get("operator")
        if op not in COMPARATORS:
            return [f"operator {op!r} is not one of {' '.join(COMPARATORS)}"]
        self.compare = COMPARATORS[op]
        return []

    def condition(self, cache, now):
        return self.compare(cache.value(self.fields["parameter_uri"]), self.fields["threshold"])


class ExpressionRule(Rule):
    """Boolean expression over measurements bound by name (``bindings``: name -> URI)."""

    schema = schema("ExpressionRule", "TemplateRule", expression="string*", bindings="map*")

    @property
    def parameter_uris(self):
        b = self.fields.get("bindings")
        return [u for u in b.values() if isinstance(u, str)] if isinstance(b, dict) else []

    def setup(self):
        bindings = self.fields.get("bindings") or {}
        try:
            self.ast = exprlang.parse(self.fields.get("expression", ""))
        except exprlang.ParseError as exc:
            return [f"expression: {exc}"]
        problems = []
        unbound = exprlang.free_identifiers(self.ast) - set(bindings)
        if unbound:
            problems.append(f"unbound identifiers: {', '.join(sorted(unbound))}")
        for k, v in bindings.items():
            if not isinstance(v, str):
                problems.append(f"binding {k!r} must be a URI string")
        return problems

    def condition(self, cache, now):
        env = {name: cache.value(uri) for name, uri in self.fields["bindings"].items()}
        result = exprlang.evaluate(self.ast, env)
        if not isinstance(result, bool):
            raise RuleError(f"expression produced {result!r}, not a boolean")
        return result


# -- registry ----------------------------------------------------------------

RuleFactory = Callable[[str, Mapping[str, Any], Sequence[Rule]], Rule]


@dataclass(frozen=True)
class Registration:
    class_name: str
    factory: RuleFactory
    schema: ClassSchema


class RuleRegistry:
    """Maps ``@class`` names to rule constructors and their schemas."""

    def __init__(self):
        self._entries: dict[str, Registration] = {}
        self.schemas = SchemaRegistry(RESOURCE_SCHEMAS + (BASE_RULE_SCHEMA,))

    def __contains__(self, name: object) -> bool:
        return name in self._entries

    def __iter__(self):
        return iter(self._entries.values())

    def declare(self, s: ClassSchema) -> None:
        """Declare a schema-only class (abstract parent, no constructor)."""
        if s.name in self.schemas:
            raise RegistrationError(f"class {s.name!r} already declared")
        self.schemas.add(s)

    def register(self, class_name: str, factory: RuleFactory,
                 schema: ClassSchema | None = None) -> Registration:
        if class_name in self._entries or class_name in self.schemas:
            raise RegistrationError(f"rule class {class_name!r} already registered")
        s = schema if schema is not None else getattr(factory, "schema", None)
        if s is None:
            raise RegistrationError(f"no schema given for {class_name!r}")
        if s.name != class_name:
            s = ClassSchema(class_name, s.parent, s.fields)
        self.schemas.add(s)
        try:
            self.schemas.effective_fields(class_name)
        except Exception as exc:
            self.schemas._schemas.pop(class_name)
            raise RegistrationError(str(exc)) from exc
        reg = Registration(class_name, factory, s)
        self._entries[class_name] = reg
        return reg

    def instantiate(self, record: RuleRecord, children: Sequence[Rule] = ()) -> Rule:
        reg = self._entries.get(record.class_name)
        if reg is None:
            raise RuleRejected(record.rid, record.class_name, [f"unknown class {record.class_name!r}"])
        doc = {"@rid": record.rid, "@class": record.class_name, **record.fields}
        violations = check_schema(doc, self.schemas)
        if violations:
            raise RuleRejected(record.rid, record.class_name, [str(v) for v in violations],
                               [v.field for v in violations if v.field])
        rule = reg.factory(record.rid, record.fields, children)
        rule.class_name = record.class_name
        if not rule.init():
            raise RuleRejected(record.rid, record.class_name, rule.problems)
        return rule


def register_rule_class(registry: RuleRegistry, class_name: str, factory: RuleFactory,
                        schema: ClassSchema | None = None) -> Registration:
    return registry.register(class_name, factory, schema)


def instantiate_rule(record: RuleRecord, registry: RuleRegistry,
                     children: Sequence[Rule] = ()) -> Rule:
    return registry.instantiate(record, children)


def default_registry() -> RuleRegistry:
    """Registry with composites, templates and the built-in custom rules."""
    from . import builtin

    reg = RuleRegistry()
    reg.declare(COMPOSITE_SCHEMA)
    reg.declare(TEMPLATE_SCHEMA)
    for cls in (AnyCompositeRule, AllCompositeRule, RepeatingRule, ComparisonRule, ExpressionRule,
                *builtin.BUILTIN_RULES):
        reg.register(cls.schema.name, cls)
    return reg


def discard_record(rejection: RuleRejected, now: float, area_path: Iterable[str] = (),
                   name: str | None = None) -> EventRecord:
    detail: dict[str, Any] = {"reasons": rejection.reasons}
    if rejection.fields:
        detail["fields"] = rejection.fields
    return EventRecord(DISCARDED, now, rejection.rid, rejection.class_name, name, None,
                       tuple(area_path), {}, None, detail)

