"""
Storybots: robots that tell each other what-if stories.

A storyteller narrativises one of its Consequence Engine what-ifs into a
short sentence, says it over a noisy channel, and the listener decodes it
and re-runs it through its own internal model in its own context.
"""

import logging
import math
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field, replace
from typing import Callable, Deque, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from arena import Arena
from config import CEConfig, ChannelConfig, StoryConfig
from consequence_engine import (
    CEBudget,
    CandidateAction,
    ConsequenceEngine,
    ConsequenceRecord,
    EvaluationWeights,
    danger,
    evaluate,
    simulate_actions,
    snapshot,
)
from geometry import wrap_angle
from meme_memory import MemoryPolicy
from telemetry import EventLog

logger = logging.getLogger(__name__)

IF, I, THEN = "IF", "I", "THEN"
STRUCTURE = (IF, I, THEN)
ACTION_VERBS = ("TURN_LEFT", "TURN_RIGHT", "FORWARD", "STOP")
OUTCOME_VERBS = ("COLLIDE", "REACH", "SAFE")
ANGLE_BUCKETS = (30, 60, 90, 120, 150, 180)
DISTANCE_BUCKETS = tuple(range(10, 101, 10))
PLACE_TAGS = ("GOAL", "HERE")

# Relative headings narrower than this are told as FORWARD
FORWARD_THRESHOLD = math.radians(15.0)


class MalformedStory(ValueError):
    """Raised when a token sequence does not parse under the story grammar."""


def robot_tag(robot_id: int) -> str:
    return f"ROBOT_{robot_id}"


def _angle_bucket(radians_: float) -> int:
    degrees = math.degrees(abs(radians_))
    return ANGLE_BUCKETS[int(np.argmin([abs(b - degrees) for b in ANGLE_BUCKETS]))]


def _distance_bucket(metres: float) -> int:
    centimetres = metres * 100.0
    return DISTANCE_BUCKETS[int(np.argmin([abs(b - centimetres) for b in DISTANCE_BUCKETS]))]


@dataclass(frozen=True)
class ParsedStory:
    verb: str
    amount: Optional[int]
    outcome: str
    tag: Optional[str]

    @property
    def outcome_label(self) -> str:
        return self.outcome if self.tag is None else f"{self.outcome} {self.tag}"


def parse_tokens(tokens: Sequence[str]) -> ParsedStory:
    """Parse a sentence; raises MalformedStory if it breaks the grammar."""
    tokens = list(tokens)
    if tokens[:2] != [IF, I]:
        raise MalformedStory(f"Story must start with 'IF I': {tokens}")
    pos = 2
    if pos >= len(tokens) or tokens[pos] not in ACTION_VERBS:
        raise MalformedStory(f"Expected an action at position {pos}: {tokens}")
    verb = tokens[pos]
    pos += 1
    amount = None
    if verb != "STOP":
        buckets = DISTANCE_BUCKETS if verb == "FORWARD" else ANGLE_BUCKETS
        if pos >= len(tokens) or not tokens[pos].isdigit() or int(tokens[pos]) not in buckets:
            raise MalformedStory(f"Bad quantity for {verb}: {tokens}")
        amount = int(tokens[pos])
        pos += 1
    if pos >= len(tokens) or tokens[pos] != THEN:
        raise MalformedStory(f"Expected THEN at position {pos}: {tokens}")
    pos += 1
    if pos >= len(tokens) or tokens[pos] not in OUTCOME_VERBS:
        raise MalformedStory(f"Expected an outcome at position {pos}: {tokens}")
    outcome = tokens[pos]
    pos += 1
    tag = None
    if outcome == "COLLIDE":
        if pos >= len(tokens) or not (tokens[pos] == "WALL" or _is_robot_tag(tokens[pos])):
            raise MalformedStory(f"COLLIDE needs WALL or ROBOT_<id>: {tokens}")
        tag = tokens[pos]
        pos += 1
    elif outcome == "REACH":
        if pos >= len(tokens) or tokens[pos] not in PLACE_TAGS:
            raise MalformedStory(f"REACH needs GOAL or HERE: {tokens}")
        tag = tokens[pos]
        pos += 1
    if pos != len(tokens):
        raise MalformedStory(f"Trailing tokens: {tokens[pos:]}")
    return ParsedStory(verb, amount, outcome, tag)


def _is_robot_tag(token: str) -> bool:
    return token.startswith("ROBOT_") and token[6:].isdigit()


def action_tokens(record: ConsequenceRecord) -> List[str]:
    """The ACTION part of a sentence, bucketed."""
    action = record.action
    if action.kind == "stop":
        return ["STOP"]
    if action.max_distance is not None:
        return ["FORWARD", str(_distance_bucket(action.max_distance))]
    relative = wrap_angle(action.target - record.start_heading)
    if abs(relative) < FORWARD_THRESHOLD:
        return ["FORWARD", str(_distance_bucket(record.travelled))]
    verb = "TURN_LEFT" if relative > 0 else "TURN_RIGHT"
    return [verb, str(_angle_bucket(relative))]


def outcome_tokens(record: ConsequenceRecord) -> List[str]:
    outcome = record.outcome
    if outcome.is_collision:
        return ["COLLIDE", "WALL" if outcome.with_ == "wall" else robot_tag(outcome.with_)]
    if record.goal_reached:
        return ["REACH", "GOAL"]
    # Stopping at a FORWARD cap is not REACH HERE
    if record.halted and record.action.max_distance is None:
        return ["REACH", "HERE"]
    return ["SAFE"]


def encode(record: ConsequenceRecord) -> List[str]:
    return [IF, I, *action_tokens(record), THEN, *outcome_tokens(record)]


def decode_action(parsed: ParsedStory, current_heading: float, index: int = 0) -> CandidateAction:
    """The executable what-if of a parsed story, in the hearer's own frame."""
    if parsed.verb == "STOP":
        return CandidateAction("stop", index)
    if parsed.verb == "FORWARD":
        return CandidateAction("hold_heading", index, current_heading, max_distance=parsed.amount / 100.0)
    sign = 1.0 if parsed.verb == "TURN_LEFT" else -1.0
    return CandidateAction("hold_heading", index, wrap_angle(current_heading + sign * math.radians(parsed.amount)))


@dataclass
class Story:
    tokens: Tuple[str, ...]
    teller_id: int
    origin: str
    root_author: int
    story_id: Optional[int] = None
    parent_story_id: Optional[int] = None
    source_teller: Optional[int] = None
    holder_id: Optional[int] = None
    created_at: float = 0.0
    imagined_outcome: Optional[str] = None
    divergence: Optional[bool] = None

    @property
    def told_outcome(self) -> str:
        try:
            return parse_tokens(self.tokens).outcome_label
        except MalformedStory:
            return "MALFORMED"

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_record(self) -> dict:
        return {
            "story_id": self.story_id,
            "parent_story_id": self.parent_story_id,
            "teller_id": self.teller_id,
            "holder_id": self.holder_id,
            "origin": self.origin if self.source_teller is None else f"retold({self.source_teller})",
            "root_author": self.root_author,
            "tokens": list(self.tokens),
            "told_outcome": self.told_outcome,
            "imagined_outcome": self.imagined_outcome,
            "divergence": self.divergence,
            "t": self.created_at,
        }

    @classmethod
    def from_record(cls, record: dict) -> "Story":
        origin = record["origin"]
        source_teller = None
        if origin.startswith("retold("):
            source_teller = int(origin[len("retold("):-1])
            origin = "retold"
        return cls(
            tokens=tuple(record["tokens"]),
            teller_id=record["teller_id"],
            origin=origin,
            root_author=record["root_author"],
            story_id=record["story_id"],
            parent_story_id=record.get("parent_story_id"),
            source_teller=source_teller,
            holder_id=record.get("holder_id"),
            created_at=record.get("t", 0.0),
            imagined_outcome=record.get("imagined_outcome"),
            divergence=record.get("divergence"),
        )


def narrativise(record: ConsequenceRecord, teller_id: int, t: float = 0.0) -> Story:
    """Turn one what-if into an own_whatif story (not yet registered)."""
    return Story(
        tokens=tuple(encode(record)),
        teller_id=teller_id,
        origin="own_whatif",
        root_author=teller_id,
        holder_id=teller_id,
        created_at=t,
    )


class StoryRegistry:
    """Hands out story ids and keeps every registered story for lineage."""

    def __init__(self):
        self._stories: Dict[int, Story] = {}
        self._next_id = 1

    def register(self, story: Story) -> Story:
        if story.parent_story_id is not None and story.parent_story_id not in self._stories:
            raise MalformedStory(f"Parent story {story.parent_story_id} is unknown")
        story = replace(story, story_id=self._next_id)
        self._stories[story.story_id] = story
        self._next_id += 1
        return story

    def get(self, story_id: int) -> Story:
        return self._stories[story_id]

    def __len__(self) -> int:
        return len(self._stories)

    def __iter__(self) -> Iterator[Story]:
        return iter(self._stories.values())


@dataclass(frozen=True)
class ChannelModel:
    p0: float = 0.02
    k_d: float = 0.1
    k_phi: float = 0.1
    robot_ids: Tuple[int, ...] = (0, 1)

    @classmethod
    def from_config(cls, config: ChannelConfig, robot_ids: Sequence[int]) -> "ChannelModel":
        return cls(config.p0, config.k_d, config.k_phi, tuple(sorted(robot_ids)))

    def p_err(self, distance: float, phi: float) -> float:
        return float(np.clip(self.p0 + self.k_d * distance + self.k_phi * (1.0 - math.cos(phi)), 0.0, 1.0))

    def token_classes(self, parsed: ParsedStory) -> List[Optional[Tuple[str, ...]]]:
        """Substitution class of every position of a well-formed sentence (None = immune)."""
        classes: List[Optional[Tuple[str, ...]]] = [None, None, ACTION_VERBS]
        if parsed.amount is not None:
            buckets = DISTANCE_BUCKETS if parsed.verb == "FORWARD" else ANGLE_BUCKETS
            classes.append(tuple(str(b) for b in buckets))
        classes.append(None)
        classes.append(OUTCOME_VERBS)
        if parsed.outcome == "COLLIDE":
            classes.append(("WALL", *(robot_tag(r) for r in self.robot_ids)))
        elif parsed.outcome == "REACH":
            classes.append(PLACE_TAGS)
        return classes


def transmit(story: Story, channel: ChannelModel, distance: float, phi: float,
             rng: np.random.Generator) -> Story:
    """
    Say a story over the channel. Each content token is independently swapped
    for a different member of its class with probability p_err; IF/I/THEN
    always survive. The result is an unregistered child of `story`.
    """
    parsed = parse_tokens(story.tokens)
    p = channel.p_err(distance, phi)
    heard = list(story.tokens)
    for pos, klass in enumerate(channel.token_classes(parsed)):
        if klass is None:
            continue
        draw = rng.random()
        alternatives = [token for token in klass if token != heard[pos]]
        if draw < p and alternatives:
            heard[pos] = alternatives[int(rng.integers(len(alternatives)))]
    return Story(
        tokens=tuple(heard),
        teller_id=story.holder_id if story.holder_id is not None else story.teller_id,
        origin="retold",
        root_author=story.root_author,
        parent_story_id=story.story_id,
        source_teller=story.holder_id if story.holder_id is not None else story.teller_id,
        created_at=story.created_at,
    )


@dataclass(frozen=True)
class AutobioEntry:
    t: float
    kind: str
    payload: dict
    source_id: Optional[int] = None


class AutobioMemory:
    """Append-only autobiographical log, optionally a ring of the M most recent entries."""

    KINDS = ("event", "action_with_reason", "heard_story", "own_whatif")

    def __init__(self, capacity: Optional[int] = None):
        self.capacity = capacity
        self._entries: Deque[AutobioEntry] = deque(maxlen=capacity)

    def append(self, t: float, kind: str, payload: dict, source_id: Optional[int] = None) -> AutobioEntry:
        if kind not in self.KINDS:
            raise ValueError(f"Unknown autobiographical entry kind '{kind}'")
        if self._entries and t < self._entries[-1].t:
            raise ValueError("Autobiographical timestamps must not decrease")
        entry = AutobioEntry(float(t), kind, dict(payload), source_id)
        self._entries.append(entry)
        return entry

    @property
    def entries(self) -> List[AutobioEntry]:
        return list(self._entries)

    def of_kind(self, kind: str) -> List[AutobioEntry]:
        return [e for e in self._entries if e.kind == kind]

    def __len__(self) -> int:
        return len(self._entries)


@dataclass
class NegotiationState:
    timer: float
    deference_bonus: float = 0.0
    role: str = "undecided"

    @property
    def effective(self) -> float:
        return self.timer + self.deference_bonus


def negotiate_roles(
    pair: Tuple[int, int],
    rngs: Mapping[int, np.random.Generator],
    prestige_table: Mapping[int, Optional[int]],
    t_max: float = 5.0,
    deference: float = 2.0,
    dt: float = 0.05,
) -> Tuple[int, int, Dict[int, NegotiationState]]:
    """
    Speak-first timers. Each robot waits Uniform(0, t_max), plus the
    deference bonus if its partner is the one it holds most prestigious.
    The shorter wait (in whole arena steps) speaks; ties go to the lower id.
    """
    a, b = pair
    states = {}
    for me, partner in ((a, b), (b, a)):
        timer = float(rngs[me].uniform(0.0, t_max))
        bonus = deference if prestige_table.get(me) == partner else 0.0
        states[me] = NegotiationState(timer, bonus)

    def ticks(robot_id):
        return math.ceil(states[robot_id].effective / dt - 1e-9)

    teller, listener = sorted((a, b), key=lambda r: (ticks(r), r))
    states[teller].role = "storyteller"
    states[listener].role = "listener"
    return teller, listener, states


@dataclass
class Imagination:
    record: ConsequenceRecord
    imagined_outcome: str
    told_outcome: str

    @property
    def divergence(self) -> bool:
        return self.imagined_outcome != self.told_outcome

    @property
    def danger(self) -> float:
        return danger(self.record)


def imagine_many(arena: Arena, listener_id: int, stories: Sequence[Story],
                 ce_config: Optional[CEConfig] = None) -> List[Imagination]:
    """Run several heard stories through one robot's CE in a single batch."""
    ce_config = ce_config or CEConfig()
    parsed = [parse_tokens(story.tokens) for story in stories]
    snap = snapshot(arena, listener_id)
    heading = snap.self_state.theta
    actions = [decode_action(p, heading, index=i) for i, p in enumerate(parsed)]
    records = simulate_actions(
        snap, actions, ce_config.other_model, CEBudget.from_config(ce_config),
        ce_config.v_nom, ce_config.goal_tolerance, goal_seeking=False,
    )
    weights = EvaluationWeights(ce_config.w_collision, ce_config.w_goal)
    imaginations = []
    for record, p in zip(records, parsed):
        record = replace(record, cost=evaluate(record, weights))
        imagined = " ".join(outcome_tokens(record))
        imaginations.append(Imagination(record, imagined, p.outcome_label))
    return imaginations


def imagine(arena: Arena, listener_id: int, story: Story, ce_config: Optional[CEConfig] = None) -> Imagination:
    """
    Decode a heard story and simulate it in the listener's current context.
    Raises MalformedStory if it was misheard beyond parsing.
    """
    return imagine_many(arena, listener_id, [story], ce_config)[0]


class StoryStore:
    """A robot's remembered stories under the meme-store capacity policies."""

    def __init__(self, policy: MemoryPolicy):
        self.policy = policy
        self.stories: List[Story] = []

    def store(self, story: Story) -> List[Story]:
        self.stories.append(story)
        evicted = []
        limit = self.policy.max_entries
        while limit is not None and len(self.stories) > limit:
            evicted.append(self.stories.pop(0))
        return evicted

    def __len__(self) -> int:
        return len(self.stories)

    def __iter__(self):
        return iter(self.stories)


class Storybot:
    """
    The story-telling side of one robot: its CE, story store,
    autobiographical memory and local judgements about other tellers.
    """

    def __init__(self, robot_id: int, engine: ConsequenceEngine, story_config: Optional[StoryConfig] = None,
                 rng: Optional[np.random.Generator] = None):
        self.robot_id = robot_id
        self.engine = engine
        self.config = story_config or StoryConfig()
        self.rng = rng or np.random.default_rng(robot_id)
        policy = MemoryPolicy(self.config.memory_policy,
                              self.config.memory_capacity if self.config.memory_policy == "limited" else None)
        self.store = StoryStore(policy)
        self.autobio = AutobioMemory(self.config.autobio_capacity)
        self.retell_counts: Counter = Counter()
        self._danger_by_author: Dict[int, List[float]] = defaultdict(list)
        self.busy_until = 0.0
        self.last_encounter: Dict[int, float] = {}
        engine.on_cycle = self._remember_cycle

    def _remember_cycle(self, result):
        chosen = result.selected_record
        self.autobio.append(
            result.snapshot.time,
            "action_with_reason",
            {"cycle": result.cycle_index, "action": chosen.action.to_record(),
             "outcome": chosen.outcome.to_record(), "cost": chosen.cost},
        )
        if self.config.verbose_whatifs:
            for record in result.records:
                if record.action.index != chosen.action.index:
                    self.autobio.append(
                        result.snapshot.time, "own_whatif",
                        {"selected": False, "tokens": encode(record), "cost": record.cost},
                    )

    def prestigious_partner(self) -> Optional[int]:
        """The author this robot has heard retold most (None if nobody yet)."""
        if not self.retell_counts:
            return None
        author, count = min(self.retell_counts.items(), key=lambda item: (-item[1], item[0]))
        return author if count > 0 else None

    def mean_danger(self, author: int) -> Optional[float]:
        values = self._danger_by_author.get(author)
        return float(np.mean(values)) if values else None

    def note_heard(self, story: Story, imagination: Imagination):
        # only second-hand tellings make an author prestigious
        if story.source_teller is not None and story.source_teller != story.root_author:
            self.retell_counts[story.root_author] += 1
        self._danger_by_author[story.root_author].append(imagination.danger)

    def is_idle(self, t: float) -> bool:
        return t >= self.busy_until

    def ready_for(self, partner_id: int, t: float, cooldown: float) -> bool:
        last = self.last_encounter.get(partner_id)
        return self.is_idle(t) and (last is None or t - last >= cooldown)


def select_story(robot: Storybot, strategy: str, rng: np.random.Generator,
                 imagine_fn: Optional[Callable[[Sequence[Story]], List[Imagination]]] = None) -> Optional[Story]:
    """
    Choose a remembered story to retell; None when memory is empty.

    random: uniform. danger: the story imagined as most dangerous now
    (ties go to the most recent). frequency / prestige: restrict to the
    author with the most local retellings / highest mean imagined danger,
    then uniform.
    """
    stories = list(robot.store)
    if not stories:
        return None
    if len(stories) == 1:
        return stories[0]

    if strategy == "danger":
        if imagine_fn is None:
            raise ValueError("danger strategy needs an imagine function")
        dangers = [imagination.danger for imagination in imagine_fn(stories)]
        best = max(range(len(stories)), key=lambda i: (round(dangers[i], 9), i))
        return stories[best]

    if strategy in ("frequency", "prestige"):
        authors = sorted({story.root_author for story in stories})
        if strategy == "frequency":
            scores = {a: robot.retell_counts.get(a, 0) for a in authors}
        else:
            scores = {a: robot.mean_danger(a) for a in authors if robot.mean_danger(a) is not None}
        if scores:
            top = min(scores, key=lambda a: (-scores[a], a))
            stories = [story for story in stories if story.root_author == top]
    elif strategy != "random":
        raise ValueError(f"Unknown story strategy '{strategy}'")

    return stories[int(rng.integers(len(stories)))]


@dataclass
class ExchangeResult:
    teller: int
    listener: int
    told: Story
    heard: Optional[Story]
    imagination: Optional[Imagination]
    fresh: bool
    p_err: float
    discarded: bool = False
    negotiation: Dict[int, NegotiationState] = field(default_factory=dict)


def fresh_whatif(arena: Arena, teller: Storybot, strategy: str, registry: StoryRegistry,
                 log: Optional[EventLog] = None) -> Story:
    """Narrativise one what-if from the teller's latest CE cycle and register it."""
    result = teller.engine.current or teller.engine.cycle(arena)
    records = result.records
    if strategy == "danger":
        record = max(records, key=lambda r: (round(danger(r), 9), -r.action.index))
    else:
        record = records[int(teller.rng.integers(len(records)))]
    story = registry.register(narrativise(record, teller.robot_id, arena.time))
    teller.store.store(story)
    teller.autobio.append(arena.time, "own_whatif", {"story_id": story.story_id, "tokens": list(story.tokens)})
    if log is not None:
        log.emit("story", arena.time, [teller.robot_id], story=story.to_record())
    return story


def storybot_encounter(
    arena: Arena,
    pair: Tuple[int, int],
    bots: Mapping[int, Storybot],
    registry: StoryRegistry,
    channel: ChannelModel,
    story_config: Optional[StoryConfig] = None,
    ce_config: Optional[CEConfig] = None,
    log: Optional[EventLog] = None,
) -> ExchangeResult:
    """
    One exchange: negotiate roles, pick or make a story, say it, and let the
    listener imagine and remember it. Misheard stories are discarded but the
    exchange is still logged.
    """
    story_config = story_config or StoryConfig()
    ce_config = ce_config or CEConfig()
    t = arena.time
    a, b = sorted(pair)

    teller_id, listener_id, states = negotiate_roles(
        (a, b),
        {r: arena.seeds.robot_stream(r, "negotiation") for r in (a, b)},
        {r: bots[r].prestigious_partner() for r in (a, b)},
        story_config.t_max,
        story_config.deference,
        arena.dt,
    )
    teller, listener = bots[teller_id], bots[listener_id]

    told = select_story(
        teller, story_config.strategy, teller.rng,
        imagine_fn=lambda stories: imagine_many(arena, teller_id, stories, ce_config),
    )
    fresh = told is None
    if fresh:
        told = fresh_whatif(arena, teller, story_config.strategy, registry, log)

    t_pose = arena.robot(teller_id).pose
    l_pose = arena.robot(listener_id).pose
    distance = t_pose.distance_to(l_pose)
    phi = wrap_angle(math.atan2(t_pose.y - l_pose.y, t_pose.x - l_pose.x) - l_pose.theta)
    p_err = channel.p_err(distance, phi)
    heard = transmit(told, channel, distance, phi, arena.seeds.robot_stream(teller_id, "channel"))
    heard.holder_id = listener_id
    heard.created_at = t

    imagination = None
    discarded = False
    try:
        imagination = imagine(arena, listener_id, heard, ce_config)
    except MalformedStory as e:
        discarded = True
        heard_record = None
        listener.autobio.append(t, "event", {"misheard": list(heard.tokens), "from": teller_id}, teller_id)
        if log is not None:
            log.emit("discard", t, [teller_id, listener_id], teller=teller_id, listener=listener_id,
                     tokens=list(heard.tokens), reason=str(e))
    if not discarded:
        heard.imagined_outcome = imagination.imagined_outcome
        heard.divergence = imagination.divergence
        heard = registry.register(heard)
        listener.store.store(heard)
        listener.note_heard(heard, imagination)
        listener.autobio.append(
            t, "heard_story",
            {"story_id": heard.story_id, "tokens": list(heard.tokens), "told_outcome": imagination.told_outcome,
             "imagined_outcome": imagination.imagined_outcome, "divergence": imagination.divergence},
            teller_id,
        )
        heard_record = heard.to_record()

    for bot in (teller, listener):
        bot.busy_until = t + story_config.utterance_time
    teller.last_encounter[listener_id] = t
    listener.last_encounter[teller_id] = t

    if log is not None:
        log.emit(
            "exchange",
            t,
            [teller_id, listener_id],
            teller=teller_id,
            listener=listener_id,
            told_story_id=told.story_id,
            root_author=told.root_author,
            retold=not fresh,
            fresh=fresh,
            told_tokens=list(told.tokens),
            heard=heard_record,
            story_id=None if discarded else heard.story_id,
            parent_story_id=told.story_id,
            told_outcome=told.told_outcome,
            imagined_outcome=None if discarded else imagination.imagined_outcome,
            divergence=None if discarded else imagination.divergence,
            discarded=discarded,
            p_err=p_err,
            timers={str(r): s.effective for r, s in states.items()},
        )
    return ExchangeResult(teller_id, listener_id, told, None if discarded else heard, imagination,
                          fresh, p_err, discarded, states)
