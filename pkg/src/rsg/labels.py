"""Node classes, relationship labels and attribute labels of road scene graphs.

Class-pair legality follows the object x object relationship table: the row is
the source class, the column the target class.  ``detectable`` pairs are the
subset for which a rule-based detector exists in :mod:`rsg.rules`.
"""
from __future__ import annotations

from enum import Enum


class NodeClass(str, Enum):
    Human = "Human"
    Vehicle = "Vehicle"
    Obstacle = "Obstacle"
    TrafficSign = "TrafficSign"

    @property
    def index(self) -> int:
        return NODE_CLASSES.index(self)


NODE_CLASSES: list[NodeClass] = list(NodeClass)

H, V, O, T = NodeClass.Human, NodeClass.Vehicle, NodeClass.Obstacle, NodeClass.TrafficSign


class RelationshipLabel(str, Enum):
    InGroup = "InGroup"
    Behind = "Behind"
    OnLane = "OnLane"
    WaitingForCr = "WaitingForCr"
    MayIntersect = "MayIntersect"
    WaitingTs = "WaitingTs"
    SameLane = "SameLane"
    Following = "Following"
    Approaching = "Approaching"
    PassingBy = "PassingBy"
    Overtaking = "Overtaking"
    Avoiding = "Avoiding"
    WaitingForTs = "WaitingForTs"
    StopByTs = "StopByTs"
    ReactByTs = "ReactByTs"

    @property
    def pairs(self) -> frozenset[tuple[NodeClass, NodeClass]]:
        return _REL_PAIRS[self]

    @property
    def detectable_pairs(self) -> frozenset[tuple[NodeClass, NodeClass]]:
        return _REL_DETECTABLE[self]

    @property
    def detectable(self) -> bool:
        return bool(_REL_DETECTABLE[self])

    @property
    def transitive(self) -> bool:
        return self is RelationshipLabel.InGroup

    def allows(self, src: NodeClass, dst: NodeClass) -> bool:
        return (src, dst) in _REL_PAIRS[self]


R = RelationshipLabel

# (pairs, starred subset)
_TABLE: dict[RelationshipLabel, tuple[set, set]] = {
    R.InGroup: ({(H, H), (V, V), (O, O)}, {(H, H), (V, V)}),
    R.Behind: ({(H, V), (H, O), (O, T)}, {(H, V), (H, O)}),
    R.OnLane: ({(H, V)}, {(H, V)}),
    R.WaitingForCr: ({(H, V), (V, V)}, set()),
    R.MayIntersect: ({(H, V)}, set()),
    R.WaitingTs: ({(H, T)}, {(H, T)}),
    R.SameLane: ({(V, V)}, {(V, V)}),
    R.Following: ({(V, V)}, {(V, V)}),
    R.Approaching: ({(V, V)}, {(V, V)}),
    R.PassingBy: ({(V, V), (V, O)}, {(V, V)}),
    R.Overtaking: ({(V, V)}, set()),
    R.Avoiding: ({(V, O)}, set()),
    R.WaitingForTs: ({(V, T)}, {(V, T)}),
    R.StopByTs: ({(V, T)}, {(V, T)}),
    R.ReactByTs: ({(V, T)}, {(V, T)}),
}
_REL_PAIRS = {k: frozenset(v[0]) for k, v in _TABLE.items()}
_REL_DETECTABLE = {k: frozenset(v[1]) for k, v in _TABLE.items()}

RELATIONSHIP_LABELS: list[RelationshipLabel] = list(RelationshipLabel)


def legal_relationships(src: NodeClass, dst: NodeClass) -> list[RelationshipLabel]:
    """Labels permitted from ``src`` to ``dst``, in enum order."""
    return [r for r in RELATIONSHIP_LABELS if (src, dst) in _REL_PAIRS[r]]


class AttributeLabel(str, Enum):
    # Human
    Stop = "Stop"
    Moving = "Moving"
    NearCrossroad = "NearCrossroad"
    NearLane = "NearLane"
    # Vehicle
    GoStraight = "GoStraight"
    Acceleration = "Acceleration"
    SlowDown = "SlowDown"
    Parking = "Parking"
    TurnLeft = "TurnLeft"
    TurnRight = "TurnRight"
    IntersectionPassing = "IntersectionPassing"
    LaneBranchLeft = "LaneBranchLeft"
    LaneBranchRight = "LaneBranchRight"
    LaneChanging = "LaneChanging"
    PassingCr = "PassingCr"
    UTurn = "UTurn"
    # Obstacle
    OnLane = "OnLane"
    OnRoadside = "OnRoadside"

    @property
    def owner(self) -> NodeClass:
        return _ATTR_OWNER[self]


A = AttributeLabel
_ATTR_OWNER: dict[AttributeLabel, NodeClass] = {
    **{a: H for a in (A.Stop, A.Moving, A.NearCrossroad, A.NearLane)},
    **{
        a: V
        for a in (
            A.GoStraight, A.Acceleration, A.SlowDown, A.Parking, A.TurnLeft,
            A.TurnRight, A.IntersectionPassing, A.LaneBranchLeft,
            A.LaneBranchRight, A.LaneChanging, A.PassingCr, A.UTurn,
        )
    },
    **{a: O for a in (A.OnLane, A.OnRoadside)},
}

ATTRIBUTE_LABELS: list[AttributeLabel] = list(AttributeLabel)


def legal_attributes(cls: NodeClass) -> list[AttributeLabel]:
    return [a for a in ATTRIBUTE_LABELS if _ATTR_OWNER[a] is cls]


# Channel keys of the edge-label tensor.  Relationship and attribute names
# overlap (OnLane), so keys are namespaced.
REL_PREFIX = "rel:"
ATTR_PREFIX = "attr:"


def default_label_order() -> list[str]:
    return [REL_PREFIX + r.value for r in RELATIONSHIP_LABELS] + [
        ATTR_PREFIX + a.value for a in ATTRIBUTE_LABELS
    ]


def parse_label_key(key: str) -> RelationshipLabel | AttributeLabel:
    if key.startswith(REL_PREFIX):
        return RelationshipLabel(key[len(REL_PREFIX):])
    if key.startswith(ATTR_PREFIX):
        return AttributeLabel(key[len(ATTR_PREFIX):])
    raise ValueError(f"unknown label key {key!r}")


def label_key(label: RelationshipLabel | AttributeLabel) -> str:
    if isinstance(label, RelationshipLabel):
        return REL_PREFIX + label.value
    return ATTR_PREFIX + label.value
