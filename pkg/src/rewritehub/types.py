from typing import FrozenSet, Mapping, Tuple

Row = Tuple[str, ...]
Bindings = Mapping[str, object]
# (query id, rewrite canonical sql) pairs, compared between rounds
ResultSignature = FrozenSet[Tuple[str, str]]
