"""Unified landmark protocol: the 124-point set and the per-dataset mappings.

The four annotation schemes (AFLW 19, WFLW 98, COFW 29, 300W 68) are tied
together by a mapping table loaded from a line-oriented config file. Each
local landmark of each dataset maps to exactly one unified id; a unified id
may be annotated by one to four datasets. The shipped default table has 124
distinct unified ids and 214 local landmarks in total.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources


class DatasetId(enum.Enum):
    AFLW = "AFLW"
    WFLW = "WFLW"
    COFW = "COFW"
    T300W = "300W"

    @classmethod
    def from_name(cls, name):
        for ds in cls:
            if ds.value == name:
                return ds
        raise KeyError(f"unknown dataset name: {name!r}")


# Declared landmark counts of the four standard datasets.
DATASET_SIZES = {
    DatasetId.AFLW: 19,
    DatasetId.WFLW: 98,
    DatasetId.COFW: 29,
    DatasetId.T300W: 68,
}

NUM_UNIFIED = 124
TOTAL_LOCAL = 214  # 19 + 98 + 29 + 68

DEFAULT_PROTOCOL_RESOURCE = "protocol_124.map"


class ProtocolError(ValueError):
    """Raised when a mapping file violates the protocol schema or invariants."""


@dataclass(frozen=True)
class ProtocolTable:
    """Immutable landmark correspondence table.

    forward[name] is a tuple mapping local index -> unified id.
    reverse[u] is a tuple of (dataset name, local index) pairs.
    counts[u] is the number of datasets annotating unified id u.
    flip_permutation[name] is an involution on local indices for mirroring.
    """

    dataset_sizes: dict = field(repr=False)
    forward: dict = field(repr=False)
    reverse: tuple = field(repr=False)
    counts: tuple = field(repr=False)
    flip_permutation: dict = field(repr=False)

    @property
    def num_unified(self):
        return len(self.counts)

    @property
    def dataset_names(self):
        return tuple(self.dataset_sizes)

    def size(self, ds):
        return self.dataset_sizes[_name_of(ds)]

    def map_forward(self, ds, local):
        name = _name_of(ds)
        fwd = self.forward[name]
        if not 0 <= local < len(fwd):
            raise ProtocolError(
                f"local index {local} out of range for {name} "
                f"(size {len(fwd)})"
            )
        return fwd[local]

    def map_reverse(self, p):
        self._check_unified(p)
        return list(self.reverse[p])

    def count(self, p):
        self._check_unified(p)
        return self.counts[p]

    def flip(self, ds, local):
        name = _name_of(ds)
        perm = self.flip_permutation[name]
        if not 0 <= local < len(perm):
            raise ProtocolError(
                f"local index {local} out of range for {name}"
            )
        return perm[local]

    def _check_unified(self, p):
        if not 0 <= p < self.num_unified:
            raise ProtocolError(
                f"unified id {p} out of range [0, {self.num_unified})"
            )


def _name_of(ds):
    if isinstance(ds, DatasetId):
        return ds.value
    return str(ds)


def load_protocol(config_text):
    """Parse and validate a mapping file; returns an immutable ProtocolTable.

    All structural invariants are checked eagerly. When the file declares
    exactly the four standard datasets, the published aggregates are
    enforced as well: declared sizes 19/98/29/68, 124 distinct unified ids,
    and 214 map lines in total.
    """
    sizes = {}
    maps = {}
    flips = {}
    for lineno, raw in enumerate(config_text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "dataset":
                name, size = parts[1], int(parts[2])
                if len(parts) != 3 or size <= 0:
                    raise ValueError
                if name in sizes:
                    raise ProtocolError(
                        f"line {lineno}: dataset {name} declared twice"
                    )
                sizes[name] = size
                maps[name] = {}
                flips[name] = {}
            elif kind == "map":
                name, local, unified = parts[1], int(parts[2]), int(parts[3])
                if len(parts) != 4:
                    raise ValueError
                if name not in sizes:
                    raise ProtocolError(
                        f"line {lineno}: map before dataset declaration for {name}"
                    )
                if not 0 <= local < sizes[name]:
                    raise ProtocolError(
                        f"line {lineno}: local index {local} out of range "
                        f"for {name} (size {sizes[name]})"
                    )
                if local in maps[name]:
                    raise ProtocolError(
                        f"line {lineno}: duplicate local index {local} for {name}"
                    )
                if unified < 0:
                    raise ProtocolError(
                        f"line {lineno}: negative unified id {unified}"
                    )
                maps[name][local] = unified
            elif kind == "flip":
                name, a, b = parts[1], int(parts[2]), int(parts[3])
                if len(parts) != 4:
                    raise ValueError
                if name not in sizes:
                    raise ProtocolError(
                        f"line {lineno}: flip before dataset declaration for {name}"
                    )
                for idx in (a, b):
                    if not 0 <= idx < sizes[name]:
                        raise ProtocolError(
                            f"line {lineno}: flip index {idx} out of range for {name}"
                        )
                if flips[name].get(a, b) != b or flips[name].get(b, a) != a:
                    raise ProtocolError(
                        f"line {lineno}: conflicting flip pair ({a}, {b}) for {name}"
                    )
                flips[name][a] = b
                flips[name][b] = a
            else:
                raise ProtocolError(f"line {lineno}: unknown directive {kind!r}")
        except (IndexError, ValueError) as exc:
            if isinstance(exc, ProtocolError):
                raise
            raise ProtocolError(f"line {lineno}: malformed line {raw!r}") from exc

    if not sizes:
        raise ProtocolError("empty mapping file: no dataset declarations")

    standard = set(d.value for d in DatasetId)
    is_standard = set(sizes) == standard
    if is_standard:
        for ds, expected in DATASET_SIZES.items():
            if sizes[ds.value] != expected:
                raise ProtocolError(
                    f"dataset {ds.value} declared size {sizes[ds.value]}, "
                    f"expected {expected}"
                )

    for name, size in sizes.items():
        missing = [j for j in range(size) if j not in maps[name]]
        if missing:
            raise ProtocolError(
                f"dataset {name}: missing map lines for local indices {missing}"
            )
        values = list(maps[name].values())
        if len(set(values)) != len(values):
            raise ProtocolError(
                f"dataset {name}: forward map is not injective"
            )

    used_ids = sorted(set(u for m in maps.values() for u in m.values()))
    num_unified = len(used_ids)
    if used_ids != list(range(num_unified)):
        raise ProtocolError(
            "unified ids must be dense integers starting at 0; "
            f"got {num_unified} distinct ids with max {used_ids[-1]}"
        )
    total = sum(len(m) for m in maps.values())
    if is_standard and (num_unified != NUM_UNIFIED or total != TOTAL_LOCAL):
        raise ProtocolError(
            f"distinct-id/total-count mismatch: got {num_unified} distinct "
            f"unified ids and {total} map lines, expected "
            f"{NUM_UNIFIED} and {TOTAL_LOCAL}"
        )

    forward = {
        name: tuple(maps[name][j] for j in range(sizes[name])) for name in sizes
    }
    reverse = [[] for _ in range(num_unified)]
    for name in sizes:
        for local, unified in maps[name].items():
            reverse[unified].append((name, local))
    reverse = tuple(tuple(sorted(r)) for r in reverse)
    counts = tuple(len(r) for r in reverse)
    flip_permutation = {
        name: tuple(flips[name].get(j, j) for j in range(sizes[name]))
        for name in sizes
    }
    return ProtocolTable(
        dataset_sizes=dict(sizes),
        forward=forward,
        reverse=reverse,
        counts=counts,
        flip_permutation=flip_permutation,
    )


def dump_protocol(table):
    """Serialize a ProtocolTable back to the line-oriented config format."""
    lines = []
    for name, size in table.dataset_sizes.items():
        lines.append(f"dataset {name} {size}")
    for name in table.dataset_sizes:
        for local, unified in enumerate(table.forward[name]):
            lines.append(f"map {name} {local} {unified}")
    for name in table.dataset_sizes:
        seen = set()
        for a, b in enumerate(table.flip_permutation[name]):
            if a < b and a not in seen:
                lines.append(f"flip {name} {a} {b}")
                seen.update((a, b))
    return "\n".join(lines) + "\n"


def default_protocol_text():
    """Contents of the shipped default 124-point mapping file."""
    return (
        resources.files("unifl")
        .joinpath("tables", DEFAULT_PROTOCOL_RESOURCE)
        .read_text(encoding="utf-8")
    )


def load_default_protocol():
    return load_protocol(default_protocol_text())
