"""Universal electrode template and montage resolution.

The template is a fixed 60-electrode layout with 24 scalp regions and
per-state channel importance priors.  Arbitrary input montages are
resolved onto it by channel-name matching, falling back to
nearest-neighbor matching in 3D head coordinates when names are
unknown.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

N_TEMPLATE_CHANNELS = 60
N_REGIONS = 24

# unit-sphere chord distance beyond which a coordinate match is refused
NN_THRESHOLD = 0.25


class MontageError(ValueError):
    """Invalid montage input (duplicate names, bad shapes, unknown state)."""


class EmptyMontageError(MontageError):
    """No input channel could be mapped onto the template."""


def _read_tsv(path) -> list[dict]:
    with open(path, newline="") as f:
        rows = [r for r in f if not r.startswith("#")]
    return list(csv.DictReader(rows, delimiter="\t"))


@dataclass(frozen=True)
class UniversalTemplate:
    """The fixed electrode/region template all montages resolve onto.

    Attributes:
        channel_names: 60 electrode labels in canonical order.
        coords: (60, 3) unit-sphere coordinates, x=right y=anterior z=up.
        region_of: (60,) region index in 0..23 per channel.
        region_names: the 24 region labels, index order is canonical.
        state_priors: per brain state, a (60,) importance vector in [0, 1].
    """

    channel_names: tuple[str, ...]
    coords: np.ndarray
    region_of: np.ndarray
    region_names: tuple[str, ...]
    state_priors: dict[str, np.ndarray]
    _name_to_index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.channel_names) != N_TEMPLATE_CHANNELS:
            raise MontageError(f"template must have {N_TEMPLATE_CHANNELS} channels")
        if self.coords.shape != (N_TEMPLATE_CHANNELS, 3):
            raise MontageError("template coords must be (60, 3)")
        if len(self.region_names) != N_REGIONS:
            raise MontageError(f"template must define {N_REGIONS} regions")
        if set(np.unique(self.region_of)) != set(range(N_REGIONS)):
            raise MontageError("every region must be non-empty")
        for state, w in self.state_priors.items():
            if w.shape != (N_TEMPLATE_CHANNELS,) or w.min() < 0 or w.max() > 1:
                raise MontageError(f"prior for state {state!r} must lie in [0,1]^60")
        object.__setattr__(
            self, "_name_to_index",
            {n.upper(): i for i, n in enumerate(self.channel_names)},
        )

    @property
    def states(self) -> tuple[str, ...]:
        return tuple(self.state_priors)


def load_template(data_dir: str | Path | None = None) -> UniversalTemplate:
    """Load the template tables, from ``data_dir`` or the packaged defaults."""
    if data_dir is None:
        root = resources.files("neurostate") / "data"
    else:
        root = Path(data_dir)

    chan_rows = _read_tsv(root / "template_channels.tsv")
    region_rows = _read_tsv(root / "regions.tsv")
    region_names = tuple(r["name"] for r in sorted(region_rows, key=lambda r: int(r["index"])))
    region_index = {n: i for i, n in enumerate(region_names)}

    names = tuple(r["name"] for r in chan_rows)
    coords = np.array([[float(r["x"]), float(r["y"]), float(r["z"])] for r in chan_rows])
    region_of = np.array([region_index[r["region"]] for r in chan_rows], dtype=np.int64)

    priors = {}
    for state in ("affect", "motor", "others"):
        rows = _read_tsv(root / f"prior_{state}.tsv")
        by_name = {r["name"]: float(r["weight"]) for r in rows}
        priors[state] = np.array([by_name[n] for n in names])

    return UniversalTemplate(names, coords, region_of, region_names, priors)


_DEFAULT: UniversalTemplate | None = None


def default_template() -> UniversalTemplate:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = load_template()
    return _DEFAULT


@dataclass(frozen=True)
class MontageMap:
    """Resolution of one input montage onto the template.

    ``channel_names`` lists the mapped input channels in their original
    order; all per-channel fields align with it.  Positions stored in
    ``region_members`` index into this mapped list, not the raw input.
    """

    channel_names: tuple[str, ...]
    template_indices: np.ndarray  # (C,) int, no duplicates
    region_labels: np.ndarray  # (C,) region index per mapped channel
    unique_regions: tuple[int, ...]  # sorted region indices present
    region_members: tuple[tuple[int, ...], ...]  # per region, mapped-channel positions
    dropped: tuple[str, ...]
    input_positions: tuple[int, ...] = ()  # kept channels' rows in the raw input

    @property
    def n_channels(self) -> int:
        return len(self.channel_names)

    @property
    def n_regions(self) -> int:
        return len(self.unique_regions)


def resolve_montage(
    channel_names: list[str],
    coords: np.ndarray | None = None,
    template: UniversalTemplate | None = None,
    threshold: float = NN_THRESHOLD,
) -> MontageMap:
    """Map input channels onto template positions.

    Exact case-insensitive name matches are tried first; remaining
    channels fall back to the nearest template coordinate when
    ``coords`` is given and the chord distance is at most ``threshold``.
    When two inputs claim one template slot the closer one keeps it and
    the other is dropped (ties: earlier input position wins).

    Raises:
        MontageError: empty or duplicate input names, bad coord shape.
        EmptyMontageError: nothing could be mapped.
    """
    tpl = template if template is not None else default_template()
    if len(channel_names) == 0:
        raise MontageError("channel_names must be non-empty")
    upper = [n.upper() for n in channel_names]
    if len(set(upper)) != len(upper):
        dupes = sorted({n for n in upper if upper.count(n) > 1})
        raise MontageError(f"duplicate channel names: {dupes}")
    if coords is not None:
        coords = np.asarray(coords, dtype=float)
        if coords.shape != (len(channel_names), 3):
            raise MontageError("coords must be (len(channel_names), 3)")

    # candidate (template_index, distance) per input channel, or None
    candidates: list[tuple[int, float] | None] = []
    for pos, name in enumerate(upper):
        idx = tpl._name_to_index.get(name)
        if idx is not None:
            candidates.append((idx, 0.0))
        elif coords is not None:
            d = np.linalg.norm(tpl.coords - coords[pos], axis=1)
            j = int(np.argmin(d))
            candidates.append((j, float(d[j])) if d[j] <= threshold else None)
        else:
            candidates.append(None)

    # closest claimant wins each template slot; no reassignment for losers
    best: dict[int, tuple[float, int]] = {}
    for pos, cand in enumerate(candidates):
        if cand is None:
            continue
        idx, dist = cand
        if idx not in best or dist < best[idx][0]:
            best[idx] = (dist, pos)
    winners = {pos for _, pos in best.values()}

    kept_names, kept_idx, kept_pos, dropped = [], [], [], []
    for pos, name in enumerate(channel_names):
        if pos in winners:
            kept_names.append(name)
            kept_idx.append(candidates[pos][0])
            kept_pos.append(pos)
        else:
            dropped.append(name)
    if not kept_names:
        raise EmptyMontageError("no input channel maps onto the template")

    template_indices = np.array(kept_idx, dtype=np.int64)
    region_labels = tpl.region_of[template_indices]
    unique_regions = tuple(sorted(set(int(r) for r in region_labels)))
    # members sorted by template index so region averages are order-independent
    members = tuple(
        tuple(sorted(
            (p for p in range(len(kept_idx)) if region_labels[p] == r),
            key=lambda p: kept_idx[p],
        ))
        for r in unique_regions
    )
    return MontageMap(
        channel_names=tuple(kept_names),
        template_indices=template_indices,
        region_labels=region_labels,
        unique_regions=unique_regions,
        region_members=members,
        dropped=tuple(dropped),
        input_positions=tuple(kept_pos),
    )


def state_prior(
    state: str,
    montage: MontageMap,
    template: UniversalTemplate | None = None,
) -> np.ndarray:
    """Per-state channel importance gathered at the montage's template indices."""
    tpl = template if template is not None else default_template()
    if state not in tpl.state_priors:
        raise MontageError(f"unknown state {state!r}; have {sorted(tpl.state_priors)}")
    return tpl.state_priors[state][montage.template_indices]


def region_reduce(montage: MontageMap, features: np.ndarray) -> np.ndarray:
    """Average feature rows within each region present in the montage.

    ``features`` is (C, F) with one row per mapped channel; the result is
    (|unique_regions|, F) in unique_regions order.
    """
    features = np.asarray(features)
    if features.ndim != 2 or features.shape[0] != montage.n_channels:
        raise MontageError(
            f"features must have {montage.n_channels} rows, got {features.shape}"
        )
    return np.stack([features[list(m)].mean(axis=0) for m in montage.region_members])
