"""Regenerate the pinned montage data tables in src/neurostate/data/.

The template is an idealized spherical 10-10 layout for the 60 scalp
electrodes of a 62-channel ESI cap with the two non-scalp reference
electrodes (CB1/CB2) removed.  Geometry:

  * unit sphere, x = right, y = anterior, z = up;
  * outer ring at 72 deg polar angle from the vertex, electrodes every
    18 deg of azimuth (T8 at azimuth 0, front midline at 90);
  * midline electrodes on the sagittal arc at multiples of 18 deg;
  * interior electrodes by great-circle interpolation between the
    midline electrode of their row and the ring electrode of the same
    row, at fractions 1/4 (x1), 1/2 (x3), 3/4 (x5).

Region grouping is hemisphere-based: one left and one right region per
electrode row (Fp, AF, F, FT, FC, T, C, TP, CP, P, PO, O), 24 regions
total.  Midline electrodes are grouped with the left-hemisphere region
of their row (pinned convention).

The output files are versioned artifacts; rerun this script only when
deliberately changing the montage and commit the diff.
"""

import math
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "src" / "neurostate" / "data"

RING_POLAR = 72.0  # degrees from vertex

# azimuth of the left ring electrode per row (right side mirrors about 90)
ROW_RING_AZ = {
    "FP": 108.0,
    "AF": 126.0,
    "F": 144.0,
    "FT": 162.0,
    "T": 180.0,
    "TP": 198.0,
    "P": 216.0,
    "PO": 234.0,
    "O": 252.0,
}

# polar angle of the midline electrode per row; sign: + anterior, - posterior
ROW_MID_POLAR = {
    "FP": 72.0,
    "AF": 54.0,
    "F": 36.0,
    "FC": 18.0,
    "C": 0.0,
    "CP": -18.0,
    "P": -36.0,
    "PO": -54.0,
    "O": -72.0,
}


def sph(polar_deg, az_deg):
    """Unit vector from polar angle (from +z) and azimuth (from +x, ccw from above)."""
    p = math.radians(polar_deg)
    a = math.radians(az_deg)
    return (math.sin(p) * math.cos(a), math.sin(p) * math.sin(a), math.cos(p))


def midline(row):
    polar = ROW_MID_POLAR[row]
    az = 90.0 if polar >= 0 else 270.0
    return sph(abs(polar), az)


def ring(row, side):
    az = ROW_RING_AZ[row]
    if side == "R":
        az = 180.0 - az if az <= 180.0 else 540.0 - az
        az %= 360.0
    return sph(RING_POLAR, az)


def slerp(a, b, t):
    dot = max(-1.0, min(1.0, sum(x * y for x, y in zip(a, b))))
    omega = math.acos(dot)
    if omega < 1e-12:
        return a
    sa = math.sin((1.0 - t) * omega) / math.sin(omega)
    sb = math.sin(t * omega) / math.sin(omega)
    return tuple(sa * x + sb * y for x, y in zip(a, b))


def lateral(row, number, side):
    """Interior electrode <row><number>: slerp(midline, ring) at (number+1)/8."""
    t = (number + 1) / 8.0
    # FC/CP rows terminate on the FT/TP ring electrodes
    ring_row = {"FC": "FT", "CP": "TP", "C": "T"}.get(row, row)
    return slerp(midline(row), ring(ring_row, side), t)


def build_channels():
    """(name, xyz, region_name) in template order."""
    chans = []

    def add(name, xyz, region):
        chans.append((name, xyz, region))

    add("FP1", ring("FP", "L"), "FP_L")
    add("FPZ", midline("FP"), "FP_L")
    add("FP2", ring("FP", "R"), "FP_R")
    add("AF3", lateral("AF", 3, "L"), "AF_L")
    add("AF4", lateral("AF", 3, "R"), "AF_R")
    add("F7", ring("F", "L"), "F_L")
    add("F5", lateral("F", 5, "L"), "F_L")
    add("F3", lateral("F", 3, "L"), "F_L")
    add("F1", lateral("F", 1, "L"), "F_L")
    add("FZ", midline("F"), "F_L")
    add("F2", lateral("F", 1, "R"), "F_R")
    add("F4", lateral("F", 3, "R"), "F_R")
    add("F6", lateral("F", 5, "R"), "F_R")
    add("F8", ring("F", "R"), "F_R")
    add("FT7", ring("FT", "L"), "FT_L")
    add("FC5", lateral("FC", 5, "L"), "FC_L")
    add("FC3", lateral("FC", 3, "L"), "FC_L")
    add("FC1", lateral("FC", 1, "L"), "FC_L")
    add("FCZ", midline("FC"), "FC_L")
    add("FC2", lateral("FC", 1, "R"), "FC_R")
    add("FC4", lateral("FC", 3, "R"), "FC_R")
    add("FC6", lateral("FC", 5, "R"), "FC_R")
    add("FT8", ring("FT", "R"), "FT_R")
    add("T7", ring("T", "L"), "T_L")
    add("C5", lateral("C", 5, "L"), "C_L")
    add("C3", lateral("C", 3, "L"), "C_L")
    add("C1", lateral("C", 1, "L"), "C_L")
    add("CZ", midline("C"), "C_L")
    add("C2", lateral("C", 1, "R"), "C_R")
    add("C4", lateral("C", 3, "R"), "C_R")
    add("C6", lateral("C", 5, "R"), "C_R")
    add("T8", ring("T", "R"), "T_R")
    add("TP7", ring("TP", "L"), "TP_L")
    add("CP5", lateral("CP", 5, "L"), "CP_L")
    add("CP3", lateral("CP", 3, "L"), "CP_L")
    add("CP1", lateral("CP", 1, "L"), "CP_L")
    add("CPZ", midline("CP"), "CP_L")
    add("CP2", lateral("CP", 1, "R"), "CP_R")
    add("CP4", lateral("CP", 3, "R"), "CP_R")
    add("CP6", lateral("CP", 5, "R"), "CP_R")
    add("TP8", ring("TP", "R"), "TP_R")
    add("P7", ring("P", "L"), "P_L")
    add("P5", lateral("P", 5, "L"), "P_L")
    add("P3", lateral("P", 3, "L"), "P_L")
    add("P1", lateral("P", 1, "L"), "P_L")
    add("PZ", midline("P"), "P_L")
    add("P2", lateral("P", 1, "R"), "P_R")
    add("P4", lateral("P", 3, "R"), "P_R")
    add("P6", lateral("P", 5, "R"), "P_R")
    add("P8", ring("P", "R"), "P_R")
    add("PO7", ring("PO", "L"), "PO_L")
    add("PO5", lateral("PO", 5, "L"), "PO_L")
    add("PO3", lateral("PO", 3, "L"), "PO_L")
    add("POZ", midline("PO"), "PO_L")
    add("PO4", lateral("PO", 3, "R"), "PO_R")
    add("PO6", lateral("PO", 5, "R"), "PO_R")
    add("PO8", ring("PO", "R"), "PO_R")
    add("O1", ring("O", "L"), "O_L")
    add("OZ", midline("O"), "O_L")
    add("O2", ring("O", "R"), "O_R")
    return chans


REGION_ORDER = [
    "FP_L", "FP_R", "AF_L", "AF_R", "F_L", "F_R", "FT_L", "FT_R",
    "FC_L", "FC_R", "T_L", "T_R", "C_L", "C_R", "TP_L", "TP_R",
    "CP_L", "CP_R", "P_L", "P_R", "PO_L", "PO_R", "O_L", "O_R",
]

# row -> functional group for the per-state channel priors
ROW_GROUP = {
    "FP": "frontal", "AF": "frontal", "F": "frontal",
    "FT": "temporal", "T": "temporal", "TP": "temporal",
    "FC": "central", "C": "central",
    "CP": "parietal", "P": "parietal",
    "PO": "occipital", "O": "occipital",
}

PRIOR_GROUPS = {
    "affect": {"frontal", "temporal", "central"},
    "motor": {"central", "parietal"},
}


def row_of(region_name):
    return region_name.rsplit("_", 1)[0]


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    chans = build_channels()
    assert len(chans) == 60
    assert len({n for n, _, _ in chans}) == 60
    used_regions = {r for _, _, r in chans}
    assert used_regions == set(REGION_ORDER)

    with open(OUT / "template_channels.tsv", "w") as f:
        f.write("# 60-electrode spherical 10-10 template; unit sphere, x=right y=anterior z=up.\n")
        f.write("# Midline electrodes are grouped with the left-hemisphere region of their row.\n")
        f.write("name\tx\ty\tz\tregion\n")
        for name, (x, y, z), region in chans:
            f.write(f"{name}\t{x:.6f}\t{y:.6f}\t{z:.6f}\t{region}\n")

    with open(OUT / "regions.tsv", "w") as f:
        f.write("# 24 hemisphere-based regions, index order is canonical.\n")
        f.write("index\tname\n")
        for i, name in enumerate(REGION_ORDER):
            f.write(f"{i}\t{name}\n")

    for state in ("affect", "motor", "others"):
        with open(OUT / f"prior_{state}.tsv", "w") as f:
            f.write(f"# Channel importance prior for state '{state}', entries in [0,1].\n")
            f.write("name\tweight\n")
            for name, _, region in chans:
                if state == "others":
                    w = 0.5
                else:
                    w = 1.0 if ROW_GROUP[row_of(region)] in PRIOR_GROUPS[state] else 0.0
                f.write(f"{name}\t{w:.2f}\n")

    print(f"wrote tables to {OUT}")


if __name__ == "__main__":
    main()
