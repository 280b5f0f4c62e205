"""Walk the routing rules on hand-picked probabilities, no trained models needed."""

from osslifecycle.pipeline import RoutingThresholds, make_trace, replay

th = RoutingThresholds()
cases = {
    # stage-1 p(contribMid), heavy (club, federation, toy), light (same order), expert p(club)
    "gate accepts": (0.91, None, None, None),
    "gate boundary is inclusive": (0.85, None, None, None),
    "confident toy": (0.10, (0.10, 0.10, 0.80), (0.20, 0.20, 0.60), None),
    "toy below 0.70 goes to the expert": (0.10, (0.20, 0.15, 0.65), (0.30, 0.10, 0.60), 0.40),
    "light wins the ensemble": (0.30, (0.40, 0.35, 0.25), (0.05, 0.05, 0.90), None),
    "club vs federation tie goes to club": (0.20, (0.60, 0.30, 0.10), (0.50, 0.40, 0.10), 0.50),
}
for label, (p1, heavy, light, p_club) in cases.items():
    tr = make_trace("demo", p1, heavy, light, p_club, th)
    assert replay(tr) is tr.final
    print(f"{label:<38} -> {tr.final.value:<11} via {tr.route:<17} confidence {tr.confidence:.2f}")
