"""Brute-force reference scorer for the next-concept metrics.

Written directly from the metric definitions with naive loops, independently
of the package's implementation: every (point, candidate, T, N) combination
is enumerated explicitly. Used to cross-check compute_metrics exactly.
"""


def _concepts(timeline):
    return [(e.code, e.bucket_date) for e in timeline.concepts()]


def brute_force_cell(predictor, timelines, type_map, row_type, t_days, n):
    """One grid cell -> dict of precision/recall/support per stratum."""
    hits_p = {"New": 0, "Recurring": 0}
    hits_r = {"New": 0, "Recurring": 0}
    totals = {"New": 0, "Recurring": 0}
    for timeline in timelines:
        concepts = _concepts(timeline)
        for j in range(1, len(concepts)):
            code_j, day_j = concepts[j]
            type_j = type_map[code_j]
            if row_type != "All" and type_j != row_type:
                continue
            earlier = {c for c, _ in concepts[:j]}
            stratum = "New" if code_j not in earlier else "Recurring"
            totals[stratum] += 1

            # precision: any type-filtered candidate occurring in the forward
            # window in the matching stratum relative to this point
            hit = False
            for cand in predictor.candidates(timeline, j, type_j, n):
                cand_new = cand not in earlier
                if cand_new != (stratum == "New"):
                    continue
                for code_k, day_k in concepts:
                    if code_k == cand and day_j <= day_k <= day_j + t_days:
                        hit = True
            hits_p[stratum] += hit

            # recall: was this occurrence's code ranked top-N at any point
            # whose context precedes it, within the look-back window
            rhit = False
            for p in range(1, j + 1):
                day_p = concepts[p][1]
                if day_j - t_days <= day_p <= day_j:
                    if code_j in predictor.candidates(timeline, p, type_j, n):
                        rhit = True
            hits_r[stratum] += rhit

    def ratio(h, t):
        return h / t if t else None

    return {
        "precision_new": ratio(hits_p["New"], totals["New"]),
        "precision_recurring": ratio(hits_p["Recurring"], totals["Recurring"]),
        "recall_new": ratio(hits_r["New"], totals["New"]),
        "recall_recurring": ratio(hits_r["Recurring"], totals["Recurring"]),
        "support_new": totals["New"],
        "support_recurring": totals["Recurring"],
    }


def brute_force_grid(predictor, timelines, type_map, t_grid, n_grid, types):
    cells = {}
    for row_type in ("All", *types):
        for t in t_grid:
            for n in n_grid:
                cells[(row_type, t, n)] = brute_force_cell(
                    predictor, timelines, type_map, row_type, t, n)
    return cells
