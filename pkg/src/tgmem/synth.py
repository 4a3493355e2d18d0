"""Synthetic bipartite event streams for desk-scale experiments.

Three generators: a periodic pattern (each user cycles through a small
personal set of items), a re-occurrence-heavy stream (pairs repeat with
probability rho), and a noisy variant mixing the periodic pattern with
uniform random edges.
"""

from __future__ import annotations

import numpy as np

from .events import EventStream


def _stream(users, items, num_users, num_items, labels=None):
    r = len(users)
    src = np.asarray(users, dtype=np.int64)
    dst = np.asarray(items, dtype=np.int64) + num_users
    t = np.arange(1.0, r + 1.0)
    feats = np.zeros((r, 1))
    lab = np.full(r, -1, dtype=np.int64) if labels is None else np.asarray(labels)
    return EventStream(src, dst, t, feats, lab, num_users + num_items)


def periodic_bipartite(num_users: int = 20, num_items: int = 10,
                       num_events: int = 2000, cycle: int = 2,
                       seed: int = 1, labeled: bool = False) -> EventStream:
    """Users take turns; user u's k-th event hits item (u + k mod cycle) % I.

    Fully deterministic: the only learnable signal is each user's small
    item cycle, which memory plus re-occurrence easily capture.
    """
    users, items, labels = [], [], []
    per_user = np.zeros(num_users, dtype=np.int64)
    for i in range(num_events):
        u = i % num_users
        k = per_user[u]
        per_user[u] += 1
        users.append(u)
        items.append((u + (k % cycle)) % num_items)
        labels.append(int(u % 2))
    return _stream(users, items, num_users, num_items,
                   labels if labeled else None)


def reoccurrence_heavy(num_users: int = 25, num_items: int = 8,
                       num_events: int = 5000, rho: float = 0.8,
                       seed: int = 1, burst_len: int = 8,
                       burst_prob: float = 0.3) -> EventStream:
    """Stable partners with bursty distractors; repetition probability rho.

    With probability rho an event repeats an established pair: the user's
    active burst target while a burst is running, else its stable first
    partner.  With probability 1-rho it hits a uniform random item, which
    (with burst_prob) becomes the target of a short burst.  Bursts make
    recent-window multiplicity a misleading frequency estimate -- a burst
    pair briefly dominates the window with a tiny cumulative count while
    the stable partner keeps a large one -- which is exactly the signal
    re-occurrence counts carry and window membership does not.

    rho=1 never enters the random branch, so every event repeats the
    user's first partner and that pair's count equals its event index.
    """
    rng = np.random.default_rng(seed)
    partner = {}
    burst = np.full(num_users, -1, dtype=np.int64)
    burst_left = np.zeros(num_users, dtype=np.int64)
    users, items = [], []
    for i in range(num_events):
        u = i % num_users
        if u not in partner:
            partner[u] = int(rng.integers(0, num_items))
        if rng.random() < rho:
            if burst_left[u] > 0:
                item = int(burst[u])
                burst_left[u] -= 1
            else:
                item = partner[u]
        else:
            item = int(rng.integers(0, num_items))
            if rng.random() < burst_prob:
                burst[u] = item
                burst_left[u] = burst_len
        users.append(u)
        items.append(item)
    return _stream(users, items, num_users, num_items)


def noisy_periodic(num_users: int = 20, num_items: int = 10,
                   num_events: int = 3000, eta: float = 0.3, cycle: int = 2,
                   seed: int = 1, return_mask: bool = False):
    """Periodic pattern with a fraction eta of uniform random edges."""
    rng = np.random.default_rng(seed)
    users, items = [], []
    noise_mask = np.zeros(num_events, dtype=bool)
    per_user = np.zeros(num_users, dtype=np.int64)
    for i in range(num_events):
        u = i % num_users
        if rng.random() < eta:
            noise_mask[i] = True
            item = int(rng.integers(0, num_items))
        else:
            k = per_user[u]
            item = (u + (k % cycle)) % num_items
        per_user[u] += 1
        users.append(u)
        items.append(item)
    stream = _stream(users, items, num_users, num_items)
    return (stream, noise_mask) if return_mask else stream


GENERATORS = {
    "periodic-bipartite": periodic_bipartite,
    "reoccurrence-heavy": reoccurrence_heavy,
    "noisy": noisy_periodic,
}


def write_jodie_csv(stream: EventStream, path, num_users: int | None = None):
    """Emit the stream in the CSV layout the parser reads back."""
    split = num_users if num_users is not None else int(stream.src.max()) + 1
    de = stream.edge_dim
    header = "user_id,item_id,timestamp,state_label" + "".join(
        f",f{k}" for k in range(de)
    )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header + "\n")
        for i in range(len(stream)):
            label = int(stream.labels[i]) if stream.labels[i] >= 0 else 0
            feats = "".join(f",{float(v)!r}" for v in stream.feats[i])
            fh.write(f"{int(stream.src[i])},{int(stream.dst[i]) - split},"
                     f"{float(stream.t[i])!r},{label}{feats}\n")
