# SPDX-License-Identifier: Apache-2.0
"""Multi-agent DQN exploration of feature subsets.

One agent per feature decides select/deselect each step. The resulting
subset is scored by downstream accuracy, by mean inverted Laplacian score or
by one minus its mean pairwise redundancy. The score is split across the
selecting agents as reward, and every visited subset is logged with its
performance v and normalized redundancy u.
"""

import json
import time
from collections import deque
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.optim as optim
from scipy.spatial.distance import pdist, squareform
from sklearn.neighbors import kneighbors_graph
from tqdm import tqdm

import selector_core as core
import redundancy

STATE_STATS = 7
STATE_SIZE = STATE_STATS * STATE_STATS
SELECT, DESELECT = 1, 0


def _seven_stats(values, axis):
    q1, median, q3 = np.percentile(values, [25, 50, 75], axis=axis)
    return np.stack([
        values.mean(axis=axis),
        values.std(axis=axis),
        values.min(axis=axis),
        values.max(axis=axis),
        q1,
        median,
        q3,
    ])


def encode_state(dataset, subset):
    """Fixed-length stats-of-stats descriptor of the selected submatrix.

    Column-wise statistics of the submatrix give a 7 x m table; the same 7
    statistics over each row of that table give the 49-value descriptor.
    An empty subset (None or no indices) is the zero vector.
    """
    if subset is None or len(subset) == 0:
        return np.zeros(STATE_SIZE, dtype=np.float32)
    columns = list(subset.sorted()) if isinstance(subset, core.FeatureSubset) else sorted(subset)
    submatrix = dataset.features[:, columns]
    per_column = _seven_stats(submatrix, axis=0)
    descriptor = _seven_stats(per_column, axis=1)
    return descriptor.T.reshape(-1).astype(np.float32)


def laplacian_scores(dataset, k_neighbors=5, kernel_bandwidth=None, rows=None):
    """Laplacian score per feature; lower preserves locality better.

    Args:
        dataset: TabularDataset.
        k_neighbors: neighbors in the sample graph.
        kernel_bandwidth: heat-kernel bandwidth; defaults to the mean
            squared pairwise distance.
        rows: optional row indices to restrict the computation to.

    Returns:
        Array of length n_features; constant features get +inf.
    """
    x = dataset.features if rows is None else dataset.features[np.asarray(rows)]
    n = x.shape[0]
    if k_neighbors < 1 or k_neighbors >= n:
        raise ValueError(f"k_neighbors must be in [1, {n - 1}], got {k_neighbors}")

    sq_dists = squareform(pdist(x, metric="sqeuclidean"))
    if kernel_bandwidth is None:
        off_diagonal = sq_dists[~np.eye(n, dtype=bool)]
        kernel_bandwidth = float(off_diagonal.mean()) if off_diagonal.size else 1.0
    if kernel_bandwidth <= 0:
        kernel_bandwidth = 1.0

    connectivity = kneighbors_graph(x, n_neighbors=k_neighbors, mode="connectivity").toarray()
    connectivity = np.maximum(connectivity, connectivity.T)
    similarity = np.exp(-sq_dists / kernel_bandwidth) * connectivity
    degree = similarity.sum(axis=1)

    scores = np.empty(x.shape[1], dtype=np.float64)
    for r in range(x.shape[1]):
        f = x[:, r]
        if np.ptp(f) == 0:
            scores[r] = np.inf
            continue
        f_centered = f - np.dot(f, degree) / degree.sum()
        variance = float(np.dot(f_centered * degree, f_centered))
        if variance <= 0:
            scores[r] = np.inf
            continue
        # sum_ij (f_i - f_j)^2 S_ij = 2 (f' D f - f' S f)
        spread = 2.0 * (np.dot(f_centered * degree, f_centered) - f_centered @ similarity @ f_centered)
        scores[r] = float(spread) / variance
    return scores


def utility_vector(scores):
    """Min-max normalized and inverted Laplacian scores (1 = best)."""
    scores = np.asarray(scores, dtype=np.float64)
    finite = np.isfinite(scores)
    inverted = np.zeros_like(scores)
    if not finite.any():
        return inverted
    lo, hi = scores[finite].min(), scores[finite].max()
    if hi == lo:
        inverted[finite] = 1.0
    else:
        inverted[finite] = 1.0 - (scores[finite] - lo) / (hi - lo)
    return inverted


def unsupervised_utility(scores, subset):
    """Mean inverted normalized Laplacian score over subset members."""
    inverted = utility_vector(scores)
    return float(np.mean(inverted[list(subset.indices)]))


def mean_redundancy_utility(matrix, subset):
    """One minus the mean pairwise redundancy of the members, scaled by the largest pair.

    Single-feature subsets have no pairs and score 1.0.
    """
    indices = subset.sorted()
    pairs = len(indices) * (len(indices) - 1) // 2
    off_diagonal = matrix.values[~np.eye(matrix.n_features, dtype=bool)]
    scale = float(off_diagonal.max()) if off_diagonal.size else 0.0
    if pairs == 0 or scale <= 0:
        return 1.0
    return 1.0 - redundancy.subset_redundancy(matrix, subset) / pairs / scale


def bellman_target(reward, next_state_max_q, discount):
    if not 0.0 <= discount < 1.0:
        raise ValueError(f"discount must be in [0, 1), got {discount}")
    return reward + discount * next_state_max_q


def split_reward(utility, actions):
    """Shares the step utility equally among selecting agents."""
    actions = np.asarray(actions)
    selected = int((actions == SELECT).sum())
    rewards = np.zeros(len(actions), dtype=np.float64)
    if selected:
        rewards[actions == SELECT] = utility / selected
    return rewards


class QNetwork(nn.Module):
    def __init__(self, state_size, action_size, hidden_units=64):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(state_size, hidden_units),
            nn.ReLU(),
            nn.Linear(hidden_units, hidden_units),
            nn.ReLU(),
            nn.Linear(hidden_units, action_size),
        )

    def forward(self, x):
        return self.net(x)


class AgentPolicy:
    """DQN agent that controls a single feature."""

    def __init__(self, feature_index, hidden_units=64, replay_capacity=5000,
                 batch_size=32, discount=0.9, learning_rate=1e-3,
                 target_sync_every=50, optimizer="adam"):
        self.feature_index = feature_index
        self.batch_size = batch_size
        self.discount = discount
        self.target_sync_every = target_sync_every

        self.memory = deque(maxlen=replay_capacity)
        self.q_network = QNetwork(STATE_SIZE, 2, hidden_units)
        self.target_network = QNetwork(STATE_SIZE, 2, hidden_units)
        self.target_network.load_state_dict(self.q_network.state_dict())
        self.target_network.eval()

        if optimizer == "sgd":
            self.optimizer = optim.SGD(self.q_network.parameters(), lr=learning_rate)
        else:
            self.optimizer = optim.Adam(self.q_network.parameters(), lr=learning_rate)
        self.loss_fn = nn.MSELoss()
        self.learn_step = 0

    def greedy_action(self, state):
        with torch.no_grad():
            q_values = self.q_network(torch.as_tensor(state).unsqueeze(0))
        return int(torch.argmax(q_values, dim=1).item())

    def store(self, state, action, reward, next_state):
        self.memory.append((state, action, reward, next_state))

    def update(self, rng):
        """One replay step toward the Bellman target; returns the loss."""
        if not self.memory:
            return None
        size = min(self.batch_size, len(self.memory))
        picks = rng.choice(len(self.memory), size=size, replace=False)
        batch = [self.memory[i] for i in picks]
        states, actions, rewards, next_states = zip(*batch)

        states = torch.as_tensor(np.stack(states))
        actions = torch.as_tensor(actions, dtype=torch.long).unsqueeze(1)
        rewards = torch.as_tensor(rewards, dtype=torch.float32).unsqueeze(1)
        next_states = torch.as_tensor(np.stack(next_states))

        q_values = self.q_network(states).gather(1, actions)
        with torch.no_grad():
            next_q_values = self.target_network(next_states).max(1, keepdim=True)[0]
            targets = bellman_target(rewards, next_q_values, self.discount)

        loss = self.loss_fn(q_values, targets)
        self.optimizer.zero_grad()
        loss.backward()
        self.optimizer.step()

        self.learn_step += 1
        if self.learn_step % self.target_sync_every == 0:
            self.target_network.load_state_dict(self.q_network.state_dict())
        return float(loss.item())


@dataclass(frozen=True)
class CollectedSubset:
    features: tuple
    v: float
    u: float
    episode: int = 0
    step: int = 0


@dataclass
class CollectionLog:
    records: list
    episodes: int
    channel: str
    redundancy_metric: str
    wall_time: float = 0.0
    scoring_time: float = 0.0
    upstream_hash: str = ""

    def unique_records(self):
        """One record per sorted index set, keeping the highest v."""
        best = {}
        for record in self.records:
            key = tuple(sorted(record.features))
            if key not in best or record.v > best[key].v:
                best[key] = record
        return [best[k] for k in sorted(best)]

    def to_lines(self):
        for record in self.records:
            yield json.dumps({
                "features": sorted(int(i) for i in record.features),
                "v": float(record.v),
                "u": float(record.u),
                "channel": self.channel,
            })


def epsilon_for_episode(episode, episodes, start=1.0, end=0.1, decay_fraction=0.6):
    """Linear anneal from `start` to `end` over the first decay_fraction of episodes."""
    horizon = max(1.0, decay_fraction * episodes)
    progress = min(1.0, episode / horizon)
    return start + (end - start) * progress


class SubsetCollector:
    """Owns the agents and the score cache for one collection run."""

    def __init__(self, dataset, split, redundancy_matrix, config, downstream=None,
                 progress=False):
        if dataset.n_features < 2:
            raise ValueError("Collection needs at least 2 features")
        self.dataset = dataset
        self.split = split
        # states describe partition A only; B stays unseen until evaluation
        self.partition_a = core.take_rows(dataset, split.train_indices)
        self.matrix = redundancy_matrix
        self.config = dict(config)
        self.downstream = dict(downstream or core.DEFAULT_SETTINGS["downstream"])
        self.progress = progress

        self.channel = self.config["channel"]
        if self.channel not in core.CHANNELS:
            raise ValueError(f"Unknown channel: {self.channel}")
        self.strategy = self.config.get("strategy", "dqn")
        low, high = self.config.get("select_probability", (0.5, 0.5))
        if not 0.0 <= low <= high <= 1.0:
            raise ValueError(f"select_probability must satisfy 0 <= low <= high <= 1, got {(low, high)}")
        self.select_probability = (float(low), float(high))
        seed = int(self.config.get("seed", 0))

        self.action_rng = np.random.default_rng(seed)
        self.replay_rng = np.random.default_rng(seed + 1)
        torch.manual_seed(seed)
        self.agents = [
            AgentPolicy(
                i,
                hidden_units=self.config.get("hidden_units", 64),
                replay_capacity=self.config.get("replay_capacity", 5000),
                batch_size=self.config.get("batch_size", 32),
                discount=self.config.get("discount", 0.9),
                learning_rate=self.config.get("learning_rate", 1e-3),
                target_sync_every=self.config.get("target_sync_every", 50),
            )
            for i in range(dataset.n_features)
        ]

        self.full_redundancy = redundancy.full_set_redundancy(redundancy_matrix)
        self._cache = {}
        self._scoring_time = 0.0
        if self.channel == "supervised":
            self.inner_split = core.internal_split(
                dataset, split, self.config.get("validation_fraction", 0.2), seed
            )
            self.utilities = None
        elif self.channel == "redundancy":
            self.inner_split = None
            self.utilities = None
        else:
            self.inner_split = None
            scores = laplacian_scores(
                dataset, self.config.get("k_neighbors", 5), rows=split.train_indices
            )
            self.utilities = utility_vector(scores)

    def score(self, subset):
        """Returns (v, u) for a subset, cached by sorted index set."""
        key = subset.sorted()
        if key in self._cache:
            return self._cache[key]
        started = time.perf_counter()
        if self.channel == "supervised":
            v = core.evaluate_subset(
                self.dataset,
                self.inner_split,
                subset,
                self.downstream.get("seed", 0),
                self.downstream.get("model", "random_forest"),
                self.downstream.get("n_estimators", 100),
            )
        elif self.channel == "redundancy":
            v = mean_redundancy_utility(self.matrix, subset)
        else:
            v = float(np.mean(self.utilities[list(key)]))
        u = redundancy.normalize_redundancy(
            redundancy.subset_redundancy(self.matrix, subset), self.full_redundancy
        )
        self._scoring_time += time.perf_counter() - started
        self._cache[key] = (v, u)
        return v, u

    def choose_actions(self, state, epsilon):
        n = len(self.agents)
        # every draw happens every step so the action stream is fixed by the seed
        explore = self.action_rng.random(n) < epsilon
        rate = self.action_rng.uniform(*self.select_probability)
        random_actions = (self.action_rng.random(n) < rate).astype(np.int64)
        actions = np.empty(n, dtype=np.int64)
        for i, agent in enumerate(self.agents):
            if explore[i] or self.strategy == "random":
                actions[i] = random_actions[i]
            else:
                actions[i] = agent.greedy_action(state)
        return actions

    def run(self, episodes, steps_per_episode):
        if episodes < 1:
            raise ValueError("episodes must be >= 1")
        started = time.perf_counter()
        records = []
        full = core.FeatureSubset(range(self.dataset.n_features))
        for episode in tqdm(range(episodes), desc="Collecting", disable=not self.progress):
            if self.strategy == "random":
                epsilon = 1.0
            else:
                epsilon = epsilon_for_episode(
                    episode,
                    episodes,
                    self.config.get("epsilon_start", 1.0),
                    self.config.get("epsilon_end", 0.1),
                    self.config.get("epsilon_decay_fraction", 0.6),
                )
            current = full
            for step in range(steps_per_episode):
                state = encode_state(self.partition_a, current)
                actions = self.choose_actions(state, epsilon)
                chosen = np.flatnonzero(actions == SELECT)
                if chosen.size == 0:
                    chosen = np.array([self.action_rng.integers(0, self.dataset.n_features)])
                subset = core.FeatureSubset(chosen.tolist())

                v, u = self.score(subset)
                rewards = split_reward(v, actions)
                next_state = encode_state(self.partition_a, subset)
                for agent, action, reward in zip(self.agents, actions, rewards):
                    agent.store(state, int(action), float(reward), next_state)
                    if self.strategy != "random":
                        agent.update(self.replay_rng)

                records.append(CollectedSubset(subset.sorted(), v, u, episode, step))
                current = subset

        wall_time = time.perf_counter() - started
        core.log_message(
            f"Collected {len(records)} records ({len(self._cache)} unique) over "
            f"{episodes} episodes in {wall_time:.1f}s [{self.channel}]"
        )
        return CollectionLog(
            records=records,
            episodes=episodes,
            channel=self.channel,
            redundancy_metric=self.matrix.metric,
            wall_time=wall_time,
            scoring_time=self._scoring_time,
        )


def run_collection(dataset, split, episodes, steps_per_episode, channel,
                   redundancy_matrix, config, downstream=None, progress=False):
    """Runs a full collection and returns the CollectionLog."""
    settings = dict(config)
    settings["channel"] = channel
    collector = SubsetCollector(
        dataset, split, redundancy_matrix, settings, downstream=downstream, progress=progress
    )
    return collector.run(episodes, steps_per_episode)


def save_log(log, path, upstream_hash=""):
    """Writes the JSON-lines log plus its `.meta.json` sidecar."""
    with open(path, "w", encoding="utf-8") as f:
        for line in log.to_lines():
            f.write(line + "\n")
    core.write_json(f"{path}.meta.json", {
        "episodes": log.episodes,
        "channel": log.channel,
        "redundancy_metric": log.redundancy_metric,
        "n_records": len(log.records),
        "wall_time": log.wall_time,
        "scoring_time": log.scoring_time,
        "upstream_hash": upstream_hash,
    })


def load_log(path):
    meta = core.read_json(f"{path}.meta.json")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            records.append(CollectedSubset(tuple(row["features"]), float(row["v"]), float(row["u"])))
    return CollectionLog(
        records=records,
        episodes=int(meta["episodes"]),
        channel=meta["channel"],
        redundancy_metric=meta["redundancy_metric"],
        wall_time=float(meta.get("wall_time", 0.0)),
        scoring_time=float(meta.get("scoring_time", 0.0)),
        upstream_hash=meta.get("upstream_hash", ""),
    )
