import numpy as np
import pytest

from dexloop.simenv import (
    ACTION_DIM,
    DRAWER_MAX_EXT,
    EnvState,
    Task,
    TaskSpec,
    expert_action,
    make_env,
)


class ObservationExpert:
    """Expert wrapped in the policy interface.

    Reconstructs the simulator state from the observation vector (the toy
    observations are complete up to the step index) and plans a chunk by
    rolling its private environment forward with the scripted expert.
    Useful as a perfect policy in loop-level tests.
    """

    n_obs_steps = 2
    horizon = 16
    action_dim = ACTION_DIM

    def __init__(self, task: Task):
        self.task = task
        self.env = make_env(TaskSpec(task))

    def _state_from_obs(self, obs: np.ndarray) -> EnvState:
        eff = np.array([obs[0], obs[1], np.arctan2(obs[3], obs[2]), obs[4]])
        if self.task is Task.PLACE_PAN:
            objects = np.array([obs[5], obs[6], obs[7]])
            goal = np.array([obs[8], obs[9]])
        elif self.task is Task.PULL_DRAWER:
            objects = np.array([obs[5] * DRAWER_MAX_EXT, obs[6], obs[7],
                                np.arctan2(obs[9], obs[8])])
            goal = np.array([DRAWER_MAX_EXT])
        else:
            rotation = obs[9] * np.pi
            objects = np.array([rotation, 0.0])
            goal = np.array([obs[5], obs[6]])
        return EnvState(eff, objects, goal, 0, 0)

    def sample_chunk(self, window, noise_seed=0, dropout_seed=None):
        self.env.restore(self._state_from_obs(np.asarray(window)[-1]))
        chunk = np.zeros((self.horizon, self.action_dim))
        for i in range(self.horizon):
            chunk[i] = expert_action(self.env)
            self.env.step(chunk[i])
        return chunk

    def sample_chunks_batch(self, window, noise_seed, dropout_seeds):
        return np.stack([self.sample_chunk(window) for _ in dropout_seeds])

    def predict_batch(self, windows, noise_seed=0):
        return np.stack([self.sample_chunk(w) for w in np.asarray(windows)])

    def to_env_actions(self, chunk):
        return chunk


class ConstantPolicy:
    """Adversarial stub that always outputs the same action."""

    n_obs_steps = 2
    horizon = 16
    action_dim = ACTION_DIM

    def __init__(self, action=(1.0, 0.0, 0.0, -1.0)):
        self.action = np.asarray(action, dtype=float)

    def sample_chunk(self, window, noise_seed=0, dropout_seed=None):
        return np.tile(self.action, (self.horizon, 1))

    def sample_chunks_batch(self, window, noise_seed, dropout_seeds):
        return np.tile(self.action, (len(dropout_seeds), self.horizon, 1))

    def predict_batch(self, windows, noise_seed=0):
        return np.tile(self.action, (len(windows), self.horizon, 1))

    def to_env_actions(self, chunk):
        return chunk


@pytest.fixture
def observation_expert():
    return ObservationExpert


@pytest.fixture
def constant_policy():
    return ConstantPolicy
