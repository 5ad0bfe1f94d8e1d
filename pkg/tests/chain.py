"""Three-state, two-action chain MDP with an exact policy-evaluation oracle.

State 0 is the start. From state 0, action 1 leads to state 1 and action 0
skips to state 2; state 1 always moves to state 2; the episode ends after
acting in state 2. States are one-hot encoded.
"""
import itertools

import numpy as np

from morlbench.mdp import Trajectory, make_dataset
from morlbench.policies import TabularPolicy

REWARDS = {(0, 0): (0.2, 0.0), (0, 1): (0.0, 0.1), (1, 0): (0.5, 0.3), (1, 1): (0.1, 0.9),
           (2, 0): (1.0, 0.0), (2, 1): (0.0, 1.0)}
NEXT = {(0, 0): 2, (0, 1): 1, (1, 0): 2, (1, 1): 2}
PI = np.array([[0.3, 0.7], [0.6, 0.4], [0.2, 0.8]])


def chain_dataset(repeats: int = 50):
    """Every action sequence, ``repeats`` times: uniform behavior, exhaustive coverage."""
    eye = np.eye(3)
    trajs = []
    for _ in range(repeats):
        for acts in itertools.product([0, 1], repeat=3):
            s, S, A, R = 0, [], [], []
            for a in acts:
                S.append(eye[s])
                A.append(a)
                R.append(REWARDS[(s, a)])
                if s == 2:
                    break
                s = NEXT[(s, a)]
            trajs.append(Trajectory(f"e{len(trajs)}", np.array(S), A, R, [False] * (len(A) - 1) + [True]))
    return make_dataset(trajs, 2)


def chain_policy():
    return TabularPolicy(PI, one_hot=True)


def chain_value(w, gamma):
    """Exact V^pi(s_0) by backward induction."""
    def r(s, a):
        return w[0] * REWARDS[(s, a)][0] + w[1] * REWARDS[(s, a)][1]
    v2 = sum(PI[2, a] * r(2, a) for a in (0, 1))
    v1 = sum(PI[1, a] * (r(1, a) + gamma * v2) for a in (0, 1))
    return sum(PI[0, a] * (r(0, a) + gamma * (v1 if NEXT[(0, a)] == 1 else v2)) for a in (0, 1))
