"""Canonical 17-joint human skeleton: ordering, tree, rest pose, symmetry.

Joint order follows the common motion-capture convention with the pelvis as
root.  All downstream modules (graphs, model, data, metrics) key off these
constants, so the ordering here is the one source of truth.
"""
from __future__ import annotations

import numpy as np

JOINT_NAMES = [
    "pelvis",       # 0
    "right_hip",    # 1
    "right_knee",   # 2
    "right_ankle",  # 3
    "left_hip",     # 4
    "left_knee",    # 5
    "left_ankle",   # 6
    "spine",        # 7
    "thorax",       # 8
    "neck",         # 9
    "head",         # 10
    "left_shoulder",   # 11
    "left_elbow",      # 12
    "left_wrist",      # 13
    "right_shoulder",  # 14
    "right_elbow",     # 15
    "right_wrist",     # 16
]

N_JOINTS = 17
ROOT = 0

# parent of each joint; -1 for the pelvis root
PARENTS = [-1, 0, 1, 2, 0, 4, 5, 0, 7, 8, 9, 8, 11, 12, 8, 14, 15]

# tree edges (parent, child) in canonical order
EDGES = [
    (0, 1), (1, 2), (2, 3),
    (0, 4), (4, 5), (5, 6),
    (0, 7), (7, 8), (8, 9), (9, 10),
    (8, 11), (11, 12), (12, 13),
    (8, 14), (14, 15), (15, 16),
]

# (left, right) joint index pairs swapped by a lateral flip
LEFT_RIGHT_PAIRS = [(4, 1), (5, 2), (6, 3), (11, 14), (12, 15), (13, 16)]

# joint index after mirroring about the sagittal plane
MIRROR_JOINT = [0, 4, 5, 6, 1, 2, 3, 7, 8, 9, 10, 14, 15, 16, 11, 12, 13]

# rest pose in millimetres: x+ left, y+ up, z depth; T-pose, pelvis at origin
REST_JOINTS = np.array([
    [0.0, 0.0, 0.0],        # pelvis
    [-120.0, 0.0, 0.0],     # right_hip
    [-120.0, -450.0, 0.0],  # right_knee
    [-120.0, -890.0, 0.0],  # right_ankle
    [120.0, 0.0, 0.0],      # left_hip
    [120.0, -450.0, 0.0],   # left_knee
    [120.0, -890.0, 0.0],   # left_ankle
    [0.0, 230.0, 0.0],      # spine
    [0.0, 460.0, 0.0],      # thorax
    [0.0, 580.0, 0.0],      # neck
    [0.0, 695.0, 0.0],      # head
    [170.0, 460.0, 0.0],    # left_shoulder
    [450.0, 460.0, 0.0],    # left_elbow
    [700.0, 460.0, 0.0],    # left_wrist
    [-170.0, 460.0, 0.0],   # right_shoulder
    [-450.0, 460.0, 0.0],   # right_elbow
    [-700.0, 460.0, 0.0],   # right_wrist
], dtype=np.float64)

BONE_LENGTHS = np.array(
    [np.linalg.norm(REST_JOINTS[c] - REST_JOINTS[p]) for p, c in EDGES], dtype=np.float64)

# tube radius per bone (mm), indexed like EDGES; torso thick, forearms thin
BONE_RADII = np.array([
    80.0, 70.0, 55.0,     # right leg chain
    80.0, 70.0, 55.0,     # left leg chain
    130.0, 130.0, 60.0, 90.0,  # spine, chest, neck, head
    60.0, 45.0, 40.0,     # left arm chain
    60.0, 45.0, 40.0,     # right arm chain
], dtype=np.float64)

# mirror image of each bone (index into EDGES); central bones map to themselves
MIRROR_BONE = [3, 4, 5, 0, 1, 2, 6, 7, 8, 9, 13, 14, 15, 10, 11, 12]

# bones whose mirror is themselves (lie on the sagittal plane)
CENTRAL_BONES = [6, 7, 8, 9]

# canonical bones: central ones plus the left-side representative of each pair
CANONICAL_BONES = [6, 7, 8, 9, 3, 4, 5, 10, 11, 12]


def bone_index(parent, child):
    return EDGES.index((parent, child))
