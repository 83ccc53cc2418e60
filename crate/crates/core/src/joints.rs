//! COCO-18 joint layout (OpenPose order) plus the background channel, and
//! the joint groups used by pose-aware augmentation.

pub const NUM_JOINTS: usize = 19;
pub const BACKGROUND: usize = 18;

pub const NAMES: [&str; NUM_JOINTS] = [
    "Nose",
    "Neck",
    "RShoulder",
    "RElbow",
    "RWrist",
    "LShoulder",
    "LElbow",
    "LWrist",
    "RHip",
    "RKnee",
    "RAnkle",
    "LHip",
    "LKnee",
    "LAnkle",
    "REye",
    "LEye",
    "REar",
    "LEar",
    "Background",
];

pub const NOSE: usize = 0;
pub const NECK: usize = 1;
pub const R_SHOULDER: usize = 2;
pub const R_ELBOW: usize = 3;
pub const R_WRIST: usize = 4;
pub const L_SHOULDER: usize = 5;
pub const L_ELBOW: usize = 6;
pub const L_WRIST: usize = 7;
pub const R_HIP: usize = 8;
pub const R_KNEE: usize = 9;
pub const R_ANKLE: usize = 10;
pub const L_HIP: usize = 11;
pub const L_KNEE: usize = 12;
pub const L_ANKLE: usize = 13;
pub const R_EYE: usize = 14;
pub const L_EYE: usize = 15;
pub const R_EAR: usize = 16;
pub const L_EAR: usize = 17;

pub fn index_of(name: &str) -> Option<usize> {
    NAMES.iter().position(|n| n.eq_ignore_ascii_case(name))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Head,
    Torso,
    LeftHand,
    RightHand,
    LeftLeg,
    RightLeg,
    Background,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::Head,
        Group::Torso,
        Group::LeftHand,
        Group::RightHand,
        Group::LeftLeg,
        Group::RightLeg,
        Group::Background,
    ];

    /// Torso and background move with the global offset only.
    pub fn jittered(self) -> bool {
        !matches!(self, Group::Torso | Group::Background)
    }
}

/// Partition of the 19 channels into groups plus the left/right swap map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointGroups {
    group_of: [Group; NUM_JOINTS],
    swap: [usize; NUM_JOINTS],
}

impl Default for JointGroups {
    fn default() -> Self {
        Self::coco()
    }
}

impl JointGroups {
    pub fn coco() -> Self {
        use Group::*;
        let mut group_of = [Background; NUM_JOINTS];
        for j in [NOSE, R_EYE, L_EYE, L_EAR, R_EAR] {
            group_of[j] = Head;
        }
        for j in [R_HIP, L_HIP, NECK] {
            group_of[j] = Torso;
        }
        for j in [L_SHOULDER, L_ELBOW, L_WRIST] {
            group_of[j] = LeftHand;
        }
        for j in [R_SHOULDER, R_ELBOW, R_WRIST] {
            group_of[j] = RightHand;
        }
        for j in [L_KNEE, L_ANKLE] {
            group_of[j] = LeftLeg;
        }
        for j in [R_KNEE, R_ANKLE] {
            group_of[j] = RightLeg;
        }
        let mut swap: [usize; NUM_JOINTS] = std::array::from_fn(|j| j);
        for (a, b) in [
            (R_SHOULDER, L_SHOULDER),
            (R_ELBOW, L_ELBOW),
            (R_WRIST, L_WRIST),
            (R_HIP, L_HIP),
            (R_KNEE, L_KNEE),
            (R_ANKLE, L_ANKLE),
            (R_EYE, L_EYE),
            (R_EAR, L_EAR),
        ] {
            swap[a] = b;
            swap[b] = a;
        }
        JointGroups { group_of, swap }
    }

    pub fn num_joints(&self) -> usize {
        NUM_JOINTS
    }

    pub fn group_of(&self, joint: usize) -> Group {
        self.group_of[joint]
    }

    pub fn members(&self, g: Group) -> Vec<usize> {
        (0..NUM_JOINTS).filter(|&j| self.group_of[j] == g).collect()
    }

    /// Mirror partner of a joint (itself for Nose, Neck and Background).
    pub fn swap(&self, joint: usize) -> usize {
        self.swap[joint]
    }
}
