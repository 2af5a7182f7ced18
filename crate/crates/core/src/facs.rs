//! Action-unit catalogue and activation vectors.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// One action unit: index, short code, full name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActionUnit {
    pub short: &'static str,
    pub full: &'static str,
}

const fn au(short: &'static str, full: &'static str) -> ActionUnit {
    ActionUnit { short, full }
}

/// The 48 production action units in catalogue order.
pub const FULL_CATALOGUE: [ActionUnit; 48] = [
    au("neutral", "neutral"),
    au("c_COR", "Corrugator"),
    au("c_CR", "ChinRaiser"),
    au("c_CRUL", "ChinRaiserUpperLip"),
    au("c_ELD", "EyesLookDown"),
    au("c_ELL", "EyesLookLeft"),
    au("c_ELR", "EyesLookRight"),
    au("c_ELU", "EyesLookUp"),
    au("c_FN", "Funneler"),
    au("c_FP", "FlatPucker"),
    au("c_JD", "JawDrop"),
    au("c_JL", "JawLeft"),
    au("c_JR", "JawRight"),
    au("c_LLS", "LowerLipSuck"),
    au("c_LP", "LipPresser"),
    au("c_LPT", "LipsTogether"),
    au("c_ML", "MouthLeft"),
    au("c_MR", "MouthRight"),
    au("c_PK", "Pucker"),
    au("c_ULS", "UpperLipSuck"),
    au("l_BL", "LeftBrowLowerer"),
    au("l_CHP", "LeftCheekPuff"),
    au("l_CHR", "LeftCheekRaiser"),
    au("l_DM", "LeftDimpler"),
    au("l_EC", "LeftEyeClosed"),
    au("l_EULR", "LeftEyeUpperLidRaiser"),
    au("l_IBR", "LeftInnerBrowRaiser"),
    au("l_LCD", "LeftLipCornerDown"),
    au("l_LCP", "LeftLipCornerPuller"),
    au("l_LLD", "LeftLowerLipDepressor"),
    au("l_LS", "LeftLipStretcher"),
    au("l_NW", "LeftNoseWrinkler"),
    au("l_OBR", "LeftOuterBrowRaiser"),
    au("l_ULR", "LeftUpperLipRaiser"),
    au("r_BL", "RightBrowLowerer"),
    au("r_CHP", "RightCheekPuff"),
    au("r_CHR", "RightCheekRaiser"),
    au("r_DM", "RightDimpler"),
    au("r_EC", "RightEyeClosed"),
    au("r_EULR", "RightEyeUpperLidRaiser"),
    au("r_IBR", "RightInnerBrowRaiser"),
    au("r_LCD", "RightLipCornerDown"),
    au("r_LCP", "RightLipCornerPuller"),
    au("r_LLD", "RightLowerLipDepressor"),
    au("r_LS", "RightLipStretcher"),
    au("r_NW", "RightNoseWrinkler"),
    au("r_OBR", "RightOuterBrowRaiser"),
    au("r_ULR", "RightUpperLipRaiser"),
];

/// The desk-scale subset driven by the synthetic heads, in vector order.
pub const DESK_AUS: [ActionUnit; 12] = [
    au("c_JD", "JawDrop"),
    au("c_PK", "Pucker"),
    au("l_EC", "LeftEyeClosed"),
    au("r_EC", "RightEyeClosed"),
    au("c_ELL", "EyesLookLeft"),
    au("c_ELR", "EyesLookRight"),
    au("c_ELU", "EyesLookUp"),
    au("c_ELD", "EyesLookDown"),
    au("l_IBR", "LeftInnerBrowRaiser"),
    au("r_IBR", "RightInnerBrowRaiser"),
    au("l_LCP", "LeftLipCornerPuller"),
    au("r_LCP", "RightLipCornerPuller"),
];

pub const JAW_DROP: usize = 0;
pub const PUCKER: usize = 1;
pub const LEFT_EYE_CLOSED: usize = 2;
pub const RIGHT_EYE_CLOSED: usize = 3;
pub const EYES_LOOK_LEFT: usize = 4;
pub const EYES_LOOK_RIGHT: usize = 5;
pub const EYES_LOOK_UP: usize = 6;
pub const EYES_LOOK_DOWN: usize = 7;
pub const LEFT_INNER_BROW_RAISER: usize = 8;
pub const RIGHT_INNER_BROW_RAISER: usize = 9;
pub const LEFT_LIP_CORNER_PULLER: usize = 10;
pub const RIGHT_LIP_CORNER_PULLER: usize = 11;

/// Pose display name, e.g. `"c_JD JawDrop"`.
pub fn display_name(a: &ActionUnit) -> String {
    format!("{} {}", a.short, a.full)
}

/// Activation vector over action units. Entries lie in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FacsVector {
    activations: Vec<f64>,
    pub pose_id: Option<u32>,
}

impl FacsVector {
    pub fn new(activations: Vec<f64>) -> Result<Self> {
        if let Some(bad) = activations.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::BadConfig(format!("FACS activation {bad} outside [0, 1]")));
        }
        Ok(Self { activations, pose_id: None })
    }

    pub fn zeros(d: usize) -> Self {
        Self { activations: vec![0.0; d], pose_id: None }
    }

    /// Ones at `active`, zeros elsewhere.
    pub fn multi_hot(d: usize, active: &[usize]) -> Result<Self> {
        let mut a = vec![0.0; d];
        for &i in active {
            if i >= d {
                return Err(Error::BadConfig(format!("action unit {i} out of range for D = {d}")));
            }
            a[i] = 1.0;
        }
        Ok(Self { activations: a, pose_id: None })
    }

    pub fn with_pose_id(mut self, id: u32) -> Self {
        self.pose_id = Some(id);
        self
    }

    pub fn dim(&self) -> usize {
        self.activations.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.activations
    }

    pub fn active(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.activations[i] > 0.0).collect()
    }

    pub fn is_neutral(&self) -> bool {
        self.activations.iter().all(|&a| a == 0.0)
    }
}
