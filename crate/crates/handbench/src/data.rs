//! Core pose types shared by every stage: the 21-joint skeleton, camera
//! intrinsics, dataset frames and method predictions.
//!
//! Joint layout: index 0 is the wrist; fingers follow in the order thumb,
//! index, middle, ring, pinky, each contributing MCP, PIP, DIP, TIP (so
//! thumb MCP = 1, thumb TIP = 4, index MCP = 5, ..., pinky TIP = 20).
//! Coordinates are millimeters in the camera frame throughout.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

/// Number of joints in a skeleton.
pub const JOINT_COUNT: usize = 21;

/// Number of fingers.
pub const FINGER_COUNT: usize = 5;

/// Index of the wrist joint.
pub const WRIST: usize = 0;

/// Fingers in skeleton order. The discriminant is the finger index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Finger {
    Thumb = 0,
    Index = 1,
    Middle = 2,
    Ring = 3,
    Pinky = 4,
}

impl Finger {
    pub const ALL: [Finger; FINGER_COUNT] =
        [Finger::Thumb, Finger::Index, Finger::Middle, Finger::Ring, Finger::Pinky];

    /// Skeleton index of this finger's metacarpophalangeal joint.
    pub fn mcp(self) -> usize {
        1 + 4 * self as usize
    }

    pub fn pip(self) -> usize {
        2 + 4 * self as usize
    }

    pub fn dip(self) -> usize {
        3 + 4 * self as usize
    }

    pub fn tip(self) -> usize {
        4 + 4 * self as usize
    }
}

/// Parent of each joint in the kinematic tree; `None` for the wrist root.
pub const PARENT: [Option<usize>; JOINT_COUNT] = parent_table();

const fn parent_table() -> [Option<usize>; JOINT_COUNT] {
    let mut t = [None; JOINT_COUNT];
    let mut f = 0;
    while f < FINGER_COUNT {
        let mcp = 1 + 4 * f;
        t[mcp] = Some(WRIST);
        t[mcp + 1] = Some(mcp);
        t[mcp + 2] = Some(mcp + 1);
        t[mcp + 3] = Some(mcp + 2);
        f += 1;
    }
    t
}

/// A 21-joint hand skeleton in millimeters, camera frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Skeleton {
    joints: [[f64; 3]; JOINT_COUNT],
}

impl Skeleton {
    /// Builds a skeleton, rejecting non-finite coordinates.
    pub fn try_new(joints: [[f64; 3]; JOINT_COUNT]) -> Result<Self, SkeletonError> {
        let s = Skeleton { joints };
        if !s.is_finite() {
            return Err(SkeletonError::NonFinite);
        }
        Ok(s)
    }

    /// Builds a skeleton without the finiteness check. Intended for values
    /// already produced by toolkit math; file ingestion must validate.
    pub fn from_joints(joints: [[f64; 3]; JOINT_COUNT]) -> Self {
        Skeleton { joints }
    }

    pub fn joints(&self) -> &[[f64; 3]; JOINT_COUNT] {
        &self.joints
    }

    pub fn joint(&self, i: usize) -> Vector3<f64> {
        Vector3::from(self.joints[i])
    }

    pub fn set_joint(&mut self, i: usize, p: Vector3<f64>) {
        self.joints[i] = [p.x, p.y, p.z];
    }

    pub fn wrist(&self) -> Vector3<f64> {
        self.joint(WRIST)
    }

    pub fn is_finite(&self) -> bool {
        self.joints.iter().flatten().all(|c| c.is_finite())
    }

    /// Bone vector from `child`'s parent to `child`. Panics on the wrist.
    pub fn bone(&self, child: usize) -> Vector3<f64> {
        let parent = PARENT[child].expect("wrist has no bone");
        self.joint(child) - self.joint(parent)
    }

    /// True when every bone has strictly positive length.
    pub fn has_positive_bones(&self) -> bool {
        (1..JOINT_COUNT).all(|j| self.bone(j).norm() > 0.0)
    }

    /// Applies `f` to every joint position.
    pub fn map(&self, mut f: impl FnMut(Vector3<f64>) -> Vector3<f64>) -> Skeleton {
        let mut out = *self;
        for i in 0..JOINT_COUNT {
            out.set_joint(i, f(self.joint(i)));
        }
        out
    }

    pub fn translated(&self, t: Vector3<f64>) -> Skeleton {
        self.map(|p| p + t)
    }

    /// Rotates every joint about the camera origin.
    pub fn rotated(&self, r: &nalgebra::Rotation3<f64>) -> Skeleton {
        self.map(|p| r * p)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum SkeletonError {
    #[error("skeleton contains a non-finite coordinate")]
    NonFinite,
}

/// Pinhole camera intrinsics. Millimeter inputs, pixel outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<(), IntrinsicsError> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(IntrinsicsError::NonPositiveFocal);
        }
        if !self.cx.is_finite() || !self.cy.is_finite() {
            return Err(IntrinsicsError::NonFinitePrincipalPoint);
        }
        if self.width == 0 || self.height == 0 {
            return Err(IntrinsicsError::EmptyImage);
        }
        Ok(())
    }

    /// Projects a camera-frame point to pixel coordinates. The caller is
    /// responsible for ensuring z > 0.
    pub fn project(&self, p: Vector3<f64>) -> (f64, f64) {
        (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy)
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum IntrinsicsError {
    #[error("focal lengths must be finite and strictly positive")]
    NonPositiveFocal,
    #[error("principal point must be finite")]
    NonFinitePrincipalPoint,
    #[error("image dimensions must be at least 1x1")]
    EmptyImage,
}

/// One dataset frame: ground-truth skeleton plus capture metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Frame {
    pub frame_id: String,
    #[serde(rename = "joints")]
    pub skeleton: Skeleton,
    pub subject_id: String,
    pub object_id: Option<String>,
    pub intrinsics: Option<CameraIntrinsics>,
    pub sequence_id: Option<String>,
    pub time_index: Option<i64>,
}

/// One method prediction for a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Prediction {
    pub frame_id: String,
    #[serde(rename = "joints")]
    pub skeleton: Skeleton,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parent_table_matches_chain_layout() {
        assert_eq!(PARENT[0], None);
        for f in Finger::ALL {
            assert_eq!(PARENT[f.mcp()], Some(WRIST));
            assert_eq!(PARENT[f.pip()], Some(f.mcp()));
            assert_eq!(PARENT[f.dip()], Some(f.pip()));
            assert_eq!(PARENT[f.tip()], Some(f.dip()));
        }
        assert_eq!(Finger::Pinky.tip(), 20);
    }

    #[test]
    fn skeleton_rejects_non_finite() {
        let mut joints = [[0.0; 3]; JOINT_COUNT];
        joints[3][1] = f64::NAN;
        assert_eq!(Skeleton::try_new(joints), Err(SkeletonError::NonFinite));
    }

    #[test]
    fn frame_serde_round_trip() {
        let mut joints = [[0.0; 3]; JOINT_COUNT];
        for (i, j) in joints.iter_mut().enumerate() {
            j[0] = i as f64;
            j[2] = 400.0;
        }
        let frame = Frame {
            frame_id: "f0".into(),
            skeleton: Skeleton::try_new(joints).unwrap(),
            subject_id: "s1".into(),
            object_id: None,
            intrinsics: Some(CameraIntrinsics {
                fx: 475.0,
                fy: 475.0,
                cx: 320.0,
                cy: 240.0,
                width: 640,
                height: 480,
            }),
            sequence_id: Some("seq0".into()),
            time_index: Some(4),
        };
        let line = serde_json::to_string(&frame).unwrap();
        assert!(line.contains("\"joints\":[[0.0,0.0,400.0]"));
        let back: Frame = serde_json::from_str(&line).unwrap();
        assert_eq!(back, frame);
    }

    #[test]
    fn intrinsics_validation() {
        let good = CameraIntrinsics { fx: 475.0, fy: 475.0, cx: 320.0, cy: 240.0, width: 640, height: 480 };
        assert!(good.validate().is_ok());
        let bad = CameraIntrinsics { fx: 0.0, ..good };
        assert_eq!(bad.validate(), Err(IntrinsicsError::NonPositiveFocal));
        let bad = CameraIntrinsics { width: 0, ..good };
        assert_eq!(bad.validate(), Err(IntrinsicsError::EmptyImage));
    }

    #[test]
    fn bone_vectors_and_validity() {
        let mut joints = [[0.0; 3]; JOINT_COUNT];
        for (i, j) in joints.iter_mut().enumerate() {
            j[1] = i as f64 * 10.0;
        }
        let s = Skeleton::try_new(joints).unwrap();
        assert!(s.has_positive_bones());
        assert_eq!(s.bone(1), Vector3::new(0.0, 10.0, 0.0));
        let mut degenerate = joints;
        degenerate[2] = degenerate[1];
        assert!(!Skeleton::try_new(degenerate).unwrap().has_positive_bones());
    }
}
