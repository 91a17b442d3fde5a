//! Differentiable parametric hand: a capsule-based template mesh around a
//! canonical flat-hand skeleton, deformed by shape coefficients, posed by
//! per-joint axis-angle rotations through linear blend skinning, then
//! placed by a global similarity transform.
//!
//! Parameter layout (63 values):
//! * `s` — 10 shape coefficients, zero-mean convention, each scaling bone
//!   groups along one synthetic principal direction;
//! * `c` — 8 global values: unit quaternion (w, x, y, z), translation in
//!   mm, log-scale;
//! * `a` — 45 axis-angle radians: 15 articulated joints (per finger MCP,
//!   PIP, DIP in thumb..pinky order, tips carry no parameters) times 3.
//!
//! Rotations are expressed in template coordinates of each joint's subtree
//! and act about the shaped joint position, so the regressed skeleton of a
//! posed mesh reproduces exact forward kinematics (joint rings are
//! symmetric around their joint).

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::data::{Finger, Skeleton, FINGER_COUNT, JOINT_COUNT, WRIST};

pub const SHAPE_DIM: usize = 10;
pub const GLOBAL_DIM: usize = 8;
pub const ARTIC_DIM: usize = 45;
pub const PARAM_DIM: usize = SHAPE_DIM + GLOBAL_DIM + ARTIC_DIM;

/// Articulated bones: the wrist root plus MCP, PIP, DIP per finger.
pub const BONE_COUNT: usize = 1 + 3 * FINGER_COUNT;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ParamError {
    #[error("quaternion norm too small to normalize")]
    DegenerateQuaternion,
    #[error("parameter block has wrong length: {0}")]
    BlockLength(String),
    #[error("non-finite parameter value")]
    NonFinite,
}

/// Full hand parameter vector. Constructors normalize the quaternion and
/// wrap articulation components to [-pi, pi].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamBlocks", into = "ParamBlocks")]
pub struct HandParams {
    shape: [f64; SHAPE_DIM],
    rot: [f64; 4],
    trans: [f64; 3],
    log_scale: f64,
    artic: [f64; ARTIC_DIM],
}

#[derive(Serialize, Deserialize)]
struct ParamBlocks {
    s: Vec<f64>,
    c: Vec<f64>,
    a: Vec<f64>,
}

impl From<HandParams> for ParamBlocks {
    fn from(p: HandParams) -> Self {
        ParamBlocks { s: p.shape.to_vec(), c: p.c_block().to_vec(), a: p.artic.to_vec() }
    }
}

impl TryFrom<ParamBlocks> for HandParams {
    type Error = ParamError;

    fn try_from(b: ParamBlocks) -> Result<Self, Self::Error> {
        let shape: [f64; SHAPE_DIM] =
            b.s.try_into().map_err(|_| ParamError::BlockLength("s".into()))?;
        let c: [f64; GLOBAL_DIM] =
            b.c.try_into().map_err(|_| ParamError::BlockLength("c".into()))?;
        let artic: [f64; ARTIC_DIM] =
            b.a.try_into().map_err(|_| ParamError::BlockLength("a".into()))?;
        HandParams::try_new(shape, c, artic)
    }
}

fn wrap_angle(x: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let w = x - two_pi * (x / two_pi).round();
    // round() can land exactly on pi; keep the representative in [-pi, pi].
    if w < -std::f64::consts::PI {
        w + two_pi
    } else if w > std::f64::consts::PI {
        w - two_pi
    } else {
        w
    }
}

impl HandParams {
    pub fn try_new(
        shape: [f64; SHAPE_DIM],
        c: [f64; GLOBAL_DIM],
        artic: [f64; ARTIC_DIM],
    ) -> Result<Self, ParamError> {
        if shape.iter().chain(c.iter()).chain(artic.iter()).any(|v| !v.is_finite()) {
            return Err(ParamError::NonFinite);
        }
        let qn = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2] + c[3] * c[3]).sqrt();
        if qn < 1e-12 {
            return Err(ParamError::DegenerateQuaternion);
        }
        let rot = [c[0] / qn, c[1] / qn, c[2] / qn, c[3] / qn];
        let mut wrapped = artic;
        for v in &mut wrapped {
            *v = wrap_angle(*v);
        }
        Ok(HandParams {
            shape,
            rot,
            trans: [c[4], c[5], c[6]],
            log_scale: c[7],
            artic: wrapped,
        })
    }

    /// Identity pose: zero shape, identity rotation, zero translation,
    /// unit scale, zero articulation.
    pub fn neutral() -> Self {
        let mut c = [0.0; GLOBAL_DIM];
        c[0] = 1.0;
        HandParams::try_new([0.0; SHAPE_DIM], c, [0.0; ARTIC_DIM]).unwrap()
    }

    pub fn shape(&self) -> &[f64; SHAPE_DIM] {
        &self.shape
    }

    pub fn rotation(&self) -> &[f64; 4] {
        &self.rot
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.trans)
    }

    pub fn log_scale(&self) -> f64 {
        self.log_scale
    }

    pub fn artic(&self) -> &[f64; ARTIC_DIM] {
        &self.artic
    }

    /// The 8-value global block `[qw, qx, qy, qz, tx, ty, tz, log_scale]`.
    pub fn c_block(&self) -> [f64; GLOBAL_DIM] {
        [
            self.rot[0], self.rot[1], self.rot[2], self.rot[3],
            self.trans[0], self.trans[1], self.trans[2], self.log_scale,
        ]
    }

    pub fn with_translation(mut self, t: Vector3<f64>) -> Self {
        self.trans = [t.x, t.y, t.z];
        self
    }

    pub fn with_shape(mut self, shape: [f64; SHAPE_DIM]) -> Self {
        self.shape = shape;
        self
    }

    /// Sets one joint's axis-angle rotation (angle in radians about `axis`).
    pub fn with_joint_rotation(mut self, finger: Finger, level: usize, axis: Vector3<f64>, angle: f64) -> Self {
        assert!(level < 3, "level must be MCP=0, PIP=1 or DIP=2");
        let v = axis.normalize() * angle;
        let base = (3 * finger as usize + level) * 3;
        self.artic[base] = wrap_angle(v.x);
        self.artic[base + 1] = wrap_angle(v.y);
        self.artic[base + 2] = wrap_angle(v.z);
        self
    }

    /// Packs parameters as 63 values: s, quaternion, translation,
    /// log-scale, articulation.
    pub fn pack(&self) -> [f64; PARAM_DIM] {
        let mut out = [0.0; PARAM_DIM];
        out[..SHAPE_DIM].copy_from_slice(&self.shape);
        out[SHAPE_DIM..SHAPE_DIM + 4].copy_from_slice(&self.rot);
        out[SHAPE_DIM + 4..SHAPE_DIM + 7].copy_from_slice(&self.trans);
        out[SHAPE_DIM + 7] = self.log_scale;
        out[SHAPE_DIM + GLOBAL_DIM..].copy_from_slice(&self.artic);
        out
    }

    /// Inverse of [`pack`]; renormalizes the quaternion and wraps angles.
    pub fn unpack(v: &[f64; PARAM_DIM]) -> Result<Self, ParamError> {
        let mut shape = [0.0; SHAPE_DIM];
        shape.copy_from_slice(&v[..SHAPE_DIM]);
        let mut c = [0.0; GLOBAL_DIM];
        c.copy_from_slice(&v[SHAPE_DIM..SHAPE_DIM + GLOBAL_DIM]);
        let mut artic = [0.0; ARTIC_DIM];
        artic.copy_from_slice(&v[SHAPE_DIM + GLOBAL_DIM..]);
        HandParams::try_new(shape, c, artic)
    }
}

/// A posed mesh: vertex positions for a template's connectivity.
#[derive(Debug, Clone)]
pub struct Mesh {
    pub vertices: Vec<Vector3<f64>>,
}

#[derive(Debug, thiserror::Error)]
pub enum TemplateError {
    #[error("ring_segments must be at least 4, got {0}")]
    TooFewSegments(usize),
    #[error("template invariant violated: {0}")]
    Invariant(String),
    #[error("template file: {0}")]
    Format(String),
}

/// Canonical template: geometry, shape basis, skinning weights, joint
/// regressor and the derived uniform graph Laplacian.
#[derive(Debug, Clone)]
pub struct TemplateMesh {
    ring_segments: usize,
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    /// Per-vertex displacement per unit shape coefficient.
    shape_basis: Vec<[Vector3<f64>; SHAPE_DIM]>,
    /// Per-vertex (bone, weight) rows; each row sums to 1.
    skin: Vec<Vec<(usize, f64)>>,
    /// Per-joint (vertex, weight) rows; each row sums to 1.
    joint_regressor: [Vec<(usize, f64)>; JOINT_COUNT],
    rest_joints: [Vector3<f64>; JOINT_COUNT],
    /// Mesh adjacency (sorted), defining the umbrella Laplacian.
    neighbors: Vec<Vec<u32>>,
}

/// Canonical flat-hand joint positions, centered on the joint centroid.
/// Fingers lie in the z = 0 plane pointing along +y; the palm faces the
/// camera (palm normal -z).
pub fn canonical_joints() -> [Vector3<f64>; JOINT_COUNT] {
    // Per finger: MCP position, direction angle from +y toward +x (deg),
    // and the three segment lengths (mm).
    const FINGERS: [([f64; 2], f64, [f64; 3]); FINGER_COUNT] = [
        ([32.0, 30.0], 40.0, [34.0, 26.0, 23.0]),  // thumb
        ([24.0, 88.0], 10.0, [42.0, 26.0, 23.0]),  // index
        ([0.0, 92.0], 0.0, [46.0, 28.0, 25.0]),    // middle
        ([-22.0, 88.0], -8.0, [41.0, 26.0, 23.0]), // ring
        ([-41.0, 78.0], -20.0, [31.0, 21.0, 19.0]), // pinky
    ];
    let mut joints = [Vector3::zeros(); JOINT_COUNT];
    joints[WRIST] = Vector3::zeros();
    for (f, (mcp, angle_deg, segs)) in FINGERS.iter().enumerate() {
        let finger = Finger::ALL[f];
        let dir = {
            let a = angle_deg.to_radians();
            Vector3::new(a.sin(), a.cos(), 0.0)
        };
        let mcp = Vector3::new(mcp[0], mcp[1], 0.0);
        joints[finger.mcp()] = mcp;
        joints[finger.pip()] = mcp + dir * segs[0];
        joints[finger.dip()] = mcp + dir * (segs[0] + segs[1]);
        joints[finger.tip()] = mcp + dir * (segs[0] + segs[1] + segs[2]);
    }
    let centroid: Vector3<f64> = joints.iter().sum::<Vector3<f64>>() / JOINT_COUNT as f64;
    for j in &mut joints {
        *j -= centroid;
    }
    joints
}

/// Canonical flat-hand skeleton as a [`Skeleton`].
pub fn canonical_skeleton() -> Skeleton {
    let joints = canonical_joints();
    let mut arr = [[0.0; 3]; JOINT_COUNT];
    for (i, j) in joints.iter().enumerate() {
        arr[i] = [j.x, j.y, j.z];
    }
    Skeleton::from_joints(arr)
}

/// Unit palm normal of the canonical template: -z by construction.
pub fn canonical_palm_normal() -> Vector3<f64> {
    let j = canonical_joints();
    let n = (j[Finger::Middle.mcp()] - j[WRIST])
        .cross(&(j[Finger::Index.mcp()] - j[Finger::Ring.mcp()]));
    n.normalize()
}

/// Flexion axis for a finger: rotating by a positive angle about this axis
/// curls the finger toward the palm side. Derived from the canonical
/// geometry so template and annotator agree.
pub fn flexion_axis(finger: Finger) -> Vector3<f64> {
    let j = canonical_joints();
    let dir = (j[finger.pip()] - j[finger.mcp()]).normalize();
    dir.cross(&canonical_palm_normal()).normalize()
}

/// Joint displacement per unit shape coefficient (21 x 10 vectors).
///
/// Coefficients: 0 middle-chain length, 1 index, 2 ring, 3 pinky, 4 thumb;
/// 5 palm width, 6 palm length, 7 overall size, 8 distal-segment length,
/// 9 thumb splay. Chain coefficients move each distal joint 15% of its
/// offset from the finger MCP per unit.
pub fn joint_shape_directions() -> [[Vector3<f64>; SHAPE_DIM]; JOINT_COUNT] {
    const CHAIN: f64 = 0.15;
    const WIDTH: f64 = 0.15;
    const LENGTH: f64 = 0.15;
    const GLOBAL: f64 = 0.10;
    const DISTAL: f64 = 0.15;
    const SPLAY_MM: f64 = 10.0;

    let j = canonical_joints();
    let mut d = [[Vector3::zeros(); SHAPE_DIM]; JOINT_COUNT];
    let chain_owner = [Finger::Middle, Finger::Index, Finger::Ring, Finger::Pinky, Finger::Thumb];
    for (coeff, finger) in chain_owner.iter().enumerate() {
        for joint in [finger.pip(), finger.dip(), finger.tip()] {
            d[joint][coeff] = (j[joint] - j[finger.mcp()]) * CHAIN;
        }
    }
    for finger in Finger::ALL {
        let rel = j[finger.mcp()] - j[WRIST];
        for joint in [finger.mcp(), finger.pip(), finger.dip(), finger.tip()] {
            d[joint][5] = Vector3::new(rel.x * WIDTH, 0.0, 0.0);
            d[joint][6] = Vector3::new(0.0, rel.y * LENGTH, 0.0);
        }
        d[finger.tip()][8] = (j[finger.tip()] - j[finger.dip()]) * DISTAL;
    }
    for joint in 0..JOINT_COUNT {
        d[joint][7] = (j[joint] - j[WRIST]) * GLOBAL;
    }
    for joint in [Finger::Thumb.mcp(), Finger::Thumb.pip(), Finger::Thumb.dip(), Finger::Thumb.tip()] {
        d[joint][9] = Vector3::new(SPLAY_MM, 0.0, 0.0);
    }
    d
}

/// Skeleton joint driven by an articulated bone (1..=15).
pub(crate) fn bone_joint(bone: usize) -> usize {
    debug_assert!((1..BONE_COUNT).contains(&bone));
    let f = (bone - 1) / 3;
    let level = (bone - 1) % 3;
    1 + 4 * f + level
}

/// Parent bone of an articulated bone.
pub(crate) fn bone_parent(bone: usize) -> usize {
    if (bone - 1) % 3 == 0 {
        0
    } else {
        bone - 1
    }
}

struct MeshBuilder {
    vertices: Vec<Vector3<f64>>,
    faces: Vec<[u32; 3]>,
    shape_basis: Vec<[Vector3<f64>; SHAPE_DIM]>,
    skin: Vec<Vec<(usize, f64)>>,
    joint_dirs: [[Vector3<f64>; SHAPE_DIM]; JOINT_COUNT],
}

impl MeshBuilder {
    /// Adds a ring of `segments` vertices around `center` in the plane
    /// spanned by `u`/`v`. Shape displacement interpolates the two joint
    /// rows at parameter `t`; `skin` is shared by the whole ring.
    #[allow(clippy::too_many_arguments)]
    fn ring(
        &mut self,
        center: Vector3<f64>,
        u: Vector3<f64>,
        v: Vector3<f64>,
        ru: f64,
        rv: f64,
        segments: usize,
        bparam: (usize, usize, f64),
        skin: &[(usize, f64)],
    ) -> u32 {
        let first = self.vertices.len() as u32;
        let basis = self.blend_basis(bparam);
        for i in 0..segments {
            let phi = std::f64::consts::TAU * i as f64 / segments as f64;
            self.vertices.push(center + u * (ru * phi.cos()) + v * (rv * phi.sin()));
            self.shape_basis.push(basis);
            self.skin.push(skin.to_vec());
        }
        first
    }

    fn vertex(
        &mut self,
        p: Vector3<f64>,
        bparam: (usize, usize, f64),
        skin: &[(usize, f64)],
    ) -> u32 {
        let idx = self.vertices.len() as u32;
        self.vertices.push(p);
        self.shape_basis.push(self.blend_basis(bparam));
        self.skin.push(skin.to_vec());
        idx
    }

    fn blend_basis(&self, (a, b, t): (usize, usize, f64)) -> [Vector3<f64>; SHAPE_DIM] {
        let mut out = [Vector3::zeros(); SHAPE_DIM];
        for k in 0..SHAPE_DIM {
            out[k] = self.joint_dirs[a][k] * (1.0 - t) + self.joint_dirs[b][k] * t;
        }
        out
    }

    /// Closed tube between consecutive rings (equal segment counts).
    fn tube(&mut self, rings: &[u32], segments: usize) {
        for w in rings.windows(2) {
            let (r0, r1) = (w[0], w[1]);
            for i in 0..segments as u32 {
                let j = (i + 1) % segments as u32;
                self.faces.push([r0 + i, r0 + j, r1 + j]);
                self.faces.push([r0 + i, r1 + j, r1 + i]);
            }
        }
    }

    fn cap(&mut self, apex: u32, ring: u32, segments: usize, flip: bool) {
        for i in 0..segments as u32 {
            let j = (i + 1) % segments as u32;
            if flip {
                self.faces.push([apex, ring + j, ring + i]);
            } else {
                self.faces.push([apex, ring + i, ring + j]);
            }
        }
    }
}

/// Ring resolution of [`default_template`]. Coarser rings enlarge the
/// umbrella differentials and with them the Laplacian term's pull on the
/// fit; finer rings cost forward/gradient time linearly.
pub const DEFAULT_RING_SEGMENTS: usize = 12;

/// The deterministic default template at [`DEFAULT_RING_SEGMENTS`].
pub fn default_template() -> TemplateMesh {
    build_default_template(DEFAULT_RING_SEGMENTS).expect("default template is valid")
}

/// Builds the deterministic default template with `ring_segments` vertices
/// per cross-section ring.
pub fn build_default_template(ring_segments: usize) -> Result<TemplateMesh, TemplateError> {
    if ring_segments < 4 {
        return Err(TemplateError::TooFewSegments(ring_segments));
    }
    let s = ring_segments;
    let joints = canonical_joints();
    let mut b = MeshBuilder {
        vertices: Vec::new(),
        faces: Vec::new(),
        shape_basis: Vec::new(),
        skin: Vec::new(),
        joint_dirs: joint_shape_directions(),
    };
    let z = Vector3::new(0.0, 0.0, 1.0);
    let mut regressor_rings: [Option<u32>; JOINT_COUNT] = [None; JOINT_COUNT];

    // Finger base radii, tapering toward the tip.
    const RADII: [f64; FINGER_COUNT] = [10.5, 8.5, 8.8, 8.2, 7.0];
    for finger in Finger::ALL {
        let f = finger as usize;
        let mcp_bone = 1 + 3 * f;
        let (m, p, d, t) =
            (joints[finger.mcp()], joints[finger.pip()], joints[finger.dip()], joints[finger.tip()]);
        let dir = (t - m).normalize();
        let v = z.cross(&dir);
        let r0 = RADII[f];
        // Ring stations along the chain: joints and segment midpoints.
        let stations: [(Vector3<f64>, (usize, usize, f64), Vec<(usize, f64)>); 7] = [
            (m, (finger.mcp(), finger.mcp(), 0.0), vec![(0, 0.5), (mcp_bone, 0.5)]),
            ((m + p) * 0.5, (finger.mcp(), finger.pip(), 0.5), vec![(mcp_bone, 1.0)]),
            (p, (finger.pip(), finger.pip(), 0.0), vec![(mcp_bone, 0.5), (mcp_bone + 1, 0.5)]),
            ((p + d) * 0.5, (finger.pip(), finger.dip(), 0.5), vec![(mcp_bone + 1, 1.0)]),
            (d, (finger.dip(), finger.dip(), 0.0), vec![(mcp_bone + 1, 0.5), (mcp_bone + 2, 0.5)]),
            ((d + t) * 0.5, (finger.dip(), finger.tip(), 0.5), vec![(mcp_bone + 2, 1.0)]),
            (t, (finger.tip(), finger.tip(), 0.0), vec![(mcp_bone + 2, 1.0)]),
        ];
        let mut ring_starts = Vec::with_capacity(7);
        for (i, (center, bparam, skin)) in stations.iter().enumerate() {
            let r = r0 * (1.0 - 0.04 * i as f64);
            ring_starts.push(b.ring(*center, z, v, r, r, s, *bparam, skin));
        }
        regressor_rings[finger.mcp()] = Some(ring_starts[0]);
        regressor_rings[finger.pip()] = Some(ring_starts[2]);
        regressor_rings[finger.dip()] = Some(ring_starts[4]);
        regressor_rings[finger.tip()] = Some(ring_starts[6]);
        b.tube(&ring_starts, s);
        // Shallow caps: the cap apex's umbrella differential is roughly its
        // offset from the ring plane, so tall caps dominate the template's
        // Laplacian energy and bias the fit.
        let base_cap = b.vertex(
            m - dir * (0.25 * r0),
            (finger.mcp(), finger.mcp(), 0.0),
            &[(0, 1.0)],
        );
        let tip_r = r0 * (1.0 - 0.04 * 6.0);
        let tip_cap = b.vertex(
            t + dir * (0.3 * tip_r),
            (finger.tip(), finger.tip(), 0.0),
            &[(mcp_bone + 2, 1.0)],
        );
        b.cap(base_cap, ring_starts[0], s, true);
        b.cap(tip_cap, ring_starts[6], s, false);
    }

    // Palm: an elliptical tube from the wrist toward the middle MCP.
    {
        let w = joints[WRIST];
        let m = joints[Finger::Middle.mcp()];
        let dir = (m - w).normalize();
        let v = z.cross(&dir);
        let reach = 0.72;
        let rx = [26.0, 33.0, 40.0, 42.0];
        let rz = 13.0;
        let mut ring_starts = Vec::with_capacity(4);
        for (i, rxi) in rx.iter().enumerate() {
            let t = reach * i as f64 / 3.0;
            let center = w + (m - w) * t;
            ring_starts.push(b.ring(
                center,
                z,
                v,
                rz,
                *rxi,
                s,
                (WRIST, Finger::Middle.mcp(), t),
                &[(0, 1.0)],
            ));
        }
        regressor_rings[WRIST] = Some(ring_starts[0]);
        b.tube(&ring_starts, s);
        let base_cap = b.vertex(w - dir * 3.0, (WRIST, WRIST, 0.0), &[(0, 1.0)]);
        let top_cap = b.vertex(
            w + (m - w) * reach + dir * 3.0,
            (WRIST, Finger::Middle.mcp(), reach),
            &[(0, 1.0)],
        );
        b.cap(base_cap, ring_starts[0], s, true);
        b.cap(top_cap, ring_starts[3], s, false);
    }

    let mut joint_regressor: [Vec<(usize, f64)>; JOINT_COUNT] =
        std::array::from_fn(|_| Vec::new());
    for (j, start) in regressor_rings.iter().enumerate() {
        let start = start.expect("every joint has a regressor ring") as usize;
        joint_regressor[j] = (start..start + s).map(|v| (v, 1.0 / s as f64)).collect();
    }

    let neighbors = adjacency(b.vertices.len(), &b.faces);
    let tpl = TemplateMesh {
        ring_segments: s,
        vertices: b.vertices,
        faces: b.faces,
        shape_basis: b.shape_basis,
        skin: b.skin,
        joint_regressor,
        rest_joints: joints,
        neighbors,
    };
    tpl.validate()?;
    Ok(tpl)
}

fn adjacency(vertex_count: usize, faces: &[[u32; 3]]) -> Vec<Vec<u32>> {
    let mut sets: Vec<std::collections::BTreeSet<u32>> = vec![Default::default(); vertex_count];
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            sets[a as usize].insert(b);
            sets[b as usize].insert(a);
        }
    }
    sets.into_iter().map(|s| s.into_iter().collect()).collect()
}

impl TemplateMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn ring_segments(&self) -> usize {
        self.ring_segments
    }

    pub fn vertices(&self) -> &[Vector3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub(crate) fn shape_basis(&self) -> &[[Vector3<f64>; SHAPE_DIM]] {
        &self.shape_basis
    }

    pub(crate) fn skin(&self) -> &[Vec<(usize, f64)>] {
        &self.skin
    }

    pub(crate) fn regressor(&self) -> &[Vec<(usize, f64)>; JOINT_COUNT] {
        &self.joint_regressor
    }

    pub(crate) fn neighbors(&self) -> &[Vec<u32>] {
        &self.neighbors
    }

    pub fn rest_joints(&self) -> &[Vector3<f64>; JOINT_COUNT] {
        &self.rest_joints
    }

    /// Shape displacement of each regressed joint per unit coefficient,
    /// i.e. the regressor applied to the shape basis.
    pub(crate) fn regressed_shape_basis(&self) -> [[Vector3<f64>; SHAPE_DIM]; JOINT_COUNT] {
        let mut out = [[Vector3::zeros(); SHAPE_DIM]; JOINT_COUNT];
        for (j, row) in self.joint_regressor.iter().enumerate() {
            for &(v, w) in row {
                for k in 0..SHAPE_DIM {
                    out[j][k] += self.shape_basis[v][k] * w;
                }
            }
        }
        out
    }

    fn validate(&self) -> Result<(), TemplateError> {
        let n = self.vertices.len();
        let err = |m: String| Err(TemplateError::Invariant(m));
        if self.faces.iter().flatten().any(|&i| i as usize >= n) {
            return err("face index out of range".into());
        }
        if self.shape_basis.len() != n || self.skin.len() != n || self.neighbors.len() != n {
            return err("per-vertex table length mismatch".into());
        }
        for (i, row) in self.skin.iter().enumerate() {
            let sum: f64 = row.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return err(format!("skin weights of vertex {i} sum to {sum}"));
            }
            if row.iter().any(|&(bone, w)| bone >= BONE_COUNT || w < 0.0) {
                return err(format!("invalid skin entry on vertex {i}"));
            }
        }
        for (j, row) in self.joint_regressor.iter().enumerate() {
            if row.is_empty() {
                return err(format!("joint {j} has an empty regressor row"));
            }
            let sum: f64 = row.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > 1e-9 {
                return err(format!("regressor row {j} sums to {sum}"));
            }
            if row.iter().any(|&(v, _)| v >= n) {
                return err(format!("regressor row {j} references a missing vertex"));
            }
        }
        if self.vertices.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
            return err("non-finite vertex".into());
        }
        Ok(())
    }

    /// Applies the joint regressor to arbitrary vertex positions.
    pub fn regress_vertices(&self, vertices: &[Vector3<f64>]) -> [Vector3<f64>; JOINT_COUNT] {
        let mut joints = [Vector3::zeros(); JOINT_COUNT];
        for (j, row) in self.joint_regressor.iter().enumerate() {
            for &(v, w) in row {
                joints[j] += vertices[v] * w;
            }
        }
        joints
    }
}

/// Geometrically regresses the 21-joint skeleton from mesh vertices with
/// the template's fixed weights.
pub fn regress_skeleton(tpl: &TemplateMesh, mesh: &Mesh) -> Skeleton {
    let joints = tpl.regress_vertices(&mesh.vertices);
    let mut arr = [[0.0; 3]; JOINT_COUNT];
    for (i, j) in joints.iter().enumerate() {
        arr[i] = [j.x, j.y, j.z];
    }
    Skeleton::from_joints(arr)
}

/// Uniform umbrella-operator Laplacian energy ||L v||^2 where
/// (L v)_i = v_i - mean of v over i's neighbors.
pub fn laplacian_energy(tpl: &TemplateMesh, mesh: &Mesh) -> f64 {
    laplacian_apply(tpl, &mesh.vertices).iter().map(|r| r.norm_squared()).sum()
}

pub(crate) fn laplacian_apply(tpl: &TemplateMesh, verts: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    tpl.neighbors()
        .iter()
        .enumerate()
        .map(|(i, nb)| {
            if nb.is_empty() {
                return Vector3::zeros();
            }
            let mean: Vector3<f64> =
                nb.iter().map(|&j| verts[j as usize]).sum::<Vector3<f64>>() / nb.len() as f64;
            verts[i] - mean
        })
        .collect()
}

/// Per-bone affine transforms of the kinematic chain: `out[k] = (A_k, b_k)`
/// such that a template point x skinned rigidly to bone k lands at
/// `A_k x + b_k` (before the global similarity).
pub(crate) fn bone_transforms(
    rest: &[Vector3<f64>; JOINT_COUNT],
    artic: &[f64; ARTIC_DIM],
) -> [(Matrix3<f64>, Vector3<f64>); BONE_COUNT] {
    let mut out = [(Matrix3::identity(), Vector3::zeros()); BONE_COUNT];
    for bone in 1..BONE_COUNT {
        let parent = bone_parent(bone);
        let joint = rest[bone_joint(bone)];
        let base = (bone - 1) * 3;
        let r = rodrigues(&[artic[base], artic[base + 1], artic[base + 2]]);
        let (ap, bp) = out[parent];
        let a = ap * r;
        let b = bp + ap * joint - a * joint;
        out[bone] = (a, b);
    }
    out
}

/// Poses the template: shape blend, linear blend skinning, then the global
/// similarity `x -> exp(log_scale) * R_q x + t`.
pub fn forward(tpl: &TemplateMesh, params: &HandParams) -> Mesh {
    let shaped: Vec<Vector3<f64>> = tpl
        .vertices()
        .iter()
        .zip(tpl.shape_basis())
        .map(|(v, basis)| {
            let mut p = *v;
            for (k, dir) in basis.iter().enumerate() {
                p += dir * params.shape()[k];
            }
            p
        })
        .collect();
    let rest = tpl.regress_vertices(&shaped);
    let bones = bone_transforms(&rest, params.artic());
    let rq = quat_matrix(params.rotation());
    let scale = params.log_scale().exp();
    let t = params.translation();
    let vertices = shaped
        .iter()
        .zip(tpl.skin())
        .map(|(v, row)| {
            let mut p = Vector3::zeros();
            for &(bone, w) in row {
                let (a, b) = bones[bone];
                p += (a * v + b) * w;
            }
            rq * p * scale + t
        })
        .collect();
    Mesh { vertices }
}

/// Skeleton of the posed mesh: the regressor applied to [`forward`].
pub fn forward_skeleton(tpl: &TemplateMesh, params: &HandParams) -> Skeleton {
    regress_skeleton(tpl, &forward(tpl, params))
}

/// Articulation vector for one of the 32 canonical open/closed poses.
/// Bit 4 (MSB) is the thumb through bit 0 the pinky; 1 = open (straight),
/// 0 = closed (curled past the curl threshold).
pub fn canonical_cluster_articulation(code: u8) -> [f64; ARTIC_DIM] {
    assert!(code < 32, "cluster codes are 5-bit");
    let mut artic = [0.0; ARTIC_DIM];
    for finger in Finger::ALL {
        let f = finger as usize;
        let open = (code >> (4 - f)) & 1 == 1;
        if open {
            continue;
        }
        let axis = flexion_axis(finger);
        for (level, angle_deg) in [(0usize, 55.0f64), (1, 70.0), (2, 50.0)] {
            let v = axis * angle_deg.to_radians();
            let base = (3 * f + level) * 3;
            artic[base] = v.x;
            artic[base + 1] = v.y;
            artic[base + 2] = v.z;
        }
    }
    artic
}

// Rotation helpers shared with the fitter.

/// Rodrigues rotation from an axis-angle vector.
pub(crate) fn rodrigues(a: &[f64; 3]) -> Matrix3<f64> {
    let v = Vector3::from(*a);
    let theta2 = v.norm_squared();
    let k = skew(&v);
    if theta2 < 1e-14 {
        // Second-order expansion; exact to machine precision here.
        Matrix3::identity() + k + k * k * 0.5
    } else {
        let theta = theta2.sqrt();
        Matrix3::identity() + k * (theta.sin() / theta) + k * k * ((1.0 - theta.cos()) / theta2)
    }
}

pub(crate) fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix of a unit quaternion (w, x, y, z).
pub(crate) fn quat_matrix(q: &[f64; 4]) -> Matrix3<f64> {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

// Template serialization.

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    format_version: String,
    ring_segments: usize,
    vertices: Vec<[f64; 3]>,
    faces: Vec<[u32; 3]>,
    shape_basis: Vec<Vec<[f64; 3]>>,
    skin: Vec<Vec<(usize, f64)>>,
    joint_regressor: Vec<Vec<(usize, f64)>>,
    rest_joints: Vec<[f64; 3]>,
}

pub const TEMPLATE_FORMAT: &str = "template.v1";

impl TemplateMesh {
    pub fn to_json(&self) -> serde_json::Value {
        let file = TemplateFile {
            format_version: TEMPLATE_FORMAT.to_string(),
            ring_segments: self.ring_segments,
            vertices: self.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            faces: self.faces.clone(),
            shape_basis: self
                .shape_basis
                .iter()
                .map(|row| row.iter().map(|v| [v.x, v.y, v.z]).collect())
                .collect(),
            skin: self.skin.clone(),
            joint_regressor: self.joint_regressor.to_vec(),
            rest_joints: self.rest_joints.iter().map(|v| [v.x, v.y, v.z]).collect(),
        };
        serde_json::to_value(file).expect("template serialization cannot fail")
    }

    pub fn from_json(value: serde_json::Value) -> Result<Self, TemplateError> {
        let file: TemplateFile =
            serde_json::from_value(value).map_err(|e| TemplateError::Format(e.to_string()))?;
        if file.format_version != TEMPLATE_FORMAT {
            return Err(TemplateError::Format(format!(
                "unsupported format_version {:?}",
                file.format_version
            )));
        }
        if file.joint_regressor.len() != JOINT_COUNT || file.rest_joints.len() != JOINT_COUNT {
            return Err(TemplateError::Format("joint table must have 21 rows".into()));
        }
        let to_vec3 = |a: &[f64; 3]| Vector3::new(a[0], a[1], a[2]);
        let shape_basis: Result<Vec<[Vector3<f64>; SHAPE_DIM]>, TemplateError> = file
            .shape_basis
            .iter()
            .map(|row| {
                if row.len() != SHAPE_DIM {
                    return Err(TemplateError::Format("shape basis row must have 10 entries".into()));
                }
                Ok(std::array::from_fn(|k| to_vec3(&row[k])))
            })
            .collect();
        let neighbors = adjacency(file.vertices.len(), &file.faces);
        let tpl = TemplateMesh {
            ring_segments: file.ring_segments,
            vertices: file.vertices.iter().map(to_vec3).collect(),
            faces: file.faces,
            shape_basis: shape_basis?,
            skin: file.skin,
            joint_regressor: std::array::from_fn(|j| file.joint_regressor[j].clone()),
            rest_joints: std::array::from_fn(|j| to_vec3(&file.rest_joints[j])),
            neighbors,
        };
        tpl.validate()?;
        Ok(tpl)
    }
}
