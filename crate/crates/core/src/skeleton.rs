//! Joint hierarchy, forward kinematics and linear blend skinning.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{area_resample, axis_angle_matrix, nearest_rotation, quat_to_matrix, Quat};
use crate::uvmap::{GaussianMapSet, Influences};

const SINGULAR_DET: f64 = 1e-9;
pub const DEFAULT_EMBEDDING_RES: usize = 64;
pub const DEFAULT_MASK_THRESHOLD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Joint {
    pub name: String,
    pub parent: Option<usize>,
    pub rest_translation: [f64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joints: Vec<Joint>,
    bind_inverse: Vec<Matrix4<f64>>,
}

#[derive(Serialize, Deserialize)]
struct SkeletonFile {
    joints: Vec<Joint>,
}

impl Skeleton {
    pub fn new(joints: Vec<Joint>) -> Result<Self> {
        if joints.is_empty() {
            return Err(Error::InvalidSkeleton("no joints".into()));
        }
        for (i, j) in joints.iter().enumerate() {
            match (i, j.parent) {
                (0, None) => {}
                (0, Some(_)) => return Err(Error::InvalidSkeleton(format!("joint 0 ({}) must be the root", j.name))),
                (_, None) => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {i} ({}) is a second root",
                        j.name
                    )))
                }
                (_, Some(p)) if p >= i => {
                    return Err(Error::InvalidSkeleton(format!(
                        "joint {i} ({}) has parent {p}; parents must precede children",
                        j.name
                    )))
                }
                _ => {}
            }
            if j.rest_translation.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSkeleton(format!("joint {i} has a non-finite offset")));
            }
        }
        let mut bind: Vec<Matrix4<f64>> = Vec::with_capacity(joints.len());
        for j in &joints {
            let local = translation(&j.rest_translation);
            let world = match j.parent {
                Some(p) => bind[p] * local,
                None => local,
            };
            bind.push(world);
        }
        let bind_inverse = bind.iter().map(rigid_inverse).collect();
        Ok(Skeleton { joints, bind_inverse })
    }

    pub fn joints(&self) -> &[Joint] {
        &self.joints
    }

    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    /// Length of the pose vector: three axis-angle components per non-root
    /// joint.
    pub fn pose_len(&self) -> usize {
        3 * (self.joints.len() - 1)
    }

    pub fn joint_index(&self, name: &str) -> Option<usize> {
        self.joints.iter().position(|j| j.name == name)
    }

    pub fn from_json(text: &str) -> std::result::Result<Result<Self>, serde_json::Error> {
        let file: SkeletonFile = serde_json::from_str(text)?;
        Ok(Skeleton::new(file.joints))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&SkeletonFile {
            joints: self.joints.clone(),
        })
        .expect("skeleton serialises")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Skeleton::from_json(&text).map_err(|e| Error::json(path, e))?
    }
}

fn translation(t: &[f64; 3]) -> Matrix4<f64> {
    Matrix4::new_translation(&Vector3::new(t[0], t[1], t[2]))
}

/// Inverse of a rigid (rotation + translation) transform.
pub fn rigid_inverse(m: &Matrix4<f64>) -> Matrix4<f64> {
    let r = m.fixed_view::<3, 3>(0, 0).transpose();
    let t = -(r * m.fixed_view::<3, 1>(0, 3));
    let mut out = Matrix4::identity();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    out.fixed_view_mut::<3, 1>(0, 3).copy_from(&t);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseVector {
    /// Axis-angle rotation of every non-root joint, in joint order.
    pub theta: Vec<f64>,
    /// World placement of the root.
    pub root_transform: Matrix4<f64>,
}

impl PoseVector {
    pub fn zero(skeleton: &Skeleton) -> Self {
        PoseVector {
            theta: vec![0.0; skeleton.pose_len()],
            root_transform: Matrix4::identity(),
        }
    }

    pub fn joint_axis_angle(&self, joint: usize) -> Vector3<f64> {
        let k = 3 * (joint - 1);
        Vector3::new(self.theta[k], self.theta[k + 1], self.theta[k + 2])
    }

    /// Zeroes the rotation of the listed (non-root) joints.
    pub fn neutralize(&mut self, joints: &[usize]) {
        for &j in joints {
            if j > 0 && 3 * j <= self.theta.len() {
                self.theta[3 * (j - 1)..3 * j].fill(0.0);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointTransforms {
    pub world: Vec<Matrix4<f64>>,
    /// `world * bind_inverse` per joint.
    pub skinning: Vec<Matrix4<f64>>,
}

pub fn forward_kinematics(skeleton: &Skeleton, pose: &PoseVector) -> Result<JointTransforms> {
    if pose.theta.len() != skeleton.pose_len() {
        return Err(Error::mismatch("pose length", skeleton.pose_len(), pose.theta.len()));
    }
    if pose.theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("pose contains non-finite angles".into()));
    }
    let mut world: Vec<Matrix4<f64>> = Vec::with_capacity(skeleton.joint_count());
    for (i, j) in skeleton.joints.iter().enumerate() {
        let local = translation(&j.rest_translation);
        let w = match j.parent {
            None => pose.root_transform * local,
            Some(p) => {
                let rot = axis_angle_matrix(&pose.joint_axis_angle(i)).to_homogeneous();
                world[p] * local * rot
            }
        };
        world.push(w);
    }
    let skinning = world.iter().zip(&skeleton.bind_inverse).map(|(w, b)| w * b).collect();
    Ok(JointTransforms { world, skinning })
}

/// Weighted blend of the skinning matrices: linear part and translation.
pub fn blend_transforms(influences: &Influences, transforms: &JointTransforms) -> (Matrix3<f64>, Vector3<f64>) {
    let mut a = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for (j, w) in influences.iter() {
        let m = &transforms.skinning[j];
        a += m.fixed_view::<3, 3>(0, 0) * w;
        b += m.fixed_view::<3, 1>(0, 3) * w;
    }
    (a, b)
}

pub fn lbs_point(p: &Vector3<f64>, influences: &Influences, transforms: &JointTransforms) -> Vector3<f64> {
    let (a, b) = blend_transforms(influences, transforms);
    a * p + b
}

/// Linear part used to pose rotations: the blend itself, or its nearest
/// rotation when the blend is numerically singular. The flag reports the
/// fallback.
pub fn rotation_blend(blend: &Matrix3<f64>) -> (Matrix3<f64>, bool) {
    if blend.determinant().abs() < SINGULAR_DET {
        (nearest_rotation(blend), true)
    } else {
        (*blend, false)
    }
}

/// Posed rotation `A * R(q)`; not re-orthonormalised.
pub fn lbs_rotation(blend: &Matrix3<f64>, q: &Quat) -> (Matrix3<f64>, bool) {
    let (a, fallback) = rotation_blend(blend);
    (a * quat_to_matrix(q), fallback)
}

/// Skins the base positions (no corrections) of every valid texel. Invalid
/// texels are zero.
pub fn posed_vertex_map(maps: &GaussianMapSet, transforms: &JointTransforms) -> Vec<f64> {
    let mut out = vec![0.0; 3 * maps.pixel_count()];
    for i in 0..maps.pixel_count() {
        if !maps.valid[i] {
            continue;
        }
        let p = lbs_point(&maps.position(i), &maps.skin[i], transforms);
        out[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
    }
    out
}

/// Area-averaged downsample of a 3-channel texel map over valid texels.
pub fn downsample_vertex_map(maps: &GaussianMapSet, vertex_map: &[f64], resolution: usize) -> Vec<f64> {
    area_resample(
        vertex_map,
        maps.width,
        maps.height,
        3,
        resolution,
        resolution,
        Some(&maps.valid),
    )
}

/// Per-joint skin weights resampled to `resolution x resolution`, laid out
/// `[pixel][joint]`. Invalid texels count as zero weight.
pub fn downsampled_skin_weights(maps: &GaussianMapSet, joint_count: usize, resolution: usize) -> Vec<f64> {
    let mut dense = vec![0.0; maps.pixel_count() * joint_count];
    for i in 0..maps.pixel_count() {
        if !maps.valid[i] {
            continue;
        }
        for (j, w) in maps.skin[i].iter() {
            if j < joint_count {
                dense[i * joint_count + j] += w;
            }
        }
    }
    area_resample(
        &dense,
        maps.width,
        maps.height,
        joint_count,
        resolution,
        resolution,
        None,
    )
}

/// Binary masks (one per non-root joint) of where that joint's downsampled
/// skin weight exceeds `threshold`; `[pixel][joint - 1]`.
pub fn joint_masks(downsampled_weights: &[f64], joint_count: usize, threshold: f64) -> Vec<bool> {
    let pixels = downsampled_weights.len() / joint_count;
    let mut out = vec![false; pixels * (joint_count - 1)];
    for p in 0..pixels {
        for j in 1..joint_count {
            out[p * (joint_count - 1) + j - 1] = downsampled_weights[p * joint_count + j] > threshold;
        }
    }
    out
}

/// Tiles the pose vector over the grid: channels `3(j-1)..3j` carry joint
/// `j`'s axis-angle wherever its mask is set and zero elsewhere.
pub fn pose_theta_embedding(pose: &PoseVector, masks: &[bool], joint_count: usize) -> Vec<f64> {
    let nj = joint_count - 1;
    let pixels = masks.len() / nj.max(1);
    let ch = 3 * nj;
    let mut out = vec![0.0; pixels * ch];
    for p in 0..pixels {
        for j in 0..nj {
            if masks[p * nj + j] {
                out[p * ch + 3 * j..p * ch + 3 * j + 3].copy_from_slice(&pose.theta[3 * j..3 * j + 3]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::is_orthonormal;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn chain(offsets: &[[f64; 3]]) -> Skeleton {
        Skeleton::new(
            offsets
                .iter()
                .enumerate()
                .map(|(i, o)| Joint {
                    name: format!("j{i}"),
                    parent: i.checked_sub(1),
                    rest_translation: *o,
                })
                .collect(),
        )
        .unwrap()
    }

    fn rz(deg: f64) -> Matrix4<f64> {
        axis_angle_matrix(&Vector3::new(0.0, 0.0, deg.to_radians())).to_homogeneous()
    }

    #[test]
    fn zero_pose_gives_identity_skinning() {
        let s = chain(&[[0.1, 0.2, 0.3], [0.0, 1.0, 0.0], [0.5, 0.0, 0.0]]);
        let t = forward_kinematics(&s, &PoseVector::zero(&s)).unwrap();
        for m in &t.skinning {
            assert_relative_eq!(*m, Matrix4::identity(), epsilon = 1e-15);
        }
    }

    #[test]
    fn rotated_root_moves_child() {
        let s = chain(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let pose = PoseVector {
            theta: vec![0.0; 3],
            root_transform: rz(90.0),
        };
        let t = forward_kinematics(&s, &pose).unwrap();
        let origin = t.world[1].fixed_view::<3, 1>(0, 3).into_owned();
        assert_relative_eq!(origin, Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn pose_length_mismatch_reports_both() {
        let s = chain(&[[0.0; 3], [1.0, 0.0, 0.0]]);
        let pose = PoseVector {
            theta: vec![0.0; 5],
            root_transform: Matrix4::identity(),
        };
        match forward_kinematics(&s, &pose) {
            Err(Error::DimensionMismatch { expected, actual, .. }) => {
                assert_eq!((expected, actual), (3, 5))
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_topology() {
        let j = |name: &str, parent| Joint {
            name: name.into(),
            parent,
            rest_translation: [0.0; 3],
        };
        assert!(Skeleton::new(vec![j("a", None), j("b", None)]).is_err());
        assert!(Skeleton::new(vec![j("a", None), j("b", Some(1))]).is_err());
        assert!(Skeleton::new(vec![j("a", Some(0))]).is_err());
    }

    fn translate_joint(z: f64) -> JointTransforms {
        let m = Matrix4::new_translation(&Vector3::new(0.0, 0.0, z));
        JointTransforms {
            world: vec![Matrix4::identity(), m],
            skinning: vec![Matrix4::identity(), m],
        }
    }

    #[test]
    fn lbs_point_examples() {
        let p = Vector3::new(0.3, -0.2, 0.5);
        let t = translate_joint(2.0);
        let ident = Influences::from_dense(&[(0, 1.0)]);
        assert_eq!(lbs_point(&p, &ident, &t), p);
        let moved = Influences::from_dense(&[(1, 1.0)]);
        assert_relative_eq!(lbs_point(&p, &moved, &t), p + Vector3::new(0.0, 0.0, 2.0));
        let half = Influences::from_dense(&[(0, 0.5), (1, 0.5)]);
        assert_relative_eq!(lbs_point(&p, &half, &t), p + Vector3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn lbs_rotation_examples() {
        let q = [0.9, 0.1, -0.3, 0.2];
        let n = crate::geometry::quat_norm(&q);
        let q = q.map(|v| v / n);
        let (r, fb) = lbs_rotation(&Matrix3::identity(), &q);
        assert!(!fb);
        assert_relative_eq!(r, quat_to_matrix(&q), epsilon = 1e-15);

        let joint = axis_angle_matrix(&Vector3::new(0.2, 0.4, -0.1));
        let (r, _) = lbs_rotation(&joint, &crate::geometry::IDENTITY_QUAT);
        assert_relative_eq!(r, joint, epsilon = 1e-15);

        // averaging identity with a half turn about z, by hand: diag(0, 0, 1)
        let half_turn = Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0));
        let blend = (Matrix3::identity() + half_turn) * 0.5;
        assert_eq!(blend, Matrix3::from_diagonal(&Vector3::new(0.0, 0.0, 1.0)));
        let (r, fb) = lbs_rotation(&blend, &crate::geometry::IDENTITY_QUAT);
        assert!(fb);
        assert!(is_orthonormal(&r, 1e-9));
    }

    #[test]
    fn embedding_fills_masked_regions() {
        let s = chain(&[[0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
        let mut pose = PoseVector::zero(&s);
        // two pixels; joint 1 active on the first, joint 2 never active
        let masks = vec![true, false, false, false];
        assert!(pose_theta_embedding(&pose, &masks, 3).iter().all(|&v| v == 0.0));
        pose.theta = vec![0.1, 0.2, 0.3, 0.7, 0.8, 0.9];
        let e = pose_theta_embedding(&pose, &masks, 3);
        assert_eq!(e, vec![0.1, 0.2, 0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn skinning_matrices_are_rigid(theta in prop::collection::vec(-3.0f64..3.0, 9)) {
            let s = chain(&[[0.0; 3], [0.0, 0.4, 0.0], [0.0, 0.4, 0.1], [0.3, 0.0, 0.0]]);
            let pose = PoseVector { theta, root_transform: rz(33.0) };
            let t = forward_kinematics(&s, &pose).unwrap();
            for m in &t.skinning {
                prop_assert!(is_orthonormal(&m.fixed_view::<3, 3>(0, 0).into_owned(), 1e-5));
            }
        }

        #[test]
        fn lbs_point_is_linear(
            a in prop::array::uniform3(-2.0f64..2.0),
            b in prop::array::uniform3(-2.0f64..2.0),
            theta in prop::collection::vec(-2.0f64..2.0, 3),
            w in 0.0f64..1.0,
            k in -3.0f64..3.0,
        ) {
            let s = chain(&[[0.0; 3], [0.0, 1.0, 0.0]]);
            let pose = PoseVector { theta, root_transform: rz(10.0) };
            let t = forward_kinematics(&s, &pose).unwrap();
            let inf = Influences::from_dense(&[(0, w), (1, 1.0 - w)]);
            let (a, b) = (Vector3::from(a), Vector3::from(b));
            let (blend, _) = blend_transforms(&inf, &t);
            // affine map: the linear part obeys superposition
            let lhs = lbs_point(&(a + b * k), &inf, &t) - lbs_point(&Vector3::zeros(), &inf, &t);
            let rhs = blend * a + blend * b * k;
            let scale = 1.0 + rhs.norm();
            prop_assert!((lhs - rhs).norm() <= 1e-9 * scale);
        }
    }
}
