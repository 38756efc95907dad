//! Two-phase registration between the electromagnetic tracker frame and the
//! CT frame: paired-point fiducial registration, then correspondence-free
//! ICP against the airway skeleton, initialized by the fiducial result.

use std::io::{Read, Write};

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, SVD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::anatomy::{shapes::closest_on_segment, Scene};
use crate::error::{Error, Result};
use crate::geometry::{is_rotation, Pose, Vec3};

pub const DEFAULT_ICP_TOL: f64 = 1e-4;
pub const DEFAULT_ICP_MAX_ITER: usize = 100;

/// Rigid map `x ↦ R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Rotation3<f64>,
    pub translation: Vec3,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Rotation3::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Rotation3<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn from_pose(p: &Pose) -> Self {
        Self::new(p.orientation.to_rotation_matrix(), p.position)
    }

    pub fn to_pose(&self) -> Pose {
        Pose::new(self.translation, UnitQuaternion::from_rotation_matrix(&self.rotation))
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self::new(r, -(r * self.translation))
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &RigidTransform) -> Self {
        Self::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn is_valid(&self) -> bool {
        is_rotation(self.rotation.matrix(), 1e-9)
    }

    pub fn max_abs_diff(&self, other: &RigidTransform) -> f64 {
        let dr = (self.rotation.matrix() - other.rotation.matrix()).amax();
        let dt = (self.translation - other.translation).amax();
        dr.max(dt)
    }
}

#[derive(Serialize, Deserialize)]
struct RigidRepr {
    /// Row-major 3×3.
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let m = self.rotation.matrix();
        let row = |i: usize| [m[(i, 0)], m[(i, 1)], m[(i, 2)]];
        RigidRepr {
            rotation: [row(0), row(1), row(2)],
            translation: self.translation.into(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = RigidRepr::deserialize(d)?;
        let m = Matrix3::from_fn(|i, j| r.rotation[i][j]);
        if !is_rotation(&m, 1e-6) {
            return Err(serde::de::Error::custom("rotation is not orthonormal"));
        }
        Ok(RigidTransform::new(
            Rotation3::from_matrix_unchecked(m),
            Vec3::from(r.translation),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationResult {
    pub transform: RigidTransform,
    /// Root-mean-square paired residual under `transform`.
    pub fre: f64,
    pub iterations: usize,
    pub residual_history: Vec<f64>,
}

/// Expresses each probed sphere center in its coil frame:
/// `center_i = coil_pose_i⁻¹ ∘ tip_i`. Two readings landing on the same
/// sphere (centers within 1 mm) are rejected.
pub fn calibrate_fiducial(readings: &[(Vec3, Pose)]) -> Result<Vec<Vec3>> {
    if readings.len() != crate::anatomy::FIDUCIAL_SPHERES {
        return Err(Error::Precondition(format!(
            "expected {} probe readings, got {}",
            crate::anatomy::FIDUCIAL_SPHERES,
            readings.len()
        )));
    }
    let centers: Vec<Vec3> = readings
        .iter()
        .map(|(tip, coil)| coil.inverse().transform_point(tip))
        .collect();
    for i in 0..centers.len() {
        for j in (i + 1)..centers.len() {
            if (centers[i] - centers[j]).norm() < 1.0 {
                return Err(Error::Calibration(format!(
                    "readings {i} and {j} map to the same sphere"
                )));
            }
        }
    }
    Ok(centers)
}

fn centroid(points: &[Vec3]) -> Vec3 {
    points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / points.len() as f64
}

fn rms_residual(t: &RigidTransform, source: &[Vec3], dest: &[Vec3]) -> f64 {
    let sum: f64 = source
        .iter()
        .zip(dest)
        .map(|(s, d)| (t.apply(s) - d).norm_squared())
        .sum();
    (sum / source.len() as f64).sqrt()
}

/// Least-squares rigid transform taking `source[i]` onto `dest[i]`
/// (centroid alignment plus SVD of the cross-covariance, reflection corrected).
pub fn fit_point_registration(source: &[Vec3], dest: &[Vec3]) -> Result<RegistrationResult> {
    if source.len() != dest.len() {
        return Err(Error::Precondition(format!(
            "point count mismatch: {} vs {}",
            source.len(),
            dest.len()
        )));
    }
    if source.len() < 3 {
        return Err(Error::Precondition(format!(
            "need at least 3 point pairs, got {}",
            source.len()
        )));
    }
    let cs = centroid(source);
    let cd = centroid(dest);

    let mut scatter = Matrix3::zeros();
    let mut cross = Matrix3::zeros();
    for (s, d) in source.iter().zip(dest) {
        let a = s - cs;
        let b = d - cd;
        scatter += a * a.transpose();
        cross += a * b.transpose();
    }
    // collinear sources leave the rotation about that line undetermined
    let mut ev = scatter.symmetric_eigenvalues().as_slice().to_vec();
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 0.0 || ev[1] <= 1e-12 * ev[0] {
        return Err(Error::Degenerate("source points are collinear or coincident".into()));
    }

    let svd = SVD::new(cross, true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::Degenerate("SVD did not converge".into())),
    };
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vec3::new(1.0, 1.0, d)) * u.transpose();
    let rotation = Rotation3::from_matrix(&r);
    let translation = cd - rotation * cs;
    let transform = RigidTransform::new(rotation, translation);
    let fre = rms_residual(&transform, source, dest);
    Ok(RegistrationResult {
        transform,
        fre,
        iterations: 1,
        residual_history: vec![fre],
    })
}

/// Closest point on any skeleton segment, scanned in a fixed order.
pub fn closest_on_skeleton(skeleton: &[(Vec3, Vec3)], p: &Vec3) -> Vec3 {
    let mut best = skeleton[0].0;
    let mut best_d = f64::INFINITY;
    for (a, b) in skeleton {
        let q = closest_on_segment(a, b, p);
        let d = (q - p).norm_squared();
        if d < best_d {
            best_d = d;
            best = q;
        }
    }
    best
}

fn correspond(cloud: &[Vec3], skeleton: &[(Vec3, Vec3)], t: &RigidTransform) -> (Vec<Vec3>, f64) {
    let targets: Vec<Vec3> = cloud
        .par_iter()
        .map(|p| closest_on_skeleton(skeleton, &t.apply(p)))
        .collect();
    let rms = rms_residual(t, cloud, &targets);
    (targets, rms)
}

/// Point-to-polyline ICP. The history records the RMS distance to the
/// skeleton after each accepted update and never increases.
pub fn icp_refine(
    cloud: &[Vec3],
    skeleton: &[(Vec3, Vec3)],
    init: &RigidTransform,
    max_iter: usize,
    tol: f64,
) -> Result<RegistrationResult> {
    if cloud.is_empty() {
        return Err(Error::Precondition("empty point cloud".into()));
    }
    if cloud.len() < 10 {
        return Err(Error::Precondition(format!(
            "ICP needs at least 10 points, got {}",
            cloud.len()
        )));
    }
    if skeleton.is_empty() {
        return Err(Error::Precondition("empty skeleton".into()));
    }
    if !init.is_valid() {
        return Err(Error::Precondition("initial transform is not rigid".into()));
    }
    let mut t = *init;
    let (mut targets, mut rms) = correspond(cloud, skeleton, &t);
    let mut history = vec![rms];
    let mut iterations = 0;
    while iterations < max_iter {
        let fit = fit_point_registration(cloud, &targets)?;
        let (next_targets, next_rms) = correspond(cloud, skeleton, &fit.transform);
        iterations += 1;
        if next_rms > rms {
            // only reachable through rounding once converged
            break;
        }
        let improvement = rms - next_rms;
        t = fit.transform;
        targets = next_targets;
        rms = next_rms;
        history.push(rms);
        if improvement < tol {
            break;
        }
    }
    Ok(RegistrationResult {
        transform: t,
        fre: rms,
        iterations,
        residual_history: history,
    })
}

/// Smooth internal tissue shift that chest-wall fiducials cannot observe:
/// a small rigid motion about `center` plus a low-amplitude sinusoidal term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeformationField {
    pub center: [f64; 3],
    pub translation: [f64; 3],
    /// Axis-angle rotation vector (rad).
    pub rotation: [f64; 3],
    pub wave_amplitude: f64,
    pub wavelength: f64,
    pub phases: [f64; 3],
}

impl DeformationField {
    pub fn none() -> Self {
        Self {
            center: [0.0; 3],
            translation: [0.0; 3],
            rotation: [0.0; 3],
            wave_amplitude: 0.0,
            wavelength: 1.0,
            phases: [0.0; 3],
        }
    }

    /// Random field whose rigid translation has length `magnitude`.
    pub fn random(rng: &mut ChaCha8Rng, center: Vec3, magnitude: f64) -> Self {
        let dir = random_unit(rng);
        let axis = random_unit(rng);
        let angle = (magnitude / 3.0) * 1.0f64.to_radians() * rng.random_range(0.5..1.0);
        Self {
            center: center.into(),
            translation: (dir * magnitude).into(),
            rotation: (axis * angle).into(),
            wave_amplitude: 0.1 * magnitude,
            wavelength: 80.0,
            phases: [
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.0..std::f64::consts::TAU),
            ],
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        let c = Vec3::from(self.center);
        let rot = Rotation3::new(Vec3::from(self.rotation));
        let k = std::f64::consts::TAU / self.wavelength;
        let wave = Vec3::new(
            (k * p.y + self.phases[0]).sin(),
            (k * p.z + self.phases[1]).sin(),
            (k * p.x + self.phases[2]).sin(),
        ) * self.wave_amplitude;
        c + rot * (p - c) + Vec3::from(self.translation) + wave
    }
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec3 {
    let n = Normal::new(0.0, 1.0).unwrap();
    loop {
        let v = Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
        if v.norm() > 1e-6 {
            return v.normalize();
        }
    }
}

/// Random tracker placement: `em_to_ct` maps EM coordinates into the CT frame.
pub fn random_em_to_ct(rng: &mut ChaCha8Rng) -> RigidTransform {
    let axis = random_unit(rng);
    let angle = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let t = Vec3::new(
        rng.random_range(-200.0..200.0),
        rng.random_range(-200.0..200.0),
        rng.random_range(-200.0..200.0),
    );
    RigidTransform::new(Rotation3::new(axis * angle), t)
}

/// Parameters of the simulated intra-operative registration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrationSimConfig {
    /// Gaussian noise on sensed airway points (mm).
    pub cloud_noise: f64,
    /// Gaussian noise on sphere-center localization in each frame (mm).
    pub fiducial_noise: f64,
    /// Magnitude of the internal deformation field (mm).
    pub deformation: f64,
    /// Spacing of the sensed airway cloud along the skeleton (mm).
    pub cloud_spacing: f64,
    pub icp_max_iter: usize,
    pub icp_tol: f64,
}

impl Default for RegistrationSimConfig {
    fn default() -> Self {
        Self {
            cloud_noise: 0.5,
            fiducial_noise: 0.2,
            deformation: 3.0,
            cloud_spacing: 1.5,
            icp_max_iter: DEFAULT_ICP_MAX_ITER,
            icp_tol: DEFAULT_ICP_TOL,
        }
    }
}

/// Ground truth and estimates produced by one simulated registration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistrationOutcome {
    /// True EM → CT map for the chest wall.
    pub em_to_ct_true: RigidTransform,
    pub deformation: DeformationField,
    pub fiducial: RegistrationResult,
    pub icp: RegistrationResult,
}

impl RegistrationOutcome {
    /// Where a CT-frame anatomical point actually sits in the EM frame.
    pub fn ct_to_em_true(&self, p: &Vec3) -> Vec3 {
        self.em_to_ct_true.inverse().apply(&self.deformation.apply(p))
    }

    /// Target registration error of an EM → CT estimate at `p`.
    pub fn tre(&self, estimate: &RigidTransform, p: &Vec3) -> f64 {
        (estimate.apply(&self.ct_to_em_true(p)) - p).norm()
    }
}

/// Sensed airway cloud in the EM frame: skeleton points moved by the
/// deformation, mapped through the true tracker pose, plus Gaussian noise.
pub fn simulate_sensed_cloud(
    scene: &Scene,
    em_to_ct: &RigidTransform,
    deformation: &DeformationField,
    spacing: f64,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec3>> {
    let ct_to_em = em_to_ct.inverse();
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    Ok(scene
        .airway_medial_points(spacing)?
        .iter()
        .map(|p| {
            let jitter = Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
            ct_to_em.apply(&deformation.apply(p)) + jitter
        })
        .collect())
}

/// Runs fiducial registration followed by ICP for one simulated procedure.
pub fn simulate_registration(scene: &Scene, config: &RegistrationSimConfig, seed: u64) -> Result<RegistrationOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let em_to_ct_true = random_em_to_ct(&mut rng);
    let deformation = if config.deformation > 0.0 {
        DeformationField::random(&mut rng, scene.pleura.centroid(), config.deformation)
    } else {
        DeformationField::none()
    };
    let noise = Normal::new(0.0, config.fiducial_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let ct_to_em = em_to_ct_true.inverse();
    let mut em_pts = Vec::new();
    let mut ct_pts = Vec::new();
    for f in &scene.fiducials {
        for c in f.centers_in_scene() {
            let mut j = || Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            em_pts.push(ct_to_em.apply(&c) + j());
            ct_pts.push(c + j());
        }
    }
    let fiducial = fit_point_registration(&em_pts, &ct_pts)?;
    let cloud = simulate_sensed_cloud(
        scene,
        &em_to_ct_true,
        &deformation,
        config.cloud_spacing,
        config.cloud_noise,
        &mut rng,
    )?;
    let icp = icp_refine(
        &cloud,
        &scene.skeleton_segments(),
        &fiducial.transform,
        config.icp_max_iter,
        config.icp_tol,
    )?;
    Ok(RegistrationOutcome {
        em_to_ct_true,
        deformation,
        fiducial,
        icp,
    })
}

/// Mean TRE over held-out interior points for the fiducial-only and the
/// ICP-refined estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TreReport {
    pub fiducial_tre: f64,
    pub icp_tre: f64,
}

/// Draws `n` points from the inner half of the pleura (by level set) as
/// held-out TRE sites.
pub fn interior_points(scene: &Scene, n: usize, seed: u64) -> Vec<Vec3> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = scene.pleura.centroid();
    let (lo, hi) = scene.pleura.bounds();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let p = Vec3::new(
            rng.random_range(lo.x..hi.x),
            rng.random_range(lo.y..hi.y),
            rng.random_range(lo.z..hi.z),
        );
        let mid = c + (p - c) * 2.0;
        if scene.pleura.contains(&mid) {
            out.push(p);
        }
    }
    out
}

pub fn registration_benchmark(
    scene: &Scene,
    config: &RegistrationSimConfig,
    seed: u64,
    held_out: usize,
) -> Result<(RegistrationOutcome, TreReport)> {
    let outcome = simulate_registration(scene, config, seed)?;
    let pts = interior_points(scene, held_out, seed ^ 0x7e57);
    let mean = |t: &RigidTransform| pts.iter().map(|p| outcome.tre(t, p)).sum::<f64>() / pts.len() as f64;
    let report = TreReport {
        fiducial_tre: mean(&outcome.fiducial.transform),
        icp_tre: mean(&outcome.icp.transform),
    };
    Ok((outcome, report))
}

pub fn read_points_csv<R: Read>(reader: R) -> Result<Vec<Vec3>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(reader);
    let mut out = Vec::new();
    for rec in rdr.deserialize::<(f64, f64, f64)>() {
        let (x, y, z) = rec.map_err(|e| Error::Parse(e.to_string()))?;
        out.push(Vec3::new(x, y, z));
    }
    Ok(out)
}

pub fn write_points_csv<W: Write>(writer: W, points: &[Vec3]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    for p in points {
        w.serialize((p.x, p.y, p.z)).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn sample_points() -> Vec<Vec3> {
        vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(18.0, 0.0, 0.0),
            Vec3::new(0.0, 14.0, 0.0),
            Vec3::new(0.0, 0.0, 10.0),
            Vec3::new(12.0, 10.0, 4.0),
            Vec3::new(-8.0, 6.0, 9.0),
            Vec3::new(6.0, -10.0, 7.0),
        ]
    }

    #[test]
    fn identity_registration() {
        let pts = sample_points();
        let r = fit_point_registration(&pts, &pts).unwrap();
        assert!(r.transform.max_abs_diff(&RigidTransform::identity()) < 1e-12);
        assert!(r.fre < 1e-12);
    }

    #[test]
    fn recovers_known_transform() {
        let pts = sample_points();
        let truth = RigidTransform::new(
            Rotation3::from_axis_angle(&Vec3::z_axis(), 30f64.to_radians()),
            Vec3::new(5.0, -3.0, 2.0),
        );
        let dest: Vec<Vec3> = pts.iter().map(|p| truth.apply(p)).collect();
        let r = fit_point_registration(&pts, &dest).unwrap();
        assert!(r.transform.max_abs_diff(&truth) < 1e-9);
        assert!(r.fre < 1e-9);
    }

    #[test]
    fn collinear_is_degenerate() {
        let pts = vec![Vec3::zeros(), Vec3::new(1.0, 1.0, 1.0), Vec3::new(2.0, 2.0, 2.0)];
        assert!(matches!(fit_point_registration(&pts, &pts), Err(Error::Degenerate(_))));
        assert!(matches!(
            fit_point_registration(&pts[..2], &pts[..2]),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn planar_points_do_not_reflect() {
        let pts = vec![
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(10.0, 0.0, 0.0),
            Vec3::new(0.0, 10.0, 0.0),
            Vec3::new(10.0, 10.0, 0.0),
        ];
        let truth = RigidTransform::new(Rotation3::from_euler_angles(0.3, -0.4, 1.2), Vec3::new(1.0, 2.0, 3.0));
        let dest: Vec<Vec3> = pts.iter().map(|p| truth.apply(p)).collect();
        let r = fit_point_registration(&pts, &dest).unwrap();
        assert!(r.transform.rotation.matrix().determinant() > 0.0);
        assert!(r.transform.max_abs_diff(&truth) < 1e-9);
    }

    #[test]
    fn calibration_identity_and_rotation() {
        let centers = sample_points();
        let readings: Vec<(Vec3, Pose)> = centers.iter().map(|c| (*c, Pose::identity())).collect();
        let out = calibrate_fiducial(&readings).unwrap();
        assert_eq!(out, centers);

        let coil = Pose::new(
            Vec3::zeros(),
            UnitQuaternion::from_axis_angle(&Vec3::z_axis(), FRAC_PI_2),
        );
        let readings: Vec<(Vec3, Pose)> = centers.iter().map(|c| (*c, coil)).collect();
        let out = calibrate_fiducial(&readings).unwrap();
        for (c, o) in centers.iter().zip(&out) {
            // rotating by -90° about z: (x, y) -> (y, -x)
            let expect = Vec3::new(c.y, -c.x, c.z);
            assert!((o - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn calibration_rejects_duplicate_sphere() {
        let mut centers = sample_points();
        centers[3] = centers[1] + Vec3::new(0.2, 0.0, 0.0);
        let readings: Vec<(Vec3, Pose)> = centers.iter().map(|c| (*c, Pose::identity())).collect();
        assert!(matches!(calibrate_fiducial(&readings), Err(Error::Calibration(_))));
    }

    fn three_branch_skeleton() -> Vec<(Vec3, Vec3)> {
        let o = Vec3::zeros();
        vec![
            (Vec3::new(0.0, 0.0, 40.0), o),
            (o, Vec3::new(-25.0, 3.0, -20.0)),
            (o, Vec3::new(22.0, -4.0, -25.0)),
            (Vec3::new(22.0, -4.0, -25.0), Vec3::new(30.0, 10.0, -40.0)),
        ]
    }

    fn cloud_on(skel: &[(Vec3, Vec3)], n: usize) -> Vec<Vec3> {
        let mut out = Vec::new();
        for i in 0..n {
            let (a, b) = skel[i % skel.len()];
            let t = (i / skel.len()) as f64 / (n / skel.len()) as f64;
            out.push(a + (b - a) * t);
        }
        out
    }

    #[test]
    fn icp_from_truth_converges_immediately() {
        let skel = three_branch_skeleton();
        let cloud = cloud_on(&skel, 200);
        let r = icp_refine(&cloud, &skel, &RigidTransform::identity(), 100, 1e-4).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.fre < 1e-9);
    }

    #[test]
    fn icp_recovers_perturbation() {
        let skel = three_branch_skeleton();
        let truth_cloud = cloud_on(&skel, 500);
        let pert = RigidTransform::new(
            Rotation3::from_axis_angle(&Vec3::y_axis(), 5f64.to_radians()),
            Vec3::new(3.0, -4.0, 0.0),
        );
        // the sensed cloud lives in a frame offset by `pert`
        let cloud: Vec<Vec3> = truth_cloud.iter().map(|p| pert.apply(p)).collect();
        let r = icp_refine(&cloud, &skel, &RigidTransform::identity(), 100, 1e-6).unwrap();
        assert!(r.fre < 0.01, "final residual {}", r.fre);
        for w in r.residual_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn icp_rejects_empty_cloud() {
        let skel = three_branch_skeleton();
        assert!(matches!(
            icp_refine(&[], &skel, &RigidTransform::identity(), 10, 1e-4),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let pts = sample_points();
        let mut buf = Vec::new();
        write_points_csv(&mut buf, &pts).unwrap();
        let back = read_points_csv(buf.as_slice()).unwrap();
        assert_eq!(pts, back);
    }

    #[test]
    fn rigid_serde_round_trip() {
        let t = RigidTransform::new(Rotation3::from_euler_angles(0.1, 0.2, 0.3), Vec3::new(1.0, 2.0, 3.0));
        let s = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&s).unwrap();
        assert!(back.max_abs_diff(&t) == 0.0);
    }
}
