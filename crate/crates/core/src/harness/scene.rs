//! Synthetic scenes with a known ground-truth manifold.
//!
//! Components are placed on surface primitives with tangent-aligned
//! covariances `diag(sigma_t^2, sigma_t^2, sigma_n^2)`. Scans are
//! independent draws from the components; the source scan is expressed in
//! its own sensor frame so that `q ~ T* p`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{
    gaussian::standard_normal3, se3_exp, so3_exp, Covariance3, GaussianComponent, Mat3, PointCloud,
    PoseSE3, Twist6, Vec3,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Primitive {
    /// Rectangle through `center` with unit `normal`; `half_u`/`half_v` are
    /// half-extents along a tangent basis derived from the normal.
    Plane { center: Vec3, normal: Vec3, half_u: f64, half_v: f64 },
    /// Axis-aligned box surface.
    Box { center: Vec3, half_extents: Vec3 },
    Sphere { center: Vec3, radius: f64 },
}

/// Orthonormal tangent pair completing `n`.
pub fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize();
    (u, n.cross(&u))
}

impl Primitive {
    fn validate(&self) -> Result<()> {
        let ok = match self {
            Primitive::Plane { normal, half_u, half_v, .. } => {
                (normal.norm() - 1.0).abs() < 1e-9 && *half_u > 0.0 && *half_v > 0.0
            }
            Primitive::Box { half_extents, .. } => half_extents.iter().all(|&h| h > 0.0),
            Primitive::Sphere { radius, .. } => *radius > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("invalid primitive {self:?}")))
        }
    }

    fn area(&self) -> f64 {
        match self {
            Primitive::Plane { half_u, half_v, .. } => 4.0 * half_u * half_v,
            Primitive::Box { half_extents: h, .. } => 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z),
            Primitive::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
        }
    }

    /// Uniform surface point and its outward (or plane) normal.
    fn sample(&self, rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
        match *self {
            Primitive::Plane { center, normal, half_u, half_v } => {
                let (u, v) = tangent_basis(&normal);
                let a = rng.random_range(-half_u..half_u);
                let b = rng.random_range(-half_v..half_v);
                (center + u * a + v * b, normal)
            }
            Primitive::Box { center, half_extents: h } => {
                let faces = [h.y * h.z, h.y * h.z, h.x * h.z, h.x * h.z, h.x * h.y, h.x * h.y];
                let total: f64 = faces.iter().sum();
                let mut pick = rng.random_range(0.0..total);
                let mut face = 5;
                for (k, a) in faces.iter().enumerate() {
                    if pick < *a {
                        face = k;
                        break;
                    }
                    pick -= a;
                }
                let axis = face / 2;
                let sign = if face % 2 == 0 { 1.0 } else { -1.0 };
                let mut local = Vec3::zeros();
                for k in 0..3 {
                    local[k] = if k == axis { sign * h[k] } else { rng.random_range(-h[k]..h[k]) };
                }
                let mut n = Vec3::zeros();
                n[axis] = sign;
                (center + local, n)
            }
            Primitive::Sphere { center, radius } => {
                let dir = loop {
                    let d = standard_normal3(rng);
                    if d.norm() > 1e-9 {
                        break d.normalize();
                    }
                };
                (center + dir * radius, dir)
            }
        }
    }
}

/// Tangent-aligned covariance for a surface normal.
pub fn surface_covariance(normal: &Vec3, sigma_t: f64, sigma_n: f64) -> Covariance3 {
    let (u, v) = tangent_basis(normal);
    let c = sigma_t * sigma_t * (u * u.transpose() + v * v.transpose())
        + sigma_n * sigma_n * normal * normal.transpose();
    0.5 * (c + c.transpose())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub primitives: Vec<Primitive>,
    pub components: usize,
    pub source_samples_per_component: usize,
    pub target_samples_per_component: usize,
    pub sigma_tangent: f64,
    pub sigma_normal: f64,
    pub max_rotation_deg: f64,
    pub max_translation: f64,
    /// Standard deviation of the translation noise in the observed pose.
    pub translation_noise: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            primitives: vec![
                Primitive::Plane { center: Vec3::zeros(), normal: Vec3::z(), half_u: 3.0, half_v: 3.0 },
                Primitive::Box { center: Vec3::new(0.5, -0.5, 0.6), half_extents: Vec3::new(0.6, 0.4, 0.6) },
                Primitive::Sphere { center: Vec3::new(-1.2, 1.0, 0.8), radius: 0.7 },
            ],
            components: 500,
            source_samples_per_component: 1,
            target_samples_per_component: 1,
            sigma_tangent: 0.1,
            sigma_normal: 0.005,
            max_rotation_deg: 60.0,
            max_translation: 0.5,
            translation_noise: 0.0,
        }
    }
}

impl SceneSpec {
    /// Floor and two walls meeting in a corner; 500 target points and a
    /// source scan eight times denser.
    pub fn planar() -> Self {
        SceneSpec {
            primitives: vec![
                Primitive::Plane { center: Vec3::new(0.0, 0.0, 0.0), normal: Vec3::z(), half_u: 2.0, half_v: 2.0 },
                Primitive::Plane { center: Vec3::new(-2.0, 0.0, 1.0), normal: Vec3::x(), half_u: 2.0, half_v: 1.0 },
                Primitive::Plane { center: Vec3::new(0.0, -2.0, 1.0), normal: Vec3::y(), half_u: 2.0, half_v: 1.0 },
            ],
            components: 500,
            source_samples_per_component: 8,
            target_samples_per_component: 1,
            max_rotation_deg: 20.0,
            max_translation: 0.3,
            ..SceneSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.primitives.is_empty() || self.components == 0 {
            return Err(Error::InvalidInput("a scene needs primitives and components".into()));
        }
        for p in &self.primitives {
            p.validate()?;
        }
        if !(self.sigma_tangent >= 0.0 && self.sigma_normal >= 0.0 && self.translation_noise >= 0.0) {
            return Err(Error::InvalidInput("noise levels must be non-negative".into()));
        }
        if !(self.max_rotation_deg >= 0.0 && self.max_rotation_deg < 180.0 && self.max_translation >= 0.0) {
            return Err(Error::InvalidInput("pose range out of bounds".into()));
        }
        Ok(())
    }
}

/// A generated scan pair with its ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub components: Vec<GaussianComponent>,
    /// Surface normal of each component.
    pub normals: Vec<Vec3>,
    /// Source scan in its own sensor frame.
    pub source: PointCloud,
    /// Target scan in the world frame.
    pub target: PointCloud,
    pub source_component: Vec<usize>,
    pub target_component: Vec<usize>,
    pub true_pose: PoseSE3,
    pub observed_pose: PoseSE3,
    /// Left-composed perturbation: `observed = Exp(noise) * true`.
    pub noise_twist: Twist6,
}

impl SyntheticScene {
    /// Ground-truth normal of every target point.
    pub fn target_normals(&self) -> Vec<Vec3> {
        self.target_component.iter().map(|&c| self.normals[c]).collect()
    }

    /// Ground-truth covariance of every target point.
    pub fn target_covariances(&self) -> Vec<Covariance3> {
        self.target_component.iter().map(|&c| self.components[c].cov).collect()
    }

    /// Ground-truth covariances of the source points, in the source frame.
    pub fn source_covariances(&self) -> Vec<Covariance3> {
        let r = self.true_pose.rotation;
        self.source_component.iter().map(|&c| r.transpose() * self.components[c].cov * r).collect()
    }
}

/// Places components on the primitives, proportionally to their areas.
pub fn place_components(
    primitives: &[Primitive],
    count: usize,
    sigma_t: f64,
    sigma_n: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<GaussianComponent>, Vec<Vec3>)> {
    for p in primitives {
        p.validate()?;
    }
    let areas: Vec<f64> = primitives.iter().map(Primitive::area).collect();
    let total: f64 = areas.iter().sum();
    let mut comps = Vec::with_capacity(count);
    let mut normals = Vec::with_capacity(count);
    let mut assigned = 0;
    for (k, prim) in primitives.iter().enumerate() {
        let share = if k + 1 == primitives.len() {
            count - assigned
        } else {
            ((areas[k] / total) * count as f64).round() as usize
        }
        .min(count - assigned);
        assigned += share;
        for _ in 0..share {
            let (x, n) = prim.sample(rng);
            comps.push(GaussianComponent::new(x, surface_covariance(&n, sigma_t, sigma_n)));
            normals.push(n);
        }
    }
    Ok((comps, normals))
}

fn draw(g: &GaussianComponent, rng: &mut ChaCha8Rng) -> Vec3 {
    g.mean + crate::manifold::eigen_factor(&g.cov) * standard_normal3(rng)
}

/// Random rotation of angle uniform in `[0, max]` about a uniform axis.
pub fn random_rotation(max_deg: f64, rng: &mut ChaCha8Rng) -> Mat3 {
    let axis = loop {
        let d = standard_normal3(rng);
        if d.norm() > 1e-9 {
            break d.normalize();
        }
    };
    let angle = if max_deg > 0.0 { rng.random_range(0.0..max_deg.to_radians()) } else { 0.0 };
    so3_exp(&(axis * angle))
}

pub fn synth_scene(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (components, normals) =
        place_components(&spec.primitives, spec.components, spec.sigma_tangent, spec.sigma_normal, &mut rng)?;
    let rotation = random_rotation(spec.max_rotation_deg, &mut rng);
    let translation = if spec.max_translation > 0.0 {
        Vec3::from_fn(|_, _| rng.random_range(-spec.max_translation..spec.max_translation))
    } else {
        Vec3::zeros()
    };
    let true_pose = PoseSE3 { rotation, translation };
    let world_to_source = true_pose.inverse();

    let mut target = Vec::new();
    let mut target_component = Vec::new();
    let mut source = Vec::new();
    let mut source_component = Vec::new();
    for (c, g) in components.iter().enumerate() {
        for _ in 0..spec.target_samples_per_component {
            target.push(draw(g, &mut rng));
            target_component.push(c);
        }
        for _ in 0..spec.source_samples_per_component {
            source.push(world_to_source.transform_point(&draw(g, &mut rng)));
            source_component.push(c);
        }
    }
    let noise = if spec.translation_noise > 0.0 {
        standard_normal3(&mut rng) * spec.translation_noise
    } else {
        Vec3::zeros()
    };
    let noise_twist = Twist6::from_slice(&[0.0, 0.0, 0.0, noise.x, noise.y, noise.z]);
    let observed_pose = if spec.translation_noise > 0.0 {
        se3_exp(&noise_twist).compose(&true_pose)
    } else {
        true_pose
    };
    Ok(SyntheticScene {
        spec: spec.clone(),
        components,
        normals,
        source: PointCloud::new(source),
        target: PointCloud::new(target),
        source_component,
        target_component,
        true_pose,
        observed_pose,
        noise_twist,
    })
}

/// Parameters of a corridor walked by a sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorridorSpec {
    pub scans: usize,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    /// Components per square meter of surface.
    pub density: f64,
    pub step: f64,
    /// Peak heading oscillation of the sensor, degrees.
    pub yaw_amplitude_deg: f64,
    /// Only components within this distance of the sensor are observed.
    pub range: f64,
    pub sigma_tangent: f64,
    pub sigma_normal: f64,
    /// Box pillars along the walls, every `pillar_spacing` meters.
    pub pillar_spacing: f64,
}

impl Default for CorridorSpec {
    fn default() -> Self {
        CorridorSpec {
            scans: 20,
            length: 40.0,
            width: 3.0,
            height: 2.5,
            density: 6.0,
            step: 0.5,
            yaw_amplitude_deg: 4.0,
            range: 8.0,
            sigma_tangent: 0.2,
            sigma_normal: 0.005,
            pillar_spacing: 2.0,
        }
    }
}

/// A scan sequence with reference poses (sensor-to-world).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorridorSequence {
    pub scans: Vec<PointCloud>,
    /// Ground-truth covariance of every point, in its scan's frame.
    pub covariances: Vec<Vec<Covariance3>>,
    pub poses: Vec<PoseSE3>,
}

pub fn corridor_primitives(spec: &CorridorSpec) -> Vec<Primitive> {
    let (hl, hw, hh) = (spec.length / 2.0, spec.width / 2.0, spec.height / 2.0);
    let cx = hl - 5.0;
    let mut prims = vec![
        Primitive::Plane { center: Vec3::new(cx, 0.0, 0.0), normal: Vec3::z(), half_u: hw, half_v: hl },
        Primitive::Plane { center: Vec3::new(cx, 0.0, spec.height), normal: Vec3::z(), half_u: hw, half_v: hl },
        Primitive::Plane { center: Vec3::new(cx, hw, hh), normal: Vec3::y(), half_u: hh, half_v: hl },
        Primitive::Plane { center: Vec3::new(cx, -hw, hh), normal: Vec3::y(), half_u: hh, half_v: hl },
    ];
    if spec.pillar_spacing > 0.0 {
        let mut x = cx - hl + 1.0;
        let mut side = 1.0;
        while x < cx + hl {
            prims.push(Primitive::Box {
                center: Vec3::new(x, side * (hw - 0.2), hh),
                half_extents: Vec3::new(0.2, 0.2, hh),
            });
            x += spec.pillar_spacing;
            side = -side;
        }
    }
    prims
}

pub fn synth_corridor(spec: &CorridorSpec, seed: u64) -> Result<CorridorSequence> {
    if spec.scans < 2 || !(spec.range > 0.0 && spec.density > 0.0) {
        return Err(Error::InvalidInput("corridor needs at least two scans, positive range and density".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prims = corridor_primitives(spec);
    let area: f64 = prims.iter().map(Primitive::area).sum();
    let count = (area * spec.density).round() as usize;
    let (components, _) = place_components(&prims, count, spec.sigma_tangent, spec.sigma_normal, &mut rng)?;
    let mut scans = Vec::with_capacity(spec.scans);
    let mut covariances = Vec::with_capacity(spec.scans);
    let mut poses = Vec::with_capacity(spec.scans);
    for k in 0..spec.scans {
        let phase = k as f64 * 0.7;
        let yaw = spec.yaw_amplitude_deg.to_radians() * phase.sin();
        let pose = PoseSE3 {
            rotation: so3_exp(&Vec3::new(0.0, 0.0, yaw)),
            translation: Vec3::new(k as f64 * spec.step, 0.15 * (phase * 0.5).sin(), 1.2),
        };
        let inv = pose.inverse();
        let mut pts = Vec::new();
        let mut covs = Vec::new();
        for g in &components {
            if (g.mean - pose.translation).norm() <= spec.range {
                pts.push(inv.transform_point(&draw(g, &mut rng)));
                covs.push(pose.rotation.transpose() * g.cov * pose.rotation);
            }
        }
        scans.push(PointCloud::new(pts));
        covariances.push(covs);
        poses.push(pose);
    }
    Ok(CorridorSequence { scans, covariances, poses })
}
