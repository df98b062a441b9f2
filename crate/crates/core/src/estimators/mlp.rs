//! A small single-scale neighborhood network predicting per-point factors.
//!
//! Pipeline: farthest-point sampling of `ceil(N / ratio)` centers, ball
//! query around each center (capped, padded by repetition), centroid-frame
//! normalization, a shared per-point encoder `3 -> 32 -> 64` with max
//! pooling per region, inverse-distance interpolation of region features
//! back to every point from its three nearest centers, and a decoder
//! `128 -> 64 -> 6` applied to `[point feature, region feature]`.
//!
//! Points are processed in lexicographic coordinate order internally, which
//! makes the output exactly permutation-equivariant.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{LowerTri3, PointCloud, Vec3};

pub const ENC_HIDDEN: usize = 32;
pub const ENC_OUT: usize = 64;
pub const DEC_HIDDEN: usize = 64;
pub const OUT: usize = 6;

/// Architecture hyper-parameters that are not learned.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    /// Ball-query radius (post-scaling units).
    pub radius: f64,
    /// Neighborhood cap.
    pub max_neighbors: usize,
    /// One center per `center_ratio` points.
    pub center_ratio: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { radius: 0.5, max_neighbors: 32, center_ratio: 4 }
    }
}

/// Dense layer, weights row-major `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense { inputs, outputs, weights: vec![0.0; inputs * outputs], bias: vec![0.0; outputs] }
    }

    fn he_uniform(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / inputs as f64).sqrt();
        let mut d = Dense::zeros(inputs, outputs);
        for w in &mut d.weights {
            *w = rng.random_range(-bound..bound);
        }
        d
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.outputs)
            .map(|o| {
                let row = &self.weights[o * self.inputs..(o + 1) * self.inputs];
                self.bias[o] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for o in 0..self.outputs {
            let g = dy[o];
            if g == 0.0 {
                continue;
            }
            grad.bias[o] += g;
            let base = o * self.inputs;
            for i in 0..self.inputs {
                grad.weights[base + i] += g * x[i];
                dx[i] += g * self.weights[base + i];
            }
        }
        dx
    }

    fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn relu_mask(z: &[f64], dy: &[f64]) -> Vec<f64> {
    z.iter().zip(dy).map(|(&z, &g)| if z > 0.0 { g } else { 0.0 }).collect()
}

/// Learned weights of the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub enc1: Dense,
    pub enc2: Dense,
    pub dec1: Dense,
    pub dec2: Dense,
}

impl MlpParams {
    /// All-zero parameters.
    pub fn zeros() -> Self {
        MlpParams {
            enc1: Dense::zeros(3, ENC_HIDDEN),
            enc2: Dense::zeros(ENC_HIDDEN, ENC_OUT),
            dec1: Dense::zeros(2 * ENC_OUT, DEC_HIDDEN),
            dec2: Dense::zeros(DEC_HIDDEN, OUT),
        }
    }

    /// He-uniform hidden layers; the output layer starts small with its bias
    /// at `init_scale * I` so that the initial covariances are isotropic.
    pub fn init(seed: u64, init_scale: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = MlpParams {
            enc1: Dense::he_uniform(3, ENC_HIDDEN, &mut rng),
            enc2: Dense::he_uniform(ENC_HIDDEN, ENC_OUT, &mut rng),
            dec1: Dense::he_uniform(2 * ENC_OUT, DEC_HIDDEN, &mut rng),
            dec2: Dense::he_uniform(DEC_HIDDEN, OUT, &mut rng),
        };
        for w in &mut p.dec2.weights {
            *w *= 1e-3 * init_scale;
        }
        p.dec2.bias = LowerTri3::scaled_identity(init_scale).0.to_vec();
        p
    }

    fn layers(&self) -> [&Dense; 4] {
        [&self.enc1, &self.enc2, &self.dec1, &self.dec2]
    }

    fn layers_mut(&mut self) -> [&mut Dense; 4] {
        [&mut self.enc1, &mut self.enc2, &mut self.dec1, &mut self.dec2]
    }

    pub fn num_params(&self) -> usize {
        self.layers().iter().map(|l| l.len()).sum()
    }

    /// Parameters flattened layer by layer, weights before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in self.layers() {
            out.extend_from_slice(&l.weights);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let mut p = MlpParams::zeros();
        if flat.len() != p.num_params() {
            return Err(Error::InvalidInput(format!(
                "expected {} network parameters, got {}",
                p.num_params(),
                flat.len()
            )));
        }
        let mut k = 0;
        for l in p.layers_mut() {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&flat[k..k + nw]);
            k += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&flat[k..k + nb]);
            k += nb;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.layers().iter().all(|l| l.weights.iter().chain(&l.bias).all(|v| v.is_finite()))
    }
}

struct Encoded {
    input: Vec<f64>,
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    out: Vec<f64>,
}

fn encode(p: &MlpParams, u: &Vec3) -> Encoded {
    let input = vec![u.x, u.y, u.z];
    let z1 = p.enc1.apply(&input);
    let a1 = relu(z1.clone());
    let z2 = p.enc2.apply(&a1);
    let out = relu(z2.clone());
    Encoded { input, z1, a1, z2, out }
}

fn encode_backward(p: &MlpParams, e: &Encoded, d_out: &[f64], grad: &mut MlpParams) {
    let dz2 = relu_mask(&e.z2, d_out);
    let da1 = p.enc2.backward(&e.a1, &dz2, &mut grad.enc2);
    let dz1 = relu_mask(&e.z1, &da1);
    p.enc1.backward(&e.input, &dz1, &mut grad.enc1);
}

struct Region {
    /// Sorted-order indices, unpadded.
    members: Vec<usize>,
    centroid: Vec3,
    encoded: Vec<Encoded>,
    feature: Vec<f64>,
    /// Member slot that attains the max in each channel.
    argmax: Vec<usize>,
}

struct PointPass {
    centers: Vec<(usize, f64)>,
    point_feature: Encoded,
    concat: Vec<f64>,
    z3: Vec<f64>,
    a3: Vec<f64>,
}

/// Intermediate values of a forward pass, needed for backpropagation.
pub struct MlpTape {
    order: Vec<usize>,
    regions: Vec<Region>,
    points: Vec<PointPass>,
    outputs: Vec<LowerTri3>,
}

impl MlpTape {
    /// Predicted factors in the caller's point order.
    pub fn outputs(&self) -> &[LowerTri3] {
        &self.outputs
    }
}

fn lex_cmp(a: &Vec3, b: &Vec3) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

fn farthest_point_sample(pts: &[Vec3], m: usize) -> Vec<usize> {
    let mut chosen = vec![0usize];
    let mut dist: Vec<f64> = pts.iter().map(|p| (p - pts[0]).norm_squared()).collect();
    while chosen.len() < m {
        let mut best = 0;
        for i in 1..pts.len() {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        chosen.push(best);
        for (i, p) in pts.iter().enumerate() {
            dist[i] = dist[i].min((p - pts[best]).norm_squared());
        }
    }
    chosen
}

/// Forward pass with the intermediates kept for [`mlp_backward`].
pub fn mlp_forward_tape(cloud: &PointCloud, params: &MlpParams, config: &MlpConfig) -> Result<MlpTape> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("network input cloud is empty".into()));
    }
    if !(config.radius > 0.0) || config.max_neighbors == 0 || config.center_ratio == 0 {
        return Err(Error::InvalidInput(
            "radius, neighbor cap and center ratio must be positive".into(),
        ));
    }
    let n = cloud.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| lex_cmp(&cloud.points[a], &cloud.points[b]));
    let pts: Vec<Vec3> = order.iter().map(|&i| cloud.points[i]).collect();

    let m = n.div_ceil(config.center_ratio);
    let centers = farthest_point_sample(&pts, m);
    let r2 = config.radius * config.radius;
    let regions: Vec<Region> = centers
        .iter()
        .map(|&c| {
            let mut members: Vec<(usize, f64)> = pts
                .iter()
                .enumerate()
                .map(|(i, p)| (i, (p - pts[c]).norm_squared()))
                .filter(|&(_, d)| d <= r2)
                .collect();
            members.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            members.truncate(config.max_neighbors);
            let members: Vec<usize> = members.into_iter().map(|(i, _)| i).collect();
            let centroid = members.iter().map(|&i| pts[i]).sum::<Vec3>() / members.len() as f64;
            // Padding repeats members cyclically; it cannot change a max pool,
            // so only the distinct members are encoded.
            let encoded: Vec<Encoded> = members
                .iter()
                .map(|&i| encode(params, &((pts[i] - centroid) / config.radius)))
                .collect();
            let mut feature = vec![f64::NEG_INFINITY; ENC_OUT];
            let mut argmax = vec![0usize; ENC_OUT];
            for (s, e) in encoded.iter().enumerate() {
                for ch in 0..ENC_OUT {
                    if e.out[ch] > feature[ch] {
                        feature[ch] = e.out[ch];
                        argmax[ch] = s;
                    }
                }
            }
            Region { members, centroid, encoded, feature, argmax }
        })
        .collect();

    let center_pts: Vec<Vec3> = centers.iter().map(|&c| pts[c]).collect();
    let mut outputs_sorted = Vec::with_capacity(n);
    let mut passes = Vec::with_capacity(n);
    for p in &pts {
        let mut near: Vec<(usize, f64)> =
            center_pts.iter().enumerate().map(|(k, c)| (k, (p - c).norm_squared())).collect();
        near.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        near.truncate(3);
        let raw: Vec<f64> = near.iter().map(|&(_, d2)| 1.0 / (d2 + 1e-12)).collect();
        let total: f64 = raw.iter().sum();
        let weighted: Vec<(usize, f64)> =
            near.iter().zip(&raw).map(|(&(k, _), w)| (k, w / total)).collect();
        let mut region_feature = vec![0.0; ENC_OUT];
        let mut frame = Vec3::zeros();
        for &(k, w) in &weighted {
            for ch in 0..ENC_OUT {
                region_feature[ch] += w * regions[k].feature[ch];
            }
            frame += w * regions[k].centroid;
        }
        let point_feature = encode(params, &((p - frame) / config.radius));
        let mut concat = point_feature.out.clone();
        concat.extend_from_slice(&region_feature);
        let z3 = params.dec1.apply(&concat);
        let a3 = relu(z3.clone());
        let out = params.dec2.apply(&a3);
        outputs_sorted.push(LowerTri3([out[0], out[1], out[2], out[3], out[4], out[5]]));
        passes.push(PointPass { centers: weighted, point_feature, concat, z3, a3 });
    }
    let mut outputs = vec![LowerTri3([0.0; 6]); n];
    for (s, &orig) in order.iter().enumerate() {
        outputs[orig] = outputs_sorted[s];
    }
    Ok(MlpTape { order, regions, points: passes, outputs })
}

/// Predicted per-point factors.
pub fn mlp_forward(cloud: &PointCloud, params: &MlpParams, config: &MlpConfig) -> Result<Vec<LowerTri3>> {
    Ok(mlp_forward_tape(cloud, params, config)?.outputs)
}

/// Gradient of `sum_i <d_out[i], output[i]>` with respect to every
/// parameter; `d_out` is in the caller's point order.
pub fn mlp_backward(tape: &MlpTape, params: &MlpParams, d_out: &[[f64; 6]]) -> Result<MlpParams> {
    if d_out.len() != tape.outputs.len() {
        return Err(Error::InvalidInput("output gradient length mismatch".into()));
    }
    let mut grad = MlpParams::zeros();
    let mut d_region = vec![vec![0.0; ENC_OUT]; tape.regions.len()];
    for (s, pass) in tape.points.iter().enumerate() {
        let dy = &d_out[tape.order[s]];
        let da3 = params.dec2.backward(&pass.a3, dy, &mut grad.dec2);
        let dz3 = relu_mask(&pass.z3, &da3);
        let dconcat = params.dec1.backward(&pass.concat, &dz3, &mut grad.dec1);
        encode_backward(params, &pass.point_feature, &dconcat[..ENC_OUT], &mut grad);
        for &(k, w) in &pass.centers {
            for ch in 0..ENC_OUT {
                d_region[k][ch] += w * dconcat[ENC_OUT + ch];
            }
        }
    }
    for (region, dr) in tape.regions.iter().zip(&d_region) {
        let mut per_member = vec![vec![0.0; ENC_OUT]; region.members.len()];
        for ch in 0..ENC_OUT {
            per_member[region.argmax[ch]][ch] += dr[ch];
        }
        for (e, g) in region.encoded.iter().zip(&per_member) {
            if g.iter().any(|&v| v != 0.0) {
                encode_backward(params, e, g, &mut grad);
            }
        }
    }
    Ok(grad)
}
