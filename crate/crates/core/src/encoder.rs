//! Instance encoder: an MLP feature extractor `f` followed by a projection
//! head whose outputs are ℓ2-normalized. Also hosts the SGD optimizer and the
//! cosine learning-rate schedule used for both encoder phases.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{shape_err, Error, Result};
use crate::numcore::{matmul_nn, Matrix, Tape, Var};
use crate::rng;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MILE1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    /// Instance dimension `m`.
    pub input: usize,
    /// Embedding dimension `d`.
    pub embed: usize,
    /// Projection dimension `d'`.
    pub proj: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed: usize,
    pub proj: usize,
    pub hidden: Vec<usize>,
    /// Hidden widths of the projection head; empty means one linear layer.
    pub projection_hidden: Vec<usize>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed: 32,
            proj: 16,
            hidden: vec![64],
            projection_hidden: vec![],
        }
    }
}

/// Dense layer `y = x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Dense {
    fn he(fan_in: usize, fan_out: usize, rng: &mut rng::Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        Self {
            weight: Matrix::new(fan_in, fan_out, w).expect("finite init"),
            bias: Matrix::zeros(1, fan_out),
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut y = matmul_nn(x, &self.weight);
        let b = self.bias.data();
        for i in 0..y.rows() {
            for (v, bv) in y.row_mut(i).iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub feature_layers: Vec<Dense>,
    pub projection_layers: Vec<Dense>,
}

/// Parameters of an [`EncoderParams`] registered on a tape.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    feature: Vec<(Var, Var)>,
    projection: Vec<(Var, Var)>,
}

/// Builds an encoder with the default single-layer projection head.
pub fn init_params(dims: EncoderDims, hidden: &[usize], seed: u64) -> Result<EncoderParams> {
    EncoderParams::init(dims, hidden, &[], seed)
}

impl EncoderParams {
    /// He-scaled Gaussian weights and zero biases; deterministic per seed.
    pub fn init(
        dims: EncoderDims,
        hidden: &[usize],
        projection_hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let fixed = [dims.input, dims.embed, dims.proj];
        if fixed
            .iter()
            .chain(hidden)
            .chain(projection_hidden)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        let mut rng = rng::seeded(seed, rng::stream::INIT);
        let stack = |sizes: Vec<usize>, rng: &mut rng::Rng| -> Vec<Dense> {
            sizes
                .windows(2)
                .map(|w| Dense::he(w[0], w[1], rng))
                .collect()
        };
        let mut f_sizes = vec![dims.input];
        f_sizes.extend_from_slice(hidden);
        f_sizes.push(dims.embed);
        let mut p_sizes = vec![dims.embed];
        p_sizes.extend_from_slice(projection_hidden);
        p_sizes.push(dims.proj);
        let feature_layers = stack(f_sizes, &mut rng);
        let projection_layers = stack(p_sizes, &mut rng);
        Ok(Self {
            dims,
            feature_layers,
            projection_layers,
        })
    }

    pub fn from_config(input: usize, cfg: &EncoderConfig, seed: u64) -> Result<Self> {
        let dims = EncoderDims {
            input,
            embed: cfg.embed,
            proj: cfg.proj,
        };
        Self::init(dims, &cfg.hidden, &cfg.projection_hidden, seed)
    }

    /// Embeddings `h = f(x)` for a batch of instances.
    pub fn forward_features(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.dims.input {
            return shape_err(format!(
                "encoder expects {} input columns, got {}",
                self.dims.input,
                x.cols()
            ));
        }
        Ok(run_stack(&self.feature_layers, x.clone()))
    }

    /// Unit-norm projections `z = ψ(h)/‖ψ(h)‖`.
    pub fn forward_projection(&self, h: &Matrix) -> Result<Matrix> {
        if h.cols() != self.dims.embed {
            return shape_err(format!(
                "projection expects {} columns, got {}",
                self.dims.embed,
                h.cols()
            ));
        }
        let mut z = run_stack(&self.projection_layers, h.clone());
        for i in 0..z.rows() {
            let row = z.row_mut(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate(format!(
                    "projection row {i} has norm {n}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        Ok(z)
    }

    /// Registers all weights on `tape` in [`Self::matrices`] order.
    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        let mut reg = |layers: &[Dense]| -> Vec<(Var, Var)> {
            layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect()
        };
        let feature = reg(&self.feature_layers);
        let projection = reg(&self.projection_layers);
        EncoderVars {
            feature,
            projection,
        }
    }

    /// Groups already-registered vars, given in [`Self::matrices`] order,
    /// into this encoder's layer structure.
    pub fn bind(&self, vars: &[Var]) -> Result<EncoderVars> {
        let nf = self.feature_matrix_count();
        if vars.len() != nf + self.projection_layers.len() * 2 {
            return Err(Error::Shape(format!(
                "encoder has {} matrices, got {} vars",
                self.matrices().len(),
                vars.len()
            )));
        }
        let pairs = |v: &[Var]| v.chunks(2).map(|c| (c[0], c[1])).collect();
        Ok(EncoderVars {
            feature: pairs(&vars[..nf]),
            projection: pairs(&vars[nf..]),
        })
    }

    /// Weight then bias for each layer, feature layers first.
    pub fn matrices(&self) -> Vec<&Matrix> {
        self.feature_layers
            .iter()
            .chain(&self.projection_layers)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn matrices_mut(&mut self) -> Vec<&mut Matrix> {
        self.feature_layers
            .iter_mut()
            .chain(self.projection_layers.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    /// Number of matrices registered by the feature extractor alone.
    pub fn feature_matrix_count(&self) -> usize {
        self.feature_layers.len() * 2
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            self.dims.input,
            self.dims.embed,
            self.dims.proj,
            self.feature_layers.len(),
            self.projection_layers.len(),
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for l in self.feature_layers.iter().chain(&self.projection_layers) {
            out.extend_from_slice(&(l.weight.rows() as u32).to_le_bytes());
            out.extend_from_slice(&(l.weight.cols() as u32).to_le_bytes());
            for v in l.weight.data().iter().chain(l.bias.data()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = crate::io::ByteReader::new(bytes);
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let input = r.u32()? as usize;
        let embed = r.u32()? as usize;
        let proj = r.u32()? as usize;
        let nf = r.u32()? as usize;
        let np = r.u32()? as usize;
        let mut layers = Vec::with_capacity(nf + np);
        let mut prev = input;
        for i in 0..nf + np {
            let at = r.offset();
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            if i == nf && prev != embed {
                return Err(Error::Format {
                    offset: at,
                    msg: "feature stack does not end at embed dim".into(),
                });
            }
            if rows != prev {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("layer {i} input {rows} != {prev}"),
                });
            }
            let w = r.f64s(rows * cols)?;
            let b = r.f64s(cols)?;
            layers.push(Dense {
                weight: Matrix::new(rows, cols, w).map_err(|e| Error::Format {
                    offset: at,
                    msg: e.to_string(),
                })?,
                bias: Matrix::new(1, cols, b).map_err(|e| Error::Format {
                    offset: at,
                    msg: e.to_string(),
                })?,
            });
            prev = cols;
        }
        if prev != proj || nf == 0 || np == 0 {
            return Err(Error::Format {
                offset: r.offset(),
                msg: "layer stack does not match header dims".into(),
            });
        }
        r.finish()?;
        let projection_layers = layers.split_off(nf);
        Ok(Self {
            dims: EncoderDims { input, embed, proj },
            feature_layers: layers,
            projection_layers,
        })
    }

    /// Hex SHA-256 of the checkpoint bytes.
    pub fn hash(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn run_stack(layers: &[Dense], mut x: Matrix) -> Matrix {
    let last = layers.len() - 1;
    for (i, l) in layers.iter().enumerate() {
        x = l.apply(&x);
        if i < last {
            x = x.relu();
        }
    }
    x
}

impl EncoderVars {
    pub fn features(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape_stack(tape, &self.feature, x)
    }

    /// Projection followed by row normalization.
    pub fn project(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let p = tape_stack(tape, &self.projection, h)?;
        tape.l2_normalize_rows(p)
    }
}

fn tape_stack(tape: &mut Tape, layers: &[(Var, Var)], mut x: Var) -> Result<Var> {
    let last = layers.len() - 1;
    for (i, &(w, b)) in layers.iter().enumerate() {
        x = tape.affine(x, w, b)?;
        if i < last {
            x = tape.relu(x);
        }
    }
    Ok(x)
}

/// SGD with momentum and decoupled-into-gradient weight decay.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Matrix>,
}

impl SgdState {
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        params: &[&Matrix],
    ) -> Result<Self> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params
                .iter()
                .map(|p| Matrix::zeros(p.rows(), p.cols()))
                .collect(),
        })
    }

    /// `v ← μ·v + g + λ·p; p ← p − lr·v`.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[Matrix]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != params.len() {
            return shape_err("sgd parameter/gradient count mismatch");
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if !p.same_shape(g) || !p.same_shape(v) {
                return shape_err("sgd parameter/gradient shape mismatch");
            }
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            let pd = p.data_mut();
            for ((pv, &gv), vv) in pd.iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = self.momentum * *vv + gv + self.weight_decay * *pv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

/// Applies one SGD step to an encoder.
pub fn sgd_step(p: &mut EncoderParams, grads: &[Matrix], s: &mut SgdState) -> Result<()> {
    let mut ms = p.matrices_mut();
    s.step(&mut ms, grads)
}

/// `base_lr · ½(1 + cos(π·epoch/total))`.
pub fn cosine_lr(epoch: usize, total_epochs: usize, base_lr: f64) -> Result<f64> {
    if total_epochs == 0 || epoch > total_epochs {
        return Err(Error::Config(format!(
            "epoch {epoch} outside 0..={total_epochs}"
        )));
    }
    let frac = epoch as f64 / total_epochs as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dims() -> EncoderDims {
        EncoderDims {
            input: 16,
            embed: 8,
            proj: 4,
        }
    }

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = init_params(dims(), &[32], 3).unwrap();
        let b = init_params(dims(), &[32], 3).unwrap();
        let c = init_params(dims(), &[32], 4).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
        assert_ne!(a.to_bytes(), c.to_bytes());
    }

    #[test]
    fn init_layer_shapes() {
        let p = init_params(dims(), &[32], 0).unwrap();
        let shapes: Vec<_> = p.feature_layers.iter().map(|l| l.weight.shape()).collect();
        assert_eq!(shapes, vec![(16, 32), (32, 8)]);
        assert_eq!(p.projection_layers.len(), 1);
        assert_eq!(p.projection_layers[0].weight.shape(), (8, 4));
        assert!(p
            .matrices()
            .iter()
            .skip(1)
            .step_by(2)
            .all(|b| b.data().iter().all(|&v| v == 0.0)));
        assert!(matches!(
            init_params(dims(), &[0], 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_network_gives_zero_embeddings() {
        let mut p = init_params(dims(), &[32], 0).unwrap();
        for m in p.matrices_mut() {
            m.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let h = p.forward_features(&random(3, 16, 1)).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_equals_stacked_rows_and_hand_forward() {
        let p = init_params(dims(), &[32], 5).unwrap();
        let x = random(2, 16, 9);
        let h = p.forward_features(&x).unwrap();
        for i in 0..2 {
            let single = p.forward_features(&x.slice_rows(i, i + 1)).unwrap();
            assert_eq!(single.row(0), h.row(i));
        }
        // Layer-by-layer oracle.
        let mut hand = Vec::new();
        for i in 0..2 {
            let mut v = x.row(i).to_vec();
            for (li, l) in p.feature_layers.iter().enumerate() {
                let mut next = vec![0.0; l.weight.cols()];
                for (j, n) in next.iter_mut().enumerate() {
                    let mut s = l.bias.get(0, j);
                    for (k, &vk) in v.iter().enumerate() {
                        s += vk * l.weight.get(k, j);
                    }
                    *n = if li + 1 < p.feature_layers.len() {
                        s.max(0.0)
                    } else {
                        s
                    };
                }
                v = next;
            }
            hand.push(v);
        }
        assert!(h.max_abs_diff(&Matrix::from_rows(&hand).unwrap()) <= 1e-12);
        assert!(p.forward_features(&random(1, 5, 0)).is_err());
    }

    #[test]
    fn projection_is_unit_norm_and_scale_invariant() {
        let p = init_params(dims(), &[32], 5).unwrap();
        let h = random(6, 8, 2);
        let z = p.forward_projection(&h).unwrap();
        for i in 0..6 {
            let n: f64 = z.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() <= 1e-12);
        }
        let z5 = p.forward_projection(&h.scale(5.0)).unwrap();
        assert!(z.max_abs_diff(&z5) <= 1e-12);
    }

    #[test]
    fn identity_projection_normalizes_3_4() {
        let mut p = init_params(
            EncoderDims {
                input: 2,
                embed: 2,
                proj: 2,
            },
            &[2],
            0,
        )
        .unwrap();
        p.projection_layers[0].weight = Matrix::identity(2);
        let z = p
            .forward_projection(&Matrix::row_vector(&[3.0, 4.0]))
            .unwrap();
        assert!((z.get(0, 0) - 0.6).abs() < 1e-15 && (z.get(0, 1) - 0.8).abs() < 1e-15);
        assert!(matches!(
            p.forward_projection(&Matrix::row_vector(&[0.0, 0.0])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn tape_forward_matches_direct_forward() {
        let p = init_params(dims(), &[32], 5).unwrap();
        let x = random(4, 16, 3);
        let mut t = Tape::new();
        let vars = p.register(&mut t);
        let xv = t.input(x.clone());
        let h = vars.features(&mut t, xv).unwrap();
        let z = vars.project(&mut t, h).unwrap();
        assert!(t.value(h).max_abs_diff(&p.forward_features(&x).unwrap()) <= 1e-12);
        let zd = p
            .forward_projection(&p.forward_features(&x).unwrap())
            .unwrap();
        assert!(t.value(z).max_abs_diff(&zd) <= 1e-12);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let p = init_params(
            EncoderDims {
                input: 5,
                embed: 4,
                proj: 3,
            },
            &[6],
            11,
        )
        .unwrap();
        let x = random(3, 5, 12);
        let params: Vec<Matrix> = p.matrices().into_iter().cloned().collect();
        let err = grad_check(
            |t, ps| {
                let xv = t.input(x.clone());
                let mut h = xv;
                for (i, pair) in ps[..4].chunks(2).enumerate() {
                    h = t.affine(h, pair[0], pair[1])?;
                    if i == 0 {
                        h = t.relu(h);
                    }
                }
                let z = t.affine(h, ps[4], ps[5])?;
                let z = t.l2_normalize_rows(z)?;
                let first = t.slice_cols(z, 0, 1)?;
                Ok(t.sum(first))
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn checkpoint_round_trip_and_bad_magic() {
        let p = EncoderParams::init(dims(), &[32, 16], &[8], 2).unwrap();
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..6], CHECKPOINT_MAGIC);
        let q = EncoderParams::from_bytes(&bytes).unwrap();
        assert_eq!(p, q);
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            EncoderParams::from_bytes(&bad),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            EncoderParams::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn sgd_fixed_point_and_closed_form() {
        let mut x = Matrix::scalar(1.0);
        let mut s = SgdState::new(0.1, 0.0, 0.0, &[&x]).unwrap();
        s.step(&mut [&mut x], &[Matrix::scalar(0.0)]).unwrap();
        assert_eq!(x.item(), 1.0);
        let g = x.clone();
        s.step(&mut [&mut x], &[g]).unwrap();
        assert!((x.item() - 0.9).abs() < 1e-15);
        assert!(s.step(&mut [&mut x], &[Matrix::zeros(2, 1)]).is_err());
    }

    #[test]
    fn sgd_momentum_decreases_convex_quadratic() {
        // f(x) = ½ xᵀ diag(1, 4) x; lr 0.1 is below 2/L = 0.5.
        let curv = [1.0, 4.0];
        let f = |x: &Matrix| {
            0.5 * x
                .data()
                .iter()
                .zip(curv)
                .map(|(v, c)| c * v * v)
                .sum::<f64>()
        };
        let mut x = Matrix::row_vector(&[1.0, -1.0]);
        let mut s = SgdState::new(0.1, 0.0, 0.0, &[&x]).unwrap();
        let mut prev = f(&x);
        for _ in 0..100 {
            let g = Matrix::row_vector(&[curv[0] * x.get(0, 0), curv[1] * x.get(0, 1)]);
            s.step(&mut [&mut x], &[g]).unwrap();
            let now = f(&x);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 10, 0.03).unwrap(), 0.03);
        assert!(cosine_lr(10, 10, 0.03).unwrap().abs() < 1e-18);
        assert!((cosine_lr(5, 10, 0.03).unwrap() - 0.015).abs() < 1e-15);
        assert!(cosine_lr(11, 10, 0.03).is_err());
        assert!(cosine_lr(0, 0, 0.03).is_err());
    }
}
