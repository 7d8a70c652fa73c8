//! The two-branch set classifier.
//!
//! Input sample: two tensors of shape (direction 2, trial S, time T), one
//! per sentiment condition (negative branch first). Per branch, each trial
//! row runs through Inception block 1, a GELU, and the results are averaged
//! over the trial dimension before Inception block 2. Block 2 is linear, so
//! averaging before it equals averaging its per-trial outputs; trials are
//! summed in a canonical content-sorted order, which makes the forward pass
//! bit-exact under any permutation of the trials within a set.
//!
//! The per-time features of both branches and directions are concatenated
//! as [neg-x, neg-y, pos-x, pos-y] (T values each) and fed to a hidden ReLU
//! layer and a sigmoid output unit.

use super::conv::{dot, row_conv_backward, row_conv_forward};
use super::inception::{InceptionConv, MAX_KERNEL};
use super::ops::{gelu_inner_tanh, gelu_prime, gelu_value, sigmoid};
use super::{fl, Scalar};
use crate::seed::SeedPath;
use crate::{Error, Result};
use rand::Rng;

/// Structural hyperparameters of the classifier.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Samples per trial segment (300 response-aligned, 350 reading-aligned).
    pub t_len: usize,
    /// Trials per bootstrap set.
    pub set_size: usize,
    /// Channels produced by the first Inception block of each backbone.
    pub filters: usize,
    /// Width of the fully connected hidden layer.
    pub hidden: usize,
    /// One backbone per direction (false) or shared across x/y (true).
    pub share_direction_weights: bool,
    /// Seed for weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            t_len: 300,
            set_size: 30,
            filters: 8,
            hidden: 64,
            share_direction_weights: true,
            seed: 0,
        }
    }
}

/// Fully connected layer with gradient buffers.
#[derive(Debug, Clone)]
pub struct Fc<T> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
    pub gw: Vec<T>,
    pub gb: Vec<T>,
}

impl<T: Scalar> Fc<T> {
    fn new(in_dim: usize, out_dim: usize) -> Self {
        Fc {
            in_dim,
            out_dim,
            w: vec![T::zero(); in_dim * out_dim],
            b: vec![T::zero(); out_dim],
            gw: vec![T::zero(); in_dim * out_dim],
            gb: vec![T::zero(); out_dim],
        }
    }

    fn init(&mut self, rng: &mut rand_chacha::ChaCha8Rng) {
        let bound = (6.0 / (self.in_dim + self.out_dim) as f64).sqrt();
        for w in self.w.iter_mut() {
            *w = fl(rng.gen_range(-bound..bound));
        }
    }
}

/// The backbone conv pair of one direction.
#[derive(Debug, Clone)]
pub struct Stack<T> {
    pub block1: InceptionConv<T>,
    pub block2: InceptionConv<T>,
}

/// One sentiment branch; `stacks` has one entry when direction weights are
/// shared, two otherwise.
#[derive(Debug, Clone)]
pub struct Branch<T> {
    pub stacks: Vec<Stack<T>>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    /// Index 0 = negative branch, 1 = positive branch.
    pub branches: [Branch<T>; 2],
    pub fc1: Fc<T>,
    pub fc2: Fc<T>,
}

/// Closed form for one Inception block: sum of k^2 over the six kernels
/// (286) per channel pair, plus six biases per output channel.
pub fn inception_block_param_count(in_c: usize, out_c: usize) -> usize {
    286 * in_c * out_c + 6 * out_c
}

/// Closed form for the whole model under a config.
pub fn model_param_count(cfg: &ModelConfig) -> usize {
    let stacks = if cfg.share_direction_weights { 1 } else { 2 };
    let backbone = stacks
        * (inception_block_param_count(1, cfg.filters) + inception_block_param_count(cfg.filters, 1));
    let fc1 = 4 * cfg.t_len * cfg.hidden + cfg.hidden;
    let fc2 = cfg.hidden + 1;
    2 * backbone + fc1 + fc2
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig) -> Self {
        let stacks = if cfg.share_direction_weights { 1 } else { 2 };
        let mk_branch = || Branch {
            stacks: (0..stacks)
                .map(|_| Stack {
                    block1: InceptionConv::new(1, cfg.filters),
                    block2: InceptionConv::new(cfg.filters, 1),
                })
                .collect(),
        };
        let mut model = Model {
            branches: [mk_branch(), mk_branch()],
            fc1: Fc::new(4 * cfg.t_len, cfg.hidden),
            fc2: Fc::new(cfg.hidden, 1),
            cfg,
        };
        model.init_weights();
        model
    }

    fn init_weights(&mut self) {
        let mut rng = SeedPath::new(self.cfg.seed).push_str("model-init").rng();
        for branch in self.branches.iter_mut() {
            for stack in branch.stacks.iter_mut() {
                stack.block1.init(&mut rng);
                stack.block2.init(&mut rng);
            }
        }
        self.fc1.init(&mut rng);
        self.fc2.init(&mut rng);
    }

    pub fn param_count(&self) -> usize {
        let convs: usize = self
            .branches
            .iter()
            .flat_map(|b| b.stacks.iter())
            .map(|s| s.block1.param_count() + s.block2.param_count())
            .sum();
        convs + self.fc1.w.len() + self.fc1.b.len() + self.fc2.w.len() + self.fc2.b.len()
    }

    pub fn zero_grads(&mut self) {
        for branch in self.branches.iter_mut() {
            for stack in branch.stacks.iter_mut() {
                stack.block1.zero_grads();
                stack.block2.zero_grads();
            }
        }
        self.fc1.gw.fill(T::zero());
        self.fc1.gb.fill(T::zero());
        self.fc2.gw.fill(T::zero());
        self.fc2.gb.fill(T::zero());
    }

    /// Visit every parameter tensor in a fixed canonical order:
    /// (name, weights, grads).
    pub fn for_each_param(&self, f: &mut impl FnMut(&str, &[T], &[T])) {
        for (bi, branch) in self.branches.iter().enumerate() {
            for (si, stack) in branch.stacks.iter().enumerate() {
                for (blk_no, blk) in [(1usize, &stack.block1), (2, &stack.block2)] {
                    for set in &blk.sets {
                        let base = format!("branch{bi}.stack{si}.block{blk_no}.k{}", set.k);
                        f(&format!("{base}.weight"), &set.w, &set.gw);
                        f(&format!("{base}.bias"), &set.b, &set.gb);
                    }
                }
            }
        }
        f("fc1.weight", &self.fc1.w, &self.fc1.gw);
        f("fc1.bias", &self.fc1.b, &self.fc1.gb);
        f("fc2.weight", &self.fc2.w, &self.fc2.gw);
        f("fc2.bias", &self.fc2.b, &self.fc2.gb);
    }

    /// Mutable counterpart of [`for_each_param`], same order.
    pub fn for_each_param_mut(&mut self, f: &mut impl FnMut(&str, &mut [T], &mut [T])) {
        for (bi, branch) in self.branches.iter_mut().enumerate() {
            for (si, stack) in branch.stacks.iter_mut().enumerate() {
                for (blk_no, blk) in [(1usize, &mut stack.block1), (2, &mut stack.block2)] {
                    for set in blk.sets.iter_mut() {
                        let base = format!("branch{bi}.stack{si}.block{blk_no}.k{}", set.k);
                        f(&format!("{base}.weight"), &mut set.w, &mut set.gw);
                        f(&format!("{base}.bias"), &mut set.b, &mut set.gb);
                    }
                }
            }
        }
        f("fc1.weight", &mut self.fc1.w, &mut self.fc1.gw);
        f("fc1.bias", &mut self.fc1.b, &mut self.fc1.gb);
        f("fc2.weight", &mut self.fc2.w, &mut self.fc2.gw);
        f("fc2.bias", &mut self.fc2.b, &mut self.fc2.gb);
    }

    /// All parameters flattened in canonical order.
    pub fn param_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |_, w, _| v.extend_from_slice(w));
        v
    }

    /// All gradients flattened in canonical order.
    pub fn grad_vec(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.param_count());
        self.for_each_param(&mut |_, _, g| v.extend_from_slice(g));
        v
    }

    pub fn set_param_vec(&mut self, flat: &[T]) {
        assert_eq!(flat.len(), self.param_count());
        let mut off = 0usize;
        self.for_each_param_mut(&mut |_, w, _| {
            w.copy_from_slice(&flat[off..off + w.len()]);
            off += w.len();
        });
    }

    /// Convert parameters to another precision (config and weights copied).
    pub fn convert<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::new(self.cfg.clone());
        let flat: Vec<U> = self
            .param_vec()
            .iter()
            .map(|v| U::from_f64(v.to_f64().unwrap()).unwrap())
            .collect();
        out.set_param_vec(&flat);
        out
    }
}

/// One input sample: per-branch flat tensors of shape (2, S, T), negative
/// branch first. Direction 0 is horizontal, 1 vertical.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub neg: Vec<T>,
    pub pos: Vec<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let n = 2 * cfg.set_size * cfg.t_len;
        Sample {
            neg: vec![T::zero(); n],
            pos: vec![T::zero(); n],
        }
    }

    pub fn branch(&self, b: usize) -> &[T] {
        if b == 0 {
            &self.neg
        } else {
            &self.pos
        }
    }
}

/// Per-(branch, stack) merged effective kernels plus their gradient
/// accumulators for the current batch.
struct MergedStack<T> {
    w1: Vec<T>,
    b1: Vec<T>,
    w2: Vec<T>,
    b2: Vec<T>,
    g_w1: Vec<T>,
    g_b1: Vec<T>,
    g_w2: Vec<T>,
    g_b2: Vec<T>,
}

/// Per-(branch, direction) activation cache for one sample.
struct UnitCache<T> {
    /// Pre-GELU block 1 output, `[S][F][T]`.
    h1: Vec<T>,
    /// Cached tanh(u) of the GELU at each h1 element.
    tanh_u: Vec<T>,
    /// Trial mean of the GELU output, `[F][T]`.
    mean_a: Vec<T>,
}

/// Reusable forward/backward scratch. One per worker thread; holds the
/// merged kernels for the current batch and the activation caches of the
/// sample most recently passed to [`Workspace::forward`].
pub struct Workspace<T> {
    cfg: ModelConfig,
    stacks_per_branch: usize,
    merged: Vec<MergedStack<T>>,
    units: Vec<UnitCache<T>>,
    canon: [Vec<u32>; 2],
    /// Concatenated features [neg-x, neg-y, pos-x, pos-y], length 4T.
    v: Vec<T>,
    z1: Vec<T>,
    a2: Vec<T>,
    z2: T,
    p: T,
    g_v: Vec<T>,
    g_z1: Vec<T>,
    g_mean_a: Vec<T>,
    g_trial: Vec<T>,
}

impl<T: Scalar> Workspace<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        let stacks_per_branch = if cfg.share_direction_weights { 1 } else { 2 };
        let (f, s, t, h) = (cfg.filters, cfg.set_size, cfg.t_len, cfg.hidden);
        let merged = (0..2 * stacks_per_branch)
            .map(|_| MergedStack {
                w1: vec![T::zero(); f * MAX_KERNEL],
                b1: vec![T::zero(); f],
                w2: vec![T::zero(); f * MAX_KERNEL],
                b2: vec![T::zero(); 1],
                g_w1: vec![T::zero(); f * MAX_KERNEL],
                g_b1: vec![T::zero(); f],
                g_w2: vec![T::zero(); f * MAX_KERNEL],
                g_b2: vec![T::zero(); 1],
            })
            .collect();
        let units = (0..4)
            .map(|_| UnitCache {
                h1: vec![T::zero(); s * f * t],
                tanh_u: vec![T::zero(); s * f * t],
                mean_a: vec![T::zero(); f * t],
            })
            .collect();
        Workspace {
            cfg: cfg.clone(),
            stacks_per_branch,
            merged,
            units,
            canon: [Vec::with_capacity(s), Vec::with_capacity(s)],
            v: vec![T::zero(); 4 * t],
            z1: vec![T::zero(); h],
            a2: vec![T::zero(); h],
            z2: T::zero(),
            p: T::zero(),
            g_v: vec![T::zero(); 4 * t],
            g_z1: vec![T::zero(); h],
            g_mean_a: vec![T::zero(); f * t],
            g_trial: vec![T::zero(); f * t],
        }
    }

    fn merged_idx(&self, branch: usize, dir: usize) -> usize {
        let si = dir.min(self.stacks_per_branch - 1);
        branch * self.stacks_per_branch + si
    }

    /// Build merged effective kernels and clear their gradient buffers.
    /// Call once per batch, before the forward/backward passes.
    pub fn begin_batch(&mut self, model: &Model<T>) {
        assert_eq!(model.cfg, self.cfg, "workspace/model config mismatch");
        for (bi, branch) in model.branches.iter().enumerate() {
            for (si, stack) in branch.stacks.iter().enumerate() {
                let m = &mut self.merged[bi * self.stacks_per_branch + si];
                stack.block1.merged_center_rows(&mut m.w1, &mut m.b1);
                stack.block2.merged_center_rows(&mut m.w2, &mut m.b2);
                m.g_w1.fill(T::zero());
                m.g_b1.fill(T::zero());
                m.g_w2.fill(T::zero());
                m.g_b2.fill(T::zero());
            }
        }
    }

    /// Scatter the accumulated merged-kernel gradients into the model's
    /// per-kernel gradient buffers. Call once per batch, after the samples.
    pub fn end_batch(&mut self, model: &mut Model<T>) {
        for (bi, branch) in model.branches.iter_mut().enumerate() {
            for (si, stack) in branch.stacks.iter_mut().enumerate() {
                let m = &self.merged[bi * self.stacks_per_branch + si];
                stack.block1.scatter_center_row_grads(&m.g_w1, &m.g_b1);
                stack.block2.scatter_center_row_grads(&m.g_w2, &m.g_b2);
            }
        }
    }

    /// Canonical trial order: indices sorted by lexicographic comparison of
    /// the trial's (x row, y row). Ties are bit-identical trials, so the sum
    /// over trials taken in this order is invariant under any permutation of
    /// the set's trials.
    fn canonical_order(input: &[T], s: usize, t: usize, out: &mut Vec<u32>) {
        out.clear();
        out.extend(0..s as u32);
        let row = |dir: usize, trial: u32| -> &[T] {
            &input[(dir * s + trial as usize) * t..][..t]
        };
        out.sort_by(|&a, &b| {
            for dir in 0..2 {
                let (ra, rb) = (row(dir, a), row(dir, b));
                for i in 0..t {
                    let ord = T::total_order(ra[i], rb[i]);
                    if ord != std::cmp::Ordering::Equal {
                        return ord;
                    }
                }
            }
            std::cmp::Ordering::Equal
        });
    }

    /// Forward pass. Returns the predicted probability. Errors if any
    /// intermediate value is non-finite, naming the first offending layer.
    ///
    /// Reads the merged kernels built by [`Self::begin_batch`]; call that
    /// whenever the model's parameters have changed since the last batch,
    /// including before pure-evaluation passes.
    pub fn forward(&mut self, model: &Model<T>, sample: &Sample<T>) -> Result<T> {
        let (f, s, t) = (self.cfg.filters, self.cfg.set_size, self.cfg.t_len);
        let n = 2 * s * t;
        assert_eq!(sample.neg.len(), n, "sample shape mismatch");
        assert_eq!(sample.pos.len(), n);

        let inv_s: T = fl(1.0 / s as f64);
        for branch in 0..2 {
            let x = sample.branch(branch);
            let mut canon = std::mem::take(&mut self.canon[branch]);
            Self::canonical_order(x, s, t, &mut canon);
            for dir in 0..2 {
                let m = &self.merged[self.merged_idx(branch, dir)];
                let unit = &mut self.units[branch * 2 + dir];
                for trial in 0..s {
                    let in_row = &x[(dir * s + trial) * t..][..t];
                    let out = &mut unit.h1[trial * f * t..][..f * t];
                    row_conv_forward(in_row, 1, t, &m.w1, &m.b1, f, MAX_KERNEL, out);
                }
                // GELU in two single-purpose passes (a fused loop with a
                // tuple result defeats autovectorization), then the trial
                // mean accumulated in canonical order.
                let ft = f * t;
                for (h1, tu) in unit.h1[..s * ft]
                    .chunks_exact(ft)
                    .zip(unit.tanh_u[..s * ft].chunks_exact_mut(ft))
                {
                    for i in 0..ft {
                        tu[i] = gelu_inner_tanh(h1[i]);
                    }
                }
                let mean_a = &mut unit.mean_a[..ft];
                mean_a.fill(T::zero());
                for &trial in canon.iter() {
                    let base = trial as usize * ft;
                    let h1 = &unit.h1[base..base + ft];
                    let tu = &unit.tanh_u[base..base + ft];
                    for i in 0..ft {
                        mean_a[i] += gelu_value(h1[i], tu[i]);
                    }
                }
                for v in unit.mean_a.iter_mut() {
                    *v *= inv_s;
                }
                // Block 2 is linear, so applying it to the trial mean equals
                // the trial mean of its per-trial outputs.
                let y = &mut self.v[(branch * 2 + dir) * t..][..t];
                row_conv_forward(&unit.mean_a, f, t, &m.w2, &m.b2, 1, MAX_KERNEL, y);
            }
            self.canon[branch] = canon;
        }

        // Fully connected head.
        let (h, t4) = (self.cfg.hidden, 4 * t);
        for j in 0..h {
            let wrow = &model.fc1.w[j * t4..][..t4];
            let acc = model.fc1.b[j] + dot(wrow, &self.v);
            self.z1[j] = acc;
            self.a2[j] = if acc > T::zero() { acc } else { T::zero() };
        }
        let z2 = model.fc2.b[0] + dot(&model.fc2.w, &self.a2);
        self.z2 = z2;
        self.p = sigmoid(z2);

        if !self.p.is_finite() || self.v.iter().any(|v| !v.is_finite()) {
            return Err(self.locate_fault());
        }
        Ok(self.p)
    }

    /// Name the first layer holding a non-finite value.
    fn locate_fault(&self) -> Error {
        let names = ["neg.x", "neg.y", "pos.x", "pos.y"];
        for (ui, unit) in self.units.iter().enumerate() {
            if unit.h1.iter().any(|v| !v.is_finite()) {
                return Error::Model {
                    layer: format!("{}.block1", names[ui]),
                    message: "non-finite activation".into(),
                };
            }
            if unit.mean_a.iter().any(|v| !v.is_finite()) {
                return Error::Model {
                    layer: format!("{}.gelu-mean", names[ui]),
                    message: "non-finite activation".into(),
                };
            }
        }
        if self.v.iter().any(|v| !v.is_finite()) {
            return Error::Model {
                layer: "block2".into(),
                message: "non-finite feature".into(),
            };
        }
        if self.z1.iter().any(|v| !v.is_finite()) {
            return Error::Model {
                layer: "fc1".into(),
                message: "non-finite activation".into(),
            };
        }
        Error::Model {
            layer: "fc2".into(),
            message: "non-finite output".into(),
        }
    }

    /// Probability from the most recent forward pass.
    pub fn probability(&self) -> T {
        self.p
    }

    /// Backward pass from a gradient on the pre-sigmoid output. For the
    /// class-weighted cross entropy this is `weight * (p - label)`.
    /// Parameter gradients accumulate into the model's fc buffers and the
    /// workspace's merged-kernel buffers; input gradients (for attribution)
    /// accumulate into `g_input` when provided.
    pub fn backward(
        &mut self,
        model: &mut Model<T>,
        sample: &Sample<T>,
        g_z2: T,
        mut g_input: Option<&mut Sample<T>>,
    ) {
        let (f, s, t) = (self.cfg.filters, self.cfg.set_size, self.cfg.t_len);
        let (h, t4) = (self.cfg.hidden, 4 * t);
        let inv_s: T = fl(1.0 / s as f64);

        // fc2
        model.fc2.gb[0] += g_z2;
        for j in 0..h {
            model.fc2.gw[j] += g_z2 * self.a2[j];
            let g_a2 = g_z2 * model.fc2.w[j];
            self.g_z1[j] = if self.z1[j] > T::zero() { g_a2 } else { T::zero() };
        }
        // fc1
        self.g_v.fill(T::zero());
        for j in 0..h {
            let gz = self.g_z1[j];
            model.fc1.gb[j] += gz;
            let wrow = &model.fc1.w[j * t4..][..t4];
            let grow = &mut model.fc1.gw[j * t4..][..t4];
            for i in 0..t4 {
                grow[i] += gz * self.v[i];
                self.g_v[i] += gz * wrow[i];
            }
        }

        // Backbones.
        for branch in 0..2 {
            let x = sample.branch(branch);
            for dir in 0..2 {
                let mi = self.merged_idx(branch, dir);
                let unit_idx = branch * 2 + dir;
                let g_y = &self.g_v[unit_idx * t..][..t];

                // Block 2 backward on the trial-mean plane.
                self.g_mean_a.fill(T::zero());
                {
                    let m = &mut self.merged[mi];
                    let unit = &self.units[unit_idx];
                    row_conv_backward(
                        &unit.mean_a,
                        f,
                        t,
                        &m.w2,
                        1,
                        MAX_KERNEL,
                        g_y,
                        Some(&mut self.g_mean_a),
                        &mut m.g_w2,
                        &mut m.g_b2,
                    );
                }

                // Through the mean and the GELU, per trial, then block 1.
                let ft = f * t;
                for trial in 0..s {
                    {
                        let unit = &self.units[unit_idx];
                        let h1 = &unit.h1[trial * ft..][..ft];
                        let tu = &unit.tanh_u[trial * ft..][..ft];
                        let g_mean_a = &self.g_mean_a[..ft];
                        let g_trial = &mut self.g_trial[..ft];
                        for i in 0..ft {
                            g_trial[i] = g_mean_a[i] * inv_s * gelu_prime(h1[i], tu[i]);
                        }
                    }
                    let in_row = &x[(dir * s + trial) * t..][..t];
                    let gi_row = g_input.as_deref_mut().map(|gi| {
                        let buf = if branch == 0 { &mut gi.neg } else { &mut gi.pos };
                        &mut buf[(dir * s + trial) * t..][..t]
                    });
                    let m = &mut self.merged[mi];
                    row_conv_backward(
                        in_row,
                        1,
                        t,
                        &m.w1,
                        f,
                        MAX_KERNEL,
                        &self.g_trial,
                        gi_row,
                        &mut m.g_w1,
                        &mut m.g_b1,
                    );
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::ops::weighted_bce;
    use crate::seed::derive_rng;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            t_len: 20,
            set_size: 4,
            filters: 2,
            hidden: 6,
            share_direction_weights: true,
            seed: 3,
        }
    }

    fn random_sample(cfg: &ModelConfig, tag: u64) -> Sample<f64> {
        let mut rng = derive_rng(tag, "model-test-sample", 0);
        let n = 2 * cfg.set_size * cfg.t_len;
        Sample {
            neg: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            pos: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn test_param_count_matches_closed_form() {
        for shared in [true, false] {
            let cfg = ModelConfig {
                share_direction_weights: shared,
                ..ModelConfig::default()
            };
            let model = Model::<f32>::new(cfg.clone());
            assert_eq!(model.param_count(), model_param_count(&cfg));
            assert_eq!(model.param_vec().len(), model_param_count(&cfg));
        }
        // Spot value for the default shared config, T = 300:
        // backbone per branch = (286*8 + 48) + (286*8 + 6) = 4630
        // fc1 = 1200*64 + 64, fc2 = 65 => total 2*4630 + 76864 + 65
        let d = ModelConfig::default();
        assert_eq!(model_param_count(&d), 2 * 4630 + 76864 + 65);
    }

    #[test]
    fn test_forward_is_deterministic_and_in_range() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone());
        let sample = random_sample(&cfg, 1);
        let mut ws = Workspace::new(&cfg);
        ws.begin_batch(&model);
        let p1 = ws.forward(&model, &sample).unwrap();
        let p2 = ws.forward(&model, &sample).unwrap();
        assert_eq!(p1, p2);
        assert!(p1 > 0.0 && p1 < 1.0);
    }

    #[test]
    fn test_trial_permutation_leaves_probability_bit_identical() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone());
        let sample = random_sample(&cfg, 2);
        let mut ws = Workspace::new(&cfg);
        ws.begin_batch(&model);
        let p0 = ws.forward(&model, &sample).unwrap();

        let mut rng = derive_rng(9, "perm", 0);
        for _ in 0..10 {
            let mut order: Vec<usize> = (0..cfg.set_size).collect();
            order.shuffle(&mut rng);
            let permute = |buf: &[f64]| {
                let mut out = vec![0.0; buf.len()];
                for dir in 0..2 {
                    for (new_s, &old_s) in order.iter().enumerate() {
                        let src = &buf[(dir * cfg.set_size + old_s) * cfg.t_len..][..cfg.t_len];
                        out[(dir * cfg.set_size + new_s) * cfg.t_len..][..cfg.t_len]
                            .copy_from_slice(src);
                    }
                }
                out
            };
            let shuffled = Sample {
                neg: permute(&sample.neg),
                pos: permute(&sample.pos),
            };
            let p = ws.forward(&model, &shuffled).unwrap();
            assert_eq!(p.to_bits(), p0.to_bits(), "order {order:?}");
        }
    }

    #[test]
    fn test_swapping_branches_changes_probability() {
        // The two branches have independent weights, so sentiment is not
        // interchangeable.
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone());
        let sample = random_sample(&cfg, 4);
        let swapped = Sample {
            neg: sample.pos.clone(),
            pos: sample.neg.clone(),
        };
        let mut ws = Workspace::new(&cfg);
        ws.begin_batch(&model);
        let p = ws.forward(&model, &sample).unwrap();
        let q = ws.forward(&model, &swapped).unwrap();
        assert_ne!(p, q);
    }

    #[test]
    fn test_full_gradient_check() {
        // Analytic gradients vs central differences over every parameter,
        // f64, h = 1e-5, max relative error < 1e-4.
        let cfg = ModelConfig {
            t_len: 12,
            set_size: 3,
            filters: 2,
            hidden: 5,
            share_direction_weights: true,
            seed: 11,
        };
        let max_err = gradient_check_max_rel_err(&cfg, 5, 1.0, 1.3);
        assert!(max_err < 1e-4, "max relative error {max_err}");

        // Also exercise the unshared-direction variant.
        let cfg2 = ModelConfig {
            share_direction_weights: false,
            ..cfg
        };
        let max_err2 = gradient_check_max_rel_err(&cfg2, 6, 0.0, 0.8);
        assert!(max_err2 < 1e-4, "unshared: max relative error {max_err2}");
    }

    /// Shared helper: full-parameter gradient check on a random sample.
    pub fn gradient_check_max_rel_err(
        cfg: &ModelConfig,
        sample_tag: u64,
        label: f64,
        class_weight: f64,
    ) -> f64 {
        let mut model = Model::<f64>::new(cfg.clone());
        let sample = random_sample(cfg, sample_tag);
        let mut ws = Workspace::new(cfg);

        model.zero_grads();
        ws.begin_batch(&model);
        let p = ws.forward(&model, &sample).unwrap();
        ws.backward(&mut model, &sample, class_weight * (p - label), None);
        ws.end_batch(&mut model);
        let analytic = model.grad_vec();

        let theta0 = model.param_vec();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for i in 0..theta0.len() {
            let mut tp = theta0.clone();
            tp[i] += h;
            model.set_param_vec(&tp);
            ws.begin_batch(&model);
            let pp = ws.forward(&model, &sample).unwrap();
            let lp = weighted_bce(pp, label, class_weight);

            tp[i] = theta0[i] - h;
            model.set_param_vec(&tp);
            ws.begin_batch(&model);
            let pm = ws.forward(&model, &sample).unwrap();
            let lm = weighted_bce(pm, label, class_weight);

            let numeric = (lp - lm) / (2.0 * h);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((analytic[i] - numeric).abs() / denom);
            tp[i] = theta0[i];
        }
        model.set_param_vec(&theta0);
        max_rel
    }

    #[test]
    fn test_zero_input_direction_gets_zero_conv_weight_gradients() {
        // Conv weight gradients are correlations with the input, so an
        // all-zero direction contributes exactly zero to its block-1 weight
        // gradients (biases still receive gradient). Checked on the
        // unshared-direction variant where the y path has its own stack.
        let cfg = ModelConfig {
            share_direction_weights: false,
            ..tiny_cfg()
        };
        let mut sample = random_sample(&cfg, 7);
        let n_dir = cfg.set_size * cfg.t_len;
        sample.neg[n_dir..].fill(0.0);
        sample.pos[n_dir..].fill(0.0);

        let mut model = Model::<f64>::new(cfg.clone());
        let mut ws = Workspace::new(&cfg);
        model.zero_grads();
        ws.begin_batch(&model);
        let p = ws.forward(&model, &sample).unwrap();
        ws.backward(&mut model, &sample, p - 1.0, None);
        ws.end_batch(&mut model);
        for branch in &model.branches {
            let blk = &branch.stacks[1].block1; // stack 1 = y direction
            for set in &blk.sets {
                assert!(set.gw.iter().all(|&g| g == 0.0), "k={} weight grads", set.k);
            }
        }
    }

    #[test]
    fn test_forward_rejects_non_finite_input() {
        let cfg = tiny_cfg();
        let model = Model::<f64>::new(cfg.clone());
        let mut sample = random_sample(&cfg, 8);
        sample.neg[5] = f64::NAN;
        let mut ws = Workspace::new(&cfg);
        ws.begin_batch(&model);
        let err = ws.forward(&model, &sample).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("block1"), "fault should name the layer: {msg}");
    }

    #[test]
    fn test_convert_precision_roundtrip() {
        let cfg = tiny_cfg();
        let model = Model::<f32>::new(cfg.clone());
        let model64 = model.convert::<f64>();
        let back = model64.convert::<f32>();
        assert_eq!(model.param_vec(), back.param_vec());
    }
}
