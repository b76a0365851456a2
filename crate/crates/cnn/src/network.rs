//! Residual network whose pooling placement follows a [`PoolingConfig`].
//!
//! Block 0 is the stem (`conv3x3 -> BN -> ReLU`). Blocks `1..L` are basic
//! residual blocks. A block at a pooling position starts its main path with
//! a 2x2 max pool and its skip path with a 2x2 average pool; a 1x1
//! projection is added to the skip whenever the channel count changes.
//! Channels follow the block index, so every configuration of a space has
//! the same parameters and one [`WeightSet`] serves them all.

use poolmix::rng::{Purpose, Stream};
use poolmix::search_space::{config_to_positions, ensure_valid, PoolingConfig, SearchSpace};

use crate::error::{CnnError, Result};
use crate::gradcheck::{check_objective, GradCheckReport, Objective};
use crate::layers::*;
use crate::tensor::{lit, Scalar, Tensor4};

/// Smallest batch [`train_step`] accepts; batch statistics are too noisy
/// below it.
pub const TRAIN_BATCH_FLOOR: usize = 8;

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

/// Blocks per stage of the evenly split reference placement: the residual
/// blocks are divided as evenly as possible (earlier stages take the
/// remainder) and the stem joins stage 0. `(10, 2)` gives `[4,3,3]`.
pub fn reference_config(total_blocks: u32, num_poolings: u32) -> PoolingConfig {
    let stages = num_poolings + 1;
    let residual = total_blocks - 1;
    let mut counts: Vec<u32> = (0..stages)
        .map(|s| residual / stages + u32::from(s < residual % stages))
        .collect();
    counts[0] += 1;
    PoolingConfig::new(counts)
}

/// Channels per block index: `base * 2^s` where `s` is the block's stage in
/// the reference placement. `(10, 2, 16)` gives sixteen x4, 32 x3, 64 x3.
pub fn default_channels(total_blocks: u32, num_poolings: u32, base: usize) -> Vec<usize> {
    let reference = reference_config(total_blocks, num_poolings);
    (0..total_blocks)
        .map(|b| base << reference.stage_of_block(b))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Conv,
    Gamma,
    Beta,
    LinearWeight,
    LinearBias,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    /// Zero-initialised batch-norm scale (last norm of a residual branch).
    pub zero_init: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn decays(&self) -> bool {
        matches!(self.kind, ParamKind::Conv | ParamKind::LinearWeight)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvBnIdx {
    conv: usize,
    gamma: usize,
    beta: usize,
    norm: usize,
    out: usize,
    k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockPlan {
    pub index: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub input_size: u32,
    pub downsample: bool,
    first: ConvBnIdx,
    second: ConvBnIdx,
    projection: Option<usize>,
}

impl BlockPlan {
    pub fn output_size(&self) -> u32 {
        if self.downsample {
            self.input_size / 2
        } else {
            self.input_size
        }
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }
}

/// Layer list of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkPlan {
    config: PoolingConfig,
    input_channels: usize,
    input_size: u32,
    num_classes: usize,
    channels: Vec<usize>,
    stem: ConvBnIdx,
    blocks: Vec<BlockPlan>,
    head_weight: usize,
    head_bias: usize,
    params: Vec<ParamSpec>,
    num_norms: usize,
}

/// Lays out the network for `config`; pooling happens at the start of each
/// block listed by `config_to_positions(config)`.
pub fn build_network(
    space: &SearchSpace,
    config: &PoolingConfig,
    channels: &[usize],
    input_channels: usize,
    input_size: u32,
    num_classes: usize,
) -> Result<NetworkPlan> {
    ensure_valid(config, space)?;
    let l = space.total_blocks() as usize;
    if channels.len() != l {
        return Err(CnnError::Plan(format!(
            "channel schedule has {} entries for {l} blocks",
            channels.len()
        )));
    }
    if channels.contains(&0) || input_channels == 0 || num_classes < 2 {
        return Err(CnnError::Plan(
            "channels must be positive and there must be at least two classes".into(),
        ));
    }
    let positions: Vec<usize> = config_to_positions(config)
        .iter()
        .map(|&p| p as usize)
        .collect();

    let mut params = Vec::new();
    let mut num_norms = 0;
    let mut conv_bn = |params: &mut Vec<ParamSpec>,
                       name: String,
                       cin: usize,
                       cout: usize,
                       k: usize,
                       zero: bool| {
        let conv = params.len();
        params.push(ParamSpec {
            name: format!("{name}.conv"),
            shape: vec![cout, cin, k, k],
            kind: ParamKind::Conv,
            zero_init: false,
        });
        params.push(ParamSpec {
            name: format!("{name}.gamma"),
            shape: vec![cout],
            kind: ParamKind::Gamma,
            zero_init: zero,
        });
        params.push(ParamSpec {
            name: format!("{name}.beta"),
            shape: vec![cout],
            kind: ParamKind::Beta,
            zero_init: false,
        });
        num_norms += 1;
        ConvBnIdx {
            conv,
            gamma: conv + 1,
            beta: conv + 2,
            norm: num_norms - 1,
            out: cout,
            k,
        }
    };

    let stem = conv_bn(
        &mut params,
        "stem".into(),
        input_channels,
        channels[0],
        3,
        false,
    );
    let mut size = input_size;
    let mut blocks = Vec::with_capacity(l.saturating_sub(1));
    for i in 1..l {
        let (cin, cout) = (channels[i - 1], channels[i]);
        let downsample = positions.contains(&i);
        if downsample && (size < 2 || !size.is_multiple_of(2)) {
            return Err(CnnError::Plan(format!(
                "cannot pool {size} px before block {i} of {config}"
            )));
        }
        let first = conv_bn(&mut params, format!("block{i}.a"), cin, cout, 3, false);
        let second = conv_bn(&mut params, format!("block{i}.b"), cout, cout, 3, true);
        let projection = (cin != cout).then(|| {
            params.push(ParamSpec {
                name: format!("block{i}.proj"),
                shape: vec![cout, cin, 1, 1],
                kind: ParamKind::Conv,
                zero_init: false,
            });
            params.len() - 1
        });
        blocks.push(BlockPlan {
            index: i,
            in_channels: cin,
            out_channels: cout,
            input_size: size,
            downsample,
            first,
            second,
            projection,
        });
        if downsample {
            size /= 2;
        }
    }
    if positions.iter().any(|&p| p == 0 || p >= l) {
        return Err(CnnError::Plan(format!(
            "pooling positions of {config} leave the network"
        )));
    }
    let last = channels[l - 1];
    let head_weight = params.len();
    params.push(ParamSpec {
        name: "head.weight".into(),
        shape: vec![num_classes, last],
        kind: ParamKind::LinearWeight,
        zero_init: false,
    });
    params.push(ParamSpec {
        name: "head.bias".into(),
        shape: vec![num_classes],
        kind: ParamKind::LinearBias,
        zero_init: false,
    });
    Ok(NetworkPlan {
        config: config.clone(),
        input_channels,
        input_size,
        num_classes,
        channels: channels.to_vec(),
        stem,
        blocks,
        head_weight,
        head_bias: head_weight + 1,
        params,
        num_norms,
    })
}

impl NetworkPlan {
    pub fn config(&self) -> &PoolingConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[BlockPlan] {
        &self.blocks
    }

    pub fn channels(&self) -> &[usize] {
        &self.channels
    }

    pub fn input_size(&self) -> u32 {
        self.input_size
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(ParamSpec::len).sum()
    }

    /// Block indices that start with a pool.
    pub fn pool_blocks(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.downsample)
            .map(|b| b.index)
            .collect()
    }

    /// Spatial size entering each block (index 0 is the stem).
    pub fn block_sizes(&self) -> Vec<u32> {
        std::iter::once(self.input_size)
            .chain(self.blocks.iter().map(|b| b.input_size))
            .collect()
    }

    /// Spatial size after the last block.
    pub fn output_size(&self) -> u32 {
        self.blocks
            .last()
            .map_or(self.input_size, BlockPlan::output_size)
    }

    /// Whether `ws` has this plan's parameter shapes.
    pub fn compatible(&self, ws: &WeightSet<impl Scalar>) -> bool {
        ws.params.len() == self.params.len()
            && ws
                .params
                .iter()
                .zip(&self.params)
                .all(|(p, s)| p.value.len() == s.len())
            && ws.running.len() == self.num_norms
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<F> {
    pub value: Vec<F>,
    pub velocity: Vec<F>,
    pub decay: bool,
}

/// One independent set of network weights with its optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet<F> {
    pub model: usize,
    pub params: Vec<Param<F>>,
    /// Running `(mean, var)` per batch norm.
    pub running: Vec<(Vec<F>, Vec<F>)>,
    pub steps: u64,
}

impl<F: Scalar> WeightSet<F> {
    /// Fan-in scaled Gaussian convolutions (`sqrt(2 / fan_in)`), linear
    /// weights at `sqrt(1 / fan_in)`, unit norm scales except the last norm
    /// of every residual branch, zero shifts and biases. Each model index
    /// draws from its own substream of `seed`.
    pub fn init(plan: &NetworkPlan, model: usize, seed: u64) -> Self {
        let mut rng = Stream::with_stream_id(seed, ((Purpose::Init as u64) << 32) | model as u64);
        let params = plan
            .params
            .iter()
            .map(|spec| {
                let n = spec.len();
                let value: Vec<F> = match spec.kind {
                    ParamKind::Conv | ParamKind::LinearWeight => {
                        let fan_in: usize = spec.shape[1..].iter().product();
                        let gain = if spec.kind == ParamKind::Conv {
                            2.0
                        } else {
                            1.0
                        };
                        let std = (gain / fan_in as f64).sqrt();
                        (0..n).map(|_| lit(std * rng.standard_normal())).collect()
                    }
                    ParamKind::Gamma if !spec.zero_init => vec![F::one(); n],
                    _ => vec![F::zero(); n],
                };
                Param {
                    value,
                    velocity: vec![F::zero(); n],
                    decay: spec.decays(),
                }
            })
            .collect();
        let mut running = vec![(Vec::new(), Vec::new()); plan.num_norms];
        for cb in plan.conv_bns() {
            running[cb.norm] = (vec![F::zero(); cb.out], vec![F::one(); cb.out]);
        }
        Self {
            model,
            params,
            running,
            steps: 0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values, concatenated in layout order.
    pub fn flat_values(&self) -> Vec<F> {
        self.params
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[F]) {
        let mut off = 0;
        for p in &mut self.params {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
    }

    pub fn cast<G: Scalar>(&self) -> WeightSet<G> {
        let conv = |v: &[F]| {
            v.iter()
                .map(|x| G::from(*x).expect("finite"))
                .collect::<Vec<G>>()
        };
        WeightSet {
            model: self.model,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    value: conv(&p.value),
                    velocity: conv(&p.velocity),
                    decay: p.decay,
                })
                .collect(),
            running: self
                .running
                .iter()
                .map(|(m, v)| (conv(m), conv(v)))
                .collect(),
            steps: self.steps,
        }
    }
}

impl NetworkPlan {
    fn conv_bns(&self) -> Vec<ConvBnIdx> {
        let mut out = vec![self.stem];
        for b in &self.blocks {
            out.push(b.first);
            out.push(b.second);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; caches kept for backward.
    Train,
    /// Running statistics; no caches.
    Eval,
}

#[derive(Debug, Clone)]
struct ConvBnCache<F> {
    input: Tensor4<F>,
    bn: BnCache<F>,
}

#[derive(Debug, Clone)]
struct BlockCache<F> {
    in_shape: [usize; 4],
    pool_argmax: Option<Vec<u32>>,
    first: ConvBnCache<F>,
    hidden: Tensor4<F>,
    second: ConvBnCache<F>,
    skip_input: Option<Tensor4<F>>,
    output: Tensor4<F>,
}

/// Logits plus what backward needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<F> {
    pub logits: Vec<F>,
    pub batch: usize,
    mode: Mode,
    stem: Option<(ConvBnCache<F>, Tensor4<F>)>,
    blocks: Vec<BlockCache<F>>,
    pooled: Vec<F>,
    last_shape: [usize; 4],
    /// Batch `(mean, biased var)` per norm, training mode only.
    batch_stats: Vec<(Vec<F>, Vec<F>)>,
    /// Hash of ReLU masks and max-pool winners when tracking was requested.
    pub kink_signature: u64,
}

struct Kinks(Option<std::hash::DefaultHasher>);

impl Kinks {
    fn relu<F: Scalar>(&mut self, y: &Tensor4<F>) {
        use std::hash::Hasher;
        if let Some(h) = &mut self.0 {
            for chunk in y.data().chunks(64) {
                let mut bits = 0u64;
                for (i, v) in chunk.iter().enumerate() {
                    if *v > F::zero() {
                        bits |= 1 << i;
                    }
                }
                h.write_u64(bits);
            }
        }
    }

    fn argmax(&mut self, arg: &[u32]) {
        use std::hash::Hasher;
        if let Some(h) = &mut self.0 {
            arg.iter().for_each(|&a| h.write_u32(a));
        }
    }

    fn finish(self) -> u64 {
        use std::hash::Hasher;
        self.0.map_or(0, |h| h.finish())
    }
}

fn finite<F: Scalar>(t: &Tensor4<F>, layer: impl FnOnce() -> String) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(CnnError::NonFinite { layer: layer() })
    }
}

fn conv_bn_forward<F: Scalar>(
    x: &Tensor4<F>,
    idx: ConvBnIdx,
    ws: &WeightSet<F>,
    mode: Mode,
    stats: &mut Vec<(Vec<F>, Vec<F>)>,
) -> Result<(Tensor4<F>, Option<ConvBnCache<F>>)> {
    let z = conv2d_forward(x, &ws.params[idx.conv].value, idx.out, idx.k, None)?;
    let (gamma, beta) = (&ws.params[idx.gamma].value, &ws.params[idx.beta].value);
    match mode {
        Mode::Train => {
            let (y, bn) = batch_norm_train(&z, gamma, beta)?;
            stats.push((bn.mean.clone(), bn.var.clone()));
            Ok((
                y,
                Some(ConvBnCache {
                    input: x.clone(),
                    bn,
                }),
            ))
        }
        Mode::Eval => {
            let (m, v) = &ws.running[idx.norm];
            Ok((batch_norm_eval(&z, gamma, beta, m, v)?, None))
        }
    }
}

fn forward_impl<F: Scalar>(
    plan: &NetworkPlan,
    ws: &WeightSet<F>,
    x: &Tensor4<F>,
    mode: Mode,
    track: bool,
) -> Result<ForwardPass<F>> {
    let expect = [
        plan.input_channels,
        plan.input_size as usize,
        plan.input_size as usize,
    ];
    if [x.channels(), x.height(), x.width()] != expect {
        return Err(CnnError::Shape(format!(
            "batch {:?} does not match the plan's input {expect:?}",
            x.shape()
        )));
    }
    if !plan.compatible(ws) {
        return Err(CnnError::Shape("weight set does not match the plan".into()));
    }
    let train = mode == Mode::Train;
    let mut kinks = Kinks(track.then(std::hash::DefaultHasher::new));
    let mut stats = Vec::new();

    let (z, c) = conv_bn_forward(x, plan.stem, ws, mode, &mut stats)?;
    let mut h = relu_forward(&z);
    kinks.relu(&h);
    finite(&h, || "stem".into())?;
    let stem = c.map(|c| (c, h.clone()));

    let mut caches = Vec::with_capacity(plan.blocks.len());
    for b in &plan.blocks {
        let in_shape = h.shape();
        let (main_in, pool_argmax) = if b.downsample {
            let (p, arg) = max_pool2_forward(&h)?;
            kinks.argmax(&arg);
            (p, Some(arg))
        } else {
            (h.clone(), None)
        };
        let (z1, c1) = conv_bn_forward(&main_in, b.first, ws, mode, &mut stats)?;
        let hidden = relu_forward(&z1);
        kinks.relu(&hidden);
        let (mut sum, c2) = conv_bn_forward(&hidden, b.second, ws, mode, &mut stats)?;
        let skip_base = if b.downsample {
            avg_pool2_forward(&h)?
        } else {
            h
        };
        let skip = match b.projection {
            Some(p) => conv2d_forward(&skip_base, &ws.params[p].value, b.out_channels, 1, None)?,
            None => skip_base.clone(),
        };
        sum.add_assign(&skip);
        let out = relu_forward(&sum);
        kinks.relu(&out);
        finite(&out, || format!("block {}", b.index))?;
        if train {
            caches.push(BlockCache {
                in_shape,
                pool_argmax,
                first: c1.expect("train cache"),
                hidden,
                second: c2.expect("train cache"),
                skip_input: b.projection.map(|_| skip_base),
                output: out.clone(),
            });
        }
        h = out;
    }

    let pooled = global_avg_pool_forward(&h);
    let n = x.batch();
    let logits = linear_forward(
        &pooled,
        n,
        &ws.params[plan.head_weight].value,
        &ws.params[plan.head_bias].value,
    )?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CnnError::NonFinite {
            layer: "head".into(),
        });
    }
    Ok(ForwardPass {
        logits,
        batch: n,
        mode,
        stem,
        blocks: caches,
        pooled,
        last_shape: h.shape(),
        batch_stats: stats,
        kink_signature: kinks.finish(),
    })
}

/// Logits for a batch. Deterministic given weights and input.
pub fn forward<F: Scalar>(
    plan: &NetworkPlan,
    ws: &WeightSet<F>,
    x: &Tensor4<F>,
    mode: Mode,
) -> Result<ForwardPass<F>> {
    forward_impl(plan, ws, x, mode, false)
}

fn conv_bn_backward<F: Scalar>(
    dy: &Tensor4<F>,
    idx: ConvBnIdx,
    cache: &ConvBnCache<F>,
    ws: &WeightSet<F>,
    grads: &mut [Vec<F>],
) -> Result<Tensor4<F>> {
    let (dz, dg, db) = batch_norm_backward(dy, &cache.bn, &ws.params[idx.gamma].value);
    let (dx, dw, _) = conv2d_backward(
        &cache.input,
        &ws.params[idx.conv].value,
        idx.out,
        idx.k,
        &dz,
    )?;
    grads[idx.gamma] = dg;
    grads[idx.beta] = db;
    grads[idx.conv] = dw;
    Ok(dx)
}

/// Parameter gradients of the loss whose logit gradient is `dlogits`, in
/// layout order.
pub fn backward<F: Scalar>(
    plan: &NetworkPlan,
    ws: &WeightSet<F>,
    pass: &ForwardPass<F>,
    dlogits: &[F],
) -> Result<Vec<Vec<F>>> {
    if pass.mode != Mode::Train {
        return Err(CnnError::NotTrainMode);
    }
    let mut grads: Vec<Vec<F>> = ws
        .params
        .iter()
        .map(|p| vec![F::zero(); p.value.len()])
        .collect();
    let n = pass.batch;
    let (dpooled, dw, db) =
        linear_backward(&pass.pooled, n, &ws.params[plan.head_weight].value, dlogits);
    grads[plan.head_weight] = dw;
    grads[plan.head_bias] = db;
    let mut d = global_avg_pool_backward(&dpooled, pass.last_shape);

    for (b, c) in plan.blocks.iter().zip(&pass.blocks).rev() {
        let dsum = relu_backward(&d, &c.output);
        let dh = conv_bn_backward(&dsum, b.second, &c.second, ws, &mut grads)?;
        let dz1 = relu_backward(&dh, &c.hidden);
        let dmain = conv_bn_backward(&dz1, b.first, &c.first, ws, &mut grads)?;
        let mut dx = match &c.pool_argmax {
            Some(arg) => max_pool2_backward(&dmain, arg, c.in_shape),
            None => dmain,
        };
        let dskip_base = match (b.projection, &c.skip_input) {
            (Some(p), Some(input)) => {
                let (dxs, dwp, _) =
                    conv2d_backward(input, &ws.params[p].value, b.out_channels, 1, &dsum)?;
                grads[p] = dwp;
                dxs
            }
            _ => dsum,
        };
        let dskip = if b.downsample {
            avg_pool2_backward(&dskip_base, c.in_shape)
        } else {
            dskip_base
        };
        dx.add_assign(&dskip);
        d = dx;
    }
    let (stem_cache, stem_out) = pass.stem.as_ref().ok_or(CnnError::NotTrainMode)?;
    let dz = relu_backward(&d, stem_out);
    conv_bn_backward(&dz, plan.stem, stem_cache, ws, &mut grads)?;
    Ok(grads)
}

/// SGD with momentum and coupled L2 weight decay on convolution and linear
/// weights: `v <- mu v + (g + wd w)`, `w <- w - lr v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Sgd {
    fn default() -> Self {
        Self {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-3,
        }
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(CnnError::Shape(format!(
            "{} labels for {n} samples",
            labels.len()
        )));
    }
    if let Some((s, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(CnnError::Label {
            sample: s,
            label: l,
            classes,
        });
    }
    Ok(())
}

/// One optimisation step on cross-entropy. Returns the pre-step loss.
pub fn train_step<F: Scalar>(
    plan: &NetworkPlan,
    ws: &mut WeightSet<F>,
    x: &Tensor4<F>,
    labels: &[usize],
    opt: &Sgd,
) -> Result<f64> {
    if x.batch() < TRAIN_BATCH_FLOOR {
        return Err(CnnError::BatchTooSmall {
            size: x.batch(),
            floor: TRAIN_BATCH_FLOOR,
        });
    }
    if !(opt.lr >= 0.0 && opt.momentum >= 0.0 && opt.weight_decay >= 0.0) {
        return Err(CnnError::Hyper(format!("{opt:?}")));
    }
    check_labels(labels, x.batch(), plan.num_classes)?;
    let pass = forward(plan, ws, x, Mode::Train)?;
    let (loss, dlogits) = softmax_cross_entropy(&pass.logits, pass.batch, labels)?;
    if !loss.is_finite() {
        return Err(CnnError::NonFinite {
            layer: "loss".into(),
        });
    }
    let grads = backward(plan, ws, &pass, &dlogits)?;
    if grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(CnnError::NonFinite {
            layer: "gradient".into(),
        });
    }
    let (lr, mu, wd) = (
        lit::<F>(opt.lr),
        lit::<F>(opt.momentum),
        lit::<F>(opt.weight_decay),
    );
    for (p, g) in ws.params.iter_mut().zip(&grads) {
        for ((w, v), &gi) in p.value.iter_mut().zip(&mut p.velocity).zip(g) {
            let step = if p.decay { gi + wd * *w } else { gi };
            *v = mu * *v + step;
            *w -= lr * *v;
        }
    }
    let m = lit::<F>(BN_MOMENTUM);
    for (cb, (bm, bv)) in plan.conv_bns().iter().zip(&pass.batch_stats) {
        let count = pass_count(plan, cb, pass.batch);
        let unbias = lit::<F>(count / (count - 1.0).max(1.0));
        let (rm, rv) = &mut ws.running[cb.norm];
        for c in 0..cb.out {
            rm[c] = (F::one() - m) * rm[c] + m * bm[c];
            rv[c] = (F::one() - m) * rv[c] + m * bv[c] * unbias;
        }
    }
    ws.steps += 1;
    loss.to_f64().ok_or_else(|| CnnError::NonFinite {
        layer: "loss".into(),
    })
}

/// Elements per channel seen by norm `cb` for a batch of `n`.
fn pass_count(plan: &NetworkPlan, cb: &ConvBnIdx, n: usize) -> f64 {
    let size = if cb.norm == plan.stem.norm {
        plan.input_size
    } else {
        let b = plan
            .blocks
            .iter()
            .find(|b| b.first.norm == cb.norm || b.second.norm == cb.norm)
            .expect("norm belongs to a block");
        b.output_size()
    };
    (n * (size as usize).pow(2)) as f64
}

/// Predicted class per sample (lowest index on ties).
pub fn predictions<F: Scalar>(logits: &[F], n: usize) -> Vec<usize> {
    let k = logits.len() / n;
    (0..n)
        .map(|s| {
            let row = &logits[s * k..(s + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Fraction of samples whose prediction equals the label.
pub fn accuracy_from_logits<F: Scalar>(logits: &[F], n: usize, labels: &[usize]) -> f64 {
    let hits = predictions(logits, n)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / n as f64
}

/// Accuracy over `batches` with frozen normalisation statistics.
pub fn evaluate<F: Scalar>(
    plan: &NetworkPlan,
    ws: &WeightSet<F>,
    batches: &[(Tensor4<F>, Vec<usize>)],
) -> Result<f64> {
    let (mut hits, mut total) = (0usize, 0usize);
    for (x, labels) in batches {
        check_labels(labels, x.batch(), plan.num_classes)?;
        let pass = forward(plan, ws, x, Mode::Eval)?;
        hits += predictions(&pass.logits, pass.batch)
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        total += x.batch();
    }
    if total == 0 {
        return Err(CnnError::EmptyEvaluation);
    }
    Ok(hits as f64 / total as f64)
}

/// Mean cross-entropy of a training-mode forward pass, as an [`Objective`]
/// over the flattened parameters.
struct NetworkObjective<'a> {
    plan: &'a NetworkPlan,
    ws: WeightSet<f64>,
    x: &'a Tensor4<f64>,
    labels: &'a [usize],
    theta: Vec<f64>,
}

impl Objective for NetworkObjective<'_> {
    fn point(&self) -> &[f64] {
        &self.theta
    }

    fn value(&mut self, theta: &[f64]) -> (f64, u64) {
        self.ws.set_flat_values(theta);
        let pass = forward_impl(self.plan, &self.ws, self.x, Mode::Train, true)
            .expect("validated forward");
        let (loss, _) =
            softmax_cross_entropy(&pass.logits, pass.batch, self.labels).expect("validated labels");
        (loss, pass.kink_signature)
    }

    fn gradient(&mut self, theta: &[f64]) -> Vec<f64> {
        self.ws.set_flat_values(theta);
        let pass = forward_impl(self.plan, &self.ws, self.x, Mode::Train, false)
            .expect("validated forward");
        let (_, dl) =
            softmax_cross_entropy(&pass.logits, pass.batch, self.labels).expect("validated labels");
        backward(self.plan, &self.ws, &pass, &dl)
            .expect("train-mode pass")
            .concat()
    }
}

/// Maximum relative error between backprop and central differences on
/// `coords` randomly chosen parameters (all of them if fewer). Coordinates
/// whose perturbation flips a ReLU or changes a max-pool winner are skipped.
pub fn gradient_check(
    plan: &NetworkPlan,
    ws: &WeightSet<f64>,
    x: &Tensor4<f64>,
    labels: &[usize],
    epsilon: f64,
    coords: usize,
    rng: &mut Stream,
) -> Result<GradCheckReport> {
    check_labels(labels, x.batch(), plan.num_classes)?;
    let pass = forward(plan, ws, x, Mode::Train)?;
    softmax_cross_entropy(&pass.logits, pass.batch, labels)?;
    let obj = NetworkObjective {
        plan,
        ws: ws.clone(),
        x,
        labels,
        theta: ws.flat_values(),
    };
    Ok(check_objective(obj, epsilon, coords, rng))
}

/// Cosine annealing: `lr_init * 0.5 * (1 + cos(pi * step / total))`.
pub fn lr_at(step: usize, total_steps: usize, lr_init: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}
