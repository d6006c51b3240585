//! Building blocks shared by the networks: convolutions, (conditional) batch
//! normalization and the three residual block flavours.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::param::{xavier_uniform, BufferId, ParamId, ParamStore};
use crate::tensor::{Element, Tensor};

/// How a network is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mode {
    /// Parameters become gradient-requiring leaves.
    pub grad: bool,
    /// Normalization uses batch statistics and records running-stat updates;
    /// spectral normalization refines its power-iteration vectors.
    pub batch_stats: bool,
}

impl Mode {
    pub const TRAIN: Mode = Mode {
        grad: true,
        batch_stats: true,
    };
    pub const EVAL: Mode = Mode {
        grad: false,
        batch_stats: false,
    };
    /// Batch statistics without gradients, used to recalibrate running stats.
    pub const CALIBRATE: Mode = Mode {
        grad: false,
        batch_stats: true,
    };
}

#[derive(Clone, Debug)]
pub enum BufferUpdate<T> {
    Ema {
        id: BufferId,
        value: Vec<T>,
        momentum: f64,
    },
    Set {
        id: BufferId,
        value: Vec<T>,
    },
}

/// A network's parameters bound into one graph.
pub struct Bound<T> {
    pub vars: Vec<Var>,
    pub mode: Mode,
    pub updates: Vec<BufferUpdate<T>>,
}

impl<T: Element> Bound<T> {
    pub fn new(store: &ParamStore<T>, g: &mut Graph<T>, mode: Mode) -> Self {
        Self {
            vars: store.bind(g, mode.grad),
            mode,
            updates: Vec::new(),
        }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// Applies recorded running-statistic updates in order.
pub fn apply_updates<T: Element>(store: &mut ParamStore<T>, updates: Vec<BufferUpdate<T>>) {
    for u in updates {
        match u {
            BufferUpdate::Ema {
                id,
                value,
                momentum,
            } => {
                let m = T::from_f64(momentum);
                let buf = store.buffers_mut().get_mut(id);
                for (b, v) in buf.data_mut().iter_mut().zip(value) {
                    *b = (T::ONE - m) * *b + m * v;
                }
            }
            BufferUpdate::Set { id, value } => {
                store.buffers_mut().get_mut(id).data_mut().copy_from_slice(&value);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    w: ParamId,
    b: ParamId,
    sn_u: Option<BufferId>,
    stride: usize,
    pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spectral: bool,
        gain: f64,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, &[cout, cin, k, k], cin * k * k, cout * k * k, gain),
        );
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]));
        let sn_u = spectral.then(|| store.add_buffer(format!("{name}.sn_u"), unit_vector(cout)));
        Self {
            w,
            b,
            sn_u,
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn strided(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        b: &mut Bound<T>,
        x: Var,
    ) -> Result<Var> {
        let w = spectral_weight(store, g, b, b.var(self.w), self.sn_u)?;
        g.conv2d(x, w, Some(b.var(self.b)), self.stride, self.pad)
    }
}

fn unit_vector<T: Element>(n: usize) -> Tensor<T> {
    let v = T::from_f64(1.0 / (n as f64).sqrt());
    Tensor::full(&[n], v)
}

fn spectral_weight<T: Element>(
    store: &ParamStore<T>,
    g: &mut Graph<T>,
    b: &mut Bound<T>,
    w: Var,
    sn_u: Option<BufferId>,
) -> Result<Var> {
    let Some(id) = sn_u else { return Ok(w) };
    let mut u = store.buffers().get(id).data().to_vec();
    let update = b.mode.batch_stats;
    let out = g.spectral_norm(w, &mut u, update)?;
    if update {
        b.updates.push(BufferUpdate::Set { id, value: u });
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
    sn_u: Option<BufferId>,
}

impl Linear {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        spectral: bool,
    ) -> Self {
        let w = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, &[out, inp], inp, out, 1.0),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out])));
        let sn_u = spectral.then(|| store.add_buffer(format!("{name}.sn_u"), unit_vector(out)));
        Self { w, b, sn_u }
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        b: &mut Bound<T>,
        x: Var,
    ) -> Result<Var> {
        let w = spectral_weight(store, g, b, b.var(self.w), self.sn_u)?;
        let bias = self.b.map(|id| b.var(id));
        g.linear(x, w, bias)
    }
}

/// A `[rows, dim]` table of vectors, optionally spectrally normalized.
#[derive(Clone, Debug)]
pub struct Table {
    t: ParamId,
    sn_u: Option<BufferId>,
}

impl Table {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        rows: usize,
        dim: usize,
        spectral: bool,
    ) -> Self {
        let t = store.add(
            format!("{name}.weight"),
            xavier_uniform(rng, &[rows, dim], dim, rows, 1.0),
        );
        let sn_u = spectral.then(|| store.add_buffer(format!("{name}.sn_u"), unit_vector(rows)));
        Self { t, sn_u }
    }

    pub fn param(&self) -> ParamId {
        self.t
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        b: &mut Bound<T>,
    ) -> Result<Var> {
        spectral_weight(store, g, b, b.var(self.t), self.sn_u)
    }
}

/// Batch normalization without its own affine part.
#[derive(Clone, Debug)]
pub struct Norm {
    mean: BufferId,
    var: BufferId,
}

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

impl Norm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        let mean = store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        let var = store.add_buffer(format!("{name}.running_var"), Tensor::full(&[c], T::ONE));
        Self { mean, var }
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        b: &mut Bound<T>,
        x: Var,
    ) -> Result<Var> {
        if b.mode.batch_stats {
            let (y, mean, var) = g.batch_norm(x, T::from_f64(BN_EPS))?;
            // running variance tracks the unbiased estimate
            let n = g.value(x).numel() / mean.len();
            let corr = T::from_f64(n as f64 / (n as f64 - 1.0).max(1.0));
            b.updates.push(BufferUpdate::Ema {
                id: self.mean,
                value: mean,
                momentum: BN_MOMENTUM,
            });
            b.updates.push(BufferUpdate::Ema {
                id: self.var,
                value: var.into_iter().map(|v| v * corr).collect(),
                momentum: BN_MOMENTUM,
            });
            Ok(y)
        } else {
            let mean = store.buffers().get(self.mean).data();
            let var = store.buffers().get(self.var).data();
            let scale: Vec<T> = var
                .iter()
                .map(|&v| T::ONE / (v + T::from_f64(BN_EPS)).sqrt())
                .collect();
            let shift: Vec<T> = mean.iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
            g.channel_const(x, &scale, &shift)
        }
    }
}

/// Batch norm followed by a learned per-channel affine transform.
#[derive(Clone, Debug)]
pub struct AffineNorm {
    norm: Norm,
    scale: ParamId,
    shift: ParamId,
}

impl AffineNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            norm: Norm::new(store, name, c),
            scale: store.add(format!("{name}.scale"), Tensor::full(&[c], T::ONE)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[c])),
        }
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        b: &mut Bound<T>,
        x: Var,
    ) -> Result<Var> {
        let y = self.norm.forward(store, g, b, x)?;
        g.channel_affine(y, b.var(self.scale), b.var(self.shift))
    }
}

/// Conditional batch normalization: one learned (scale, shift) pair per
/// condition bin. Scales are stored as offsets from 1 so an all-zero table
/// is the identity for every bin.
#[derive(Clone, Debug)]
pub struct CondNorm {
    norm: Norm,
    gamma: ParamId,
    beta: ParamId,
}

impl CondNorm {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize, bins: usize) -> Self {
        Self {
            norm: Norm::new(store, name, c),
            gamma: store.add(format!("{name}.gamma"), Tensor::zeros(&[bins, c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[bins, c])),
        }
    }

    pub fn tables(&self) -> (ParamId, ParamId) {
        (self.gamma, self.beta)
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        b: &mut Bound<T>,
        x: Var,
        ks: &[usize],
    ) -> Result<Var> {
        let y = self.norm.forward(store, g, b, x)?;
        g.cond_affine(y, b.var(self.gamma), b.var(self.beta), ks)
    }
}

const RES_GAIN: f64 = std::f64::consts::SQRT_2;

/// Generator block: CBN-ReLU-(up)-Conv3-CBN-ReLU-Conv3 with a (1x1) shortcut.
#[derive(Clone, Debug)]
pub struct GenBlock {
    n1: CondNorm,
    c1: Conv,
    n2: CondNorm,
    c2: Conv,
    shortcut: Option<Conv>,
    up: bool,
}

impl GenBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        bins: usize,
        up: bool,
    ) -> Self {
        Self {
            n1: CondNorm::new(store, &format!("{name}.cbn1"), cin, bins),
            c1: Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, false, RES_GAIN),
            n2: CondNorm::new(store, &format!("{name}.cbn2"), cout, bins),
            c2: Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, false, RES_GAIN),
            shortcut: (cin != cout || up)
                .then(|| Conv::new(store, rng, &format!("{name}.shortcut"), cin, cout, 1, false, 1.0)),
            up,
        }
    }

    pub fn cond_norms(&self) -> [&CondNorm; 2] {
        [&self.n1, &self.n2]
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        b: &mut Bound<T>,
        x: Var,
        ks: &[usize],
    ) -> Result<Var> {
        let mut h = self.n1.forward(store, g, b, x, ks)?;
        h = g.relu(h);
        if self.up {
            h = g.upsample2(h)?;
        }
        h = self.c1.forward(store, g, b, h)?;
        h = self.n2.forward(store, g, b, h, ks)?;
        h = g.relu(h);
        h = self.c2.forward(store, g, b, h)?;
        let mut sc = x;
        if self.up {
            sc = g.upsample2(sc)?;
        }
        if let Some(c) = &self.shortcut {
            sc = c.forward(store, g, b, sc)?;
        }
        g.add(h, sc)
    }
}

/// Encoder block: BN-ReLU-Conv3-BN-ReLU-Conv3-AvgPool with a 1x1 shortcut.
#[derive(Clone, Debug)]
pub struct EncBlock {
    n1: AffineNorm,
    c1: Conv,
    n2: AffineNorm,
    c2: Conv,
    shortcut: Conv,
}

impl EncBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
    ) -> Self {
        Self {
            n1: AffineNorm::new(store, &format!("{name}.bn1"), cin),
            c1: Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, false, RES_GAIN),
            n2: AffineNorm::new(store, &format!("{name}.bn2"), cout),
            c2: Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, false, RES_GAIN),
            shortcut: Conv::new(store, rng, &format!("{name}.shortcut"), cin, cout, 1, false, 1.0),
        }
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        b: &mut Bound<T>,
        x: Var,
    ) -> Result<Var> {
        let mut h = self.n1.forward(store, g, b, x)?;
        h = g.relu(h);
        h = self.c1.forward(store, g, b, h)?;
        h = self.n2.forward(store, g, b, h)?;
        h = g.relu(h);
        h = self.c2.forward(store, g, b, h)?;
        h = g.avg_pool2(h)?;
        let sc = self.shortcut.forward(store, g, b, x)?;
        let sc = g.avg_pool2(sc)?;
        g.add(h, sc)
    }
}

/// Discriminator block: (ReLU)-Conv3-ReLU-Conv3-(AvgPool), spectrally
/// normalized. The first block skips the leading ReLU and pools its shortcut
/// before the 1x1 convolution.
#[derive(Clone, Debug)]
pub struct DiscBlock {
    c1: Conv,
    c2: Conv,
    shortcut: Option<Conv>,
    down: bool,
    first: bool,
}

impl DiscBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cin: usize,
        cout: usize,
        down: bool,
        first: bool,
        spectral: bool,
    ) -> Self {
        Self {
            c1: Conv::new(store, rng, &format!("{name}.conv1"), cin, cout, 3, spectral, RES_GAIN),
            c2: Conv::new(store, rng, &format!("{name}.conv2"), cout, cout, 3, spectral, RES_GAIN),
            shortcut: (cin != cout || down)
                .then(|| Conv::new(store, rng, &format!("{name}.shortcut"), cin, cout, 1, spectral, 1.0)),
            down,
            first,
        }
    }

    pub fn forward<T: Element>(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        b: &mut Bound<T>,
        x: Var,
    ) -> Result<Var> {
        let mut h = if self.first { x } else { g.relu(x) };
        h = self.c1.forward(store, g, b, h)?;
        h = g.relu(h);
        h = self.c2.forward(store, g, b, h)?;
        if self.down {
            h = g.avg_pool2(h)?;
        }
        let mut sc = x;
        if self.first && self.down {
            sc = g.avg_pool2(sc)?;
            if let Some(c) = &self.shortcut {
                sc = c.forward(store, g, b, sc)?;
            }
        } else {
            if let Some(c) = &self.shortcut {
                sc = c.forward(store, g, b, sc)?;
            }
            if self.down {
                sc = g.avg_pool2(sc)?;
            }
        }
        g.add(h, sc)
    }
}
