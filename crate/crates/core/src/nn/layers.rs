//! Parameterised building blocks recorded onto a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tape::{Act, Tape, Var};
use crate::tensor::{Axis, Layout, Mat};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let w = ps.add_uniform(format!("{name}.w"), fan_in, fan_out, fan_in, rng);
        let b = ps.add_uniform(format!("{name}.b"), 1, fan_out, fan_in, rng);
        Linear { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.linear(x, self.w, Some(self.b))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub g: ParamId,
    pub b: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, width: usize) -> Self {
        let g = ps.add(format!("{name}.g"), Mat::filled(1, width, 1.0));
        let b = ps.add(format!("{name}.b"), Mat::zeros(1, width));
        LayerNorm { g, b }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        tape.layer_norm(x, self.g, self.b)
    }
}

/// One direction of the gated linear recurrence: an input-dependent decay
/// gate over a diagonal state, read out by a linear map.
#[derive(Debug, Clone, Copy)]
pub struct RecurrentDirection {
    pub decay: Linear,
    pub input: Linear,
    pub out: Linear,
}

/// Initial decay-gate bias; `sigmoid(2) ≈ 0.88` keeps several frames of memory.
const DECAY_BIAS_INIT: f64 = 2.0;

impl RecurrentDirection {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        let decay = Linear::new(ps, &format!("{name}.decay"), width, width, rng);
        ps.get_mut(decay.b).data.iter_mut().for_each(|v| *v = DECAY_BIAS_INIT);
        RecurrentDirection {
            decay,
            input: Linear::new(ps, &format!("{name}.input"), width, width, rng),
            out: Linear::new(ps, &format!("{name}.out"), width, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, layout: Layout, reverse: bool) -> Var {
        let d = self.decay.forward(tape, x);
        let d = tape.act(d, Act::Sigmoid);
        let u = self.input.forward(tape, x);
        let h = tape.scan(u, d, layout, Axis::Time, reverse);
        self.out.forward(tape, h)
    }
}

/// Bidirectional sequence mixer along the time axis: a causal and an
/// anticausal recurrence whose outputs are summed. Order is carried by the
/// recurrence itself, so no positional encoding is used and any sequence
/// length is accepted.
#[derive(Debug, Clone, Copy)]
pub struct TemporalMixer {
    pub forward_dir: RecurrentDirection,
    pub reverse_dir: RecurrentDirection,
}

impl TemporalMixer {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, width: usize, rng: &mut R) -> Self {
        TemporalMixer {
            forward_dir: RecurrentDirection::new(ps, &format!("{name}.fwd"), width, rng),
            reverse_dir: RecurrentDirection::new(ps, &format!("{name}.rev"), width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, layout: Layout) -> Var {
        let f = self.forward_dir.forward(tape, x, layout, false);
        let r = self.reverse_dir.forward(tape, x, layout, true);
        tape.add(f, r)
    }
}

/// Residual wrapper `x + mixer(norm(x))` around a [`TemporalMixer`].
#[derive(Debug, Clone, Copy)]
pub struct TemporalLayer {
    pub norm: Option<LayerNorm>,
    pub mixer: TemporalMixer,
}

impl TemporalLayer {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, width: usize, pre_norm: bool, rng: &mut R) -> Self {
        TemporalLayer {
            norm: pre_norm.then(|| LayerNorm::new(ps, &format!("{name}.norm"), width)),
            mixer: TemporalMixer::new(ps, &format!("{name}.mixer"), width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, layout: Layout) -> Var {
        let h = match &self.norm {
            Some(n) => n.forward(tape, x),
            None => x,
        };
        let h = self.mixer.forward(tape, h, layout);
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SelfAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new<R: Rng>(ps: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut R) -> Self {
        SelfAttention {
            q: Linear::new(ps, &format!("{name}.q"), width, width, rng),
            k: Linear::new(ps, &format!("{name}.k"), width, width, rng),
            v: Linear::new(ps, &format!("{name}.v"), width, width, rng),
            o: Linear::new(ps, &format!("{name}.o"), width, width, rng),
            heads,
        }
    }

    /// Returns the output and the raw attention node (for inspecting weights).
    pub fn forward(&self, tape: &mut Tape, x: Var, layout: Layout, axis: Axis) -> (Var, Var) {
        let q = self.q.forward(tape, x);
        let k = self.k.forward(tape, x);
        let v = self.v.forward(tape, x);
        let a = tape.attention(q, k, v, layout, axis, self.heads);
        (self.o.forward(tape, a), a)
    }
}

/// Transformer encoder layer attending within sets along `axis`, with
/// optional pre-normalization and a ReLU feed-forward block.
#[derive(Debug, Clone, Copy)]
pub struct SetTransformerLayer {
    pub norm1: Option<LayerNorm>,
    pub attn: SelfAttention,
    pub norm2: Option<LayerNorm>,
    pub ffn1: Linear,
    pub ffn2: Linear,
}

impl SetTransformerLayer {
    pub fn new<R: Rng>(
        ps: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        ffn: usize,
        pre_norm: bool,
        rng: &mut R,
    ) -> Self {
        SetTransformerLayer {
            norm1: pre_norm.then(|| LayerNorm::new(ps, &format!("{name}.norm1"), width)),
            attn: SelfAttention::new(ps, &format!("{name}.attn"), width, heads, rng),
            norm2: pre_norm.then(|| LayerNorm::new(ps, &format!("{name}.norm2"), width)),
            ffn1: Linear::new(ps, &format!("{name}.ffn1"), width, ffn, rng),
            ffn2: Linear::new(ps, &format!("{name}.ffn2"), ffn, width, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, x: Var, layout: Layout, axis: Axis) -> Var {
        let h = match &self.norm1 {
            Some(n) => n.forward(tape, x),
            None => x,
        };
        let (a, _) = self.attn.forward(tape, h, layout, axis);
        let x = tape.add(x, a);
        let h = match &self.norm2 {
            Some(n) => n.forward(tape, x),
            None => x,
        };
        let h = self.ffn1.forward(tape, h);
        let h = tape.act(h, Act::Relu);
        let h = self.ffn2.forward(tape, h);
        tape.add(x, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(ps: &ParamStore, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = ps.iter().map(|p| vec![0.0; p.value.data.len()]).collect();
        Adam {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, ps: &mut ParamStore, grads: &super::params::Grads) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, p) in ps.iter_mut().enumerate() {
            let g = &grads.data[i].data;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                p.value.data[j] -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
    }
}
