//! Recurrent actor-critic over color, depth, goal and the engine's `r^a`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nie::{nie_forward, NieConfig, NieInput, NieNetwork, NieOutput};
use crate::tensor::nn::{Conv2d, Embedding, GruCell, Linear, Mlp};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::worldsim::{Observation, NUM_ACTIONS};

/// Which model is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Engine present and supervised.
    Nie,
    /// No engine; `r^a` is a zero block of the same width.
    Ppo,
    /// Engine present but unsupervised (`alpha = 0`).
    Rgbdk,
}

impl Variant {
    pub fn has_engine(self) -> bool {
        !matches!(self, Variant::Ppo)
    }

    pub fn supervises_engine(self) -> bool {
        matches!(self, Variant::Nie)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Nie => "nie",
            Variant::Ppo => "ppo",
            Variant::Rgbdk => "rgbdk",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nie" => Ok(Variant::Nie),
            "ppo" => Ok(Variant::Ppo),
            "rgbdk" => Ok(Variant::Rgbdk),
            other => Err(format!("unknown variant `{other}` (nie, ppo, rgbdk)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub resolution: usize,
    pub channels: [usize; 3],
    pub kernels: [usize; 3],
    pub visual_dim: usize,
    pub goal_hidden: usize,
    pub goal_dim: usize,
    pub hidden: usize,
    /// Number of object categories; also sizes the target-category embedding.
    pub categories: usize,
    /// Adds a target-category embedding to the goal (object placement).
    pub target_category: bool,
    pub max_depth: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            channels: [16, 32, 64],
            kernels: [5, 3, 3],
            visual_dim: 128,
            goal_hidden: 64,
            goal_dim: 32,
            hidden: 512,
            categories: 8,
            target_category: false,
            max_depth: 10.0,
        }
    }
}

#[derive(Debug, Clone)]
struct ConvStack {
    layers: Vec<Conv2d>,
}

impl ConvStack {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cfg: &PolicyConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let mut layers = Vec::new();
        let mut c = cin;
        for (i, (&cout, &k)) in cfg.channels.iter().zip(&cfg.kernels).enumerate() {
            layers.push(Conv2d::new(store, &format!("{name}.{i}"), c, cout, k, 2, k / 2, rng)?);
            c = cout;
        }
        Ok(Self { layers })
    }

    fn out_len(&self, resolution: usize) -> usize {
        let side = self.layers.iter().fold(resolution, |s, l| l.out_size(s));
        side * side * self.layers.last().map_or(0, |l| l.cout)
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var, TensorError> {
        for l in &self.layers {
            x = l.forward(g, x)?;
            x = g.relu(x);
        }
        let b = g.shape(x)[0];
        let n = g.value(x).len() / b;
        g.reshape(x, &[b, n])
    }
}

#[derive(Debug, Clone)]
pub struct PolicyNetwork {
    pub cfg: PolicyConfig,
    pub variant: Variant,
    pub nie: Option<NieNetwork>,
    /// Width of the flattened `r^a` block.
    pub repr_width: usize,
    color: ConvStack,
    depth: ConvStack,
    fuse: Linear,
    goal: Mlp,
    target: Option<Embedding>,
    gru: GruCell,
    actor: Linear,
    critic: Linear,
}

impl PolicyNetwork {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        cfg: PolicyConfig,
        variant: Variant,
        nie_cfg: NieConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let color = ConvStack::new(store, "policy.color", 3, &cfg, rng)?;
        let depth = ConvStack::new(store, "policy.depth", 1, &cfg, rng)?;
        let flat = color.out_len(cfg.resolution) + depth.out_len(cfg.resolution);
        let fuse = Linear::new(store, "policy.fuse", flat, cfg.visual_dim, 1.0, rng)?;
        let goal = Mlp::new(store, "policy.goal", &[2, cfg.goal_hidden, cfg.goal_dim], rng)?;
        let target = if cfg.target_category {
            Some(Embedding::new(store, "policy.target", cfg.categories, cfg.goal_dim, rng)?)
        } else {
            None
        };
        let nie_cfg = NieConfig {
            visual_dim: cfg.visual_dim,
            categories: cfg.categories,
            ..nie_cfg
        };
        let nie = if variant.has_engine() {
            Some(NieNetwork::new(store, "nie", nie_cfg, rng)?)
        } else {
            None
        };
        let repr_width = NUM_ACTIONS * nie_cfg.out_dim;
        let goal_width = cfg.goal_dim * if cfg.target_category { 2 } else { 1 };
        let input = goal_width + cfg.visual_dim + repr_width;
        let gru = GruCell::new(store, "policy.gru", input, cfg.hidden, rng)?;
        // Small actor gain keeps the initial action distribution near uniform.
        let actor = Linear::new(store, "policy.actor", cfg.hidden, NUM_ACTIONS, 0.01, rng)?;
        let critic = Linear::new(store, "policy.critic", cfg.hidden, 1, 1.0, rng)?;
        Ok(Self {
            cfg,
            variant,
            nie,
            repr_width,
            color,
            depth,
            fuse,
            goal,
            target,
            gru,
            actor,
            critic,
        })
    }
}

/// One batch of per-step policy inputs.
#[derive(Debug, Clone)]
pub struct PolicyInput<T> {
    pub batch: usize,
    /// `[B, 3, H, W]` in `[0, 1]`.
    pub color: Tensor<T>,
    /// `[B, 1, H, W]` scaled by the maximum depth.
    pub depth: Tensor<T>,
    /// `[B, 2]`: target (right, forward) offset in the agent frame, meters.
    pub goal: Tensor<T>,
    pub target_category: Option<Vec<usize>>,
    pub keypoints: Option<NieInput<T>>,
}

impl<T: Scalar> PolicyInput<T> {
    pub fn new(
        frames: &[&Observation],
        goals: &[[f64; 2]],
        max_depth: f64,
    ) -> Result<Self, TensorError> {
        let b = frames.len();
        let (w, h) = frames.first().map_or((0, 0), |o| (o.width, o.height));
        let mut color = Vec::with_capacity(b * 3 * w * h);
        let mut depth = Vec::with_capacity(b * w * h);
        for o in frames {
            for ch in 0..3 {
                color.extend(o.color.iter().map(|px| T::from_f64(px[ch] as f64 / 255.0)));
            }
            depth.extend(o.depth.iter().map(|&d| T::from_f64(d / max_depth)));
        }
        let goal: Vec<f64> = goals.iter().flatten().copied().collect();
        Ok(Self {
            batch: b,
            color: Tensor::new(vec![b, 3, h, w], color)?,
            depth: Tensor::new(vec![b, 1, h, w], depth)?,
            goal: Tensor::from_f64(vec![b, 2], &goal)?,
            target_category: None,
            keypoints: None,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PolicyOutput {
    /// `[B, 10]`
    pub logits: Var,
    pub log_probs: Var,
    pub probs: Var,
    /// `[B, 1]`
    pub value: Var,
    /// `[B, hidden]`
    pub hidden: Var,
    pub visual: Var,
    pub nie: Option<NieOutput>,
}

/// One recurrent step. `hidden` is the `[B, hidden]` state entering the step.
pub fn policy_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    net: &PolicyNetwork,
    input: &PolicyInput<T>,
    hidden: Var,
) -> Result<PolicyOutput, TensorError> {
    let b = input.batch;
    let color = g.input(input.color.clone());
    let depth = g.input(input.depth.clone());
    let fc = net.color.forward(g, color)?;
    let fd = net.depth.forward(g, depth)?;
    let f = g.concat(&[fc, fd])?;
    let visual = net.fuse.forward(g, f)?;
    let visual = g.relu(visual);

    let goal = g.input(input.goal.clone());
    let mut goal = net.goal.forward(g, goal)?;
    if let Some(emb) = &net.target {
        let cats = input.target_category.as_ref().ok_or(TensorError::Shape {
            op: "policy_forward: target category",
            shapes: vec![vec![b], vec![0]],
        })?;
        let e = emb.forward(g, cats)?;
        goal = g.concat(&[goal, e])?;
    }

    let (repr, nie) = match (&net.nie, &input.keypoints) {
        (Some(engine), Some(kp)) => {
            let out = nie_forward(g, engine, kp, Some(visual))?;
            (g.reshape(out.repr, &[b, net.repr_width])?, Some(out))
        }
        (None, _) => (g.input(Tensor::zeros(vec![b, net.repr_width])), None),
        (Some(_), None) => {
            return Err(TensorError::Shape {
                op: "policy_forward: keypoints",
                shapes: vec![vec![b], vec![0]],
            })
        }
    };
    let x = g.concat(&[goal, visual, repr])?;
    let hidden = net.gru.forward(g, x, hidden)?;
    let logits = net.actor.forward(g, hidden)?;
    let log_probs = g.log_softmax(logits);
    let probs = g.softmax(logits);
    let value = net.critic.forward(g, hidden)?;
    Ok(PolicyOutput {
        logits,
        log_probs,
        probs,
        value,
        hidden,
        visual,
        nie,
    })
}

/// Draws an action index from a probability row.
pub fn sample_action(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn greedy_action(probs: &[f64]) -> usize {
    probs
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
        .0
}
