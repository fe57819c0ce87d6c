//! Neural Interaction Engine: per-category, per-action affine predictions on
//! keypoints, summarized into one representation vector per action.
//!
//! Rows of the per-(sample, action, category) tensors are ordered
//! `(b * NUM_ACTIONS + a) * C + c`, so the rows sharing a sample and action
//! are contiguous and form one attention group.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::Affine4;
use crate::keypoints::{KeypointSet, NUM_KEYPOINTS};
use crate::tensor::nn::{Embedding, Linear, Mlp};
use crate::tensor::{Graph, ParamStore, Scalar, Tensor, TensorError, Var};
use crate::worldsim::{Observation, NUM_ACTIONS};

/// Side of the average-pooled depth grid fed to the engine.
pub const RAW_GRID: usize = 8;
pub const RAW_DIM: usize = RAW_GRID * RAW_GRID;
const KP_DIM: usize = NUM_KEYPOINTS * 3;

/// `[R | t]` rows, the layout [`Graph::affine_points`] consumes.
const IDENTITY_ROWS: [f64; 12] = [1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NieConfig {
    pub categories: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Width of the policy's visual vector `v`; 0 when training standalone.
    pub visual_dim: usize,
    pub state_hidden: usize,
    pub attn_dim: usize,
    /// Width `D` of each row of `r^a`.
    pub out_dim: usize,
}

impl Default for NieConfig {
    fn default() -> Self {
        Self {
            categories: 8,
            hidden: 128,
            embed: 32,
            visual_dim: 128,
            state_hidden: 64,
            attn_dim: 64,
            out_dim: 32,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NieNetwork {
    pub cfg: NieConfig,
    keypoint: Mlp,
    category: Embedding,
    action: Embedding,
    observation: Linear,
    affine: Mlp,
    state: Mlp,
    query: Linear,
    key: Linear,
    value: Linear,
    output: Linear,
}

impl NieNetwork {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: NieConfig,
        rng: &mut impl Rng,
    ) -> Result<Self, TensorError> {
        let e = cfg.embed;
        let keypoint = Mlp::new(store, &format!("{name}.kp"), &[KP_DIM, cfg.hidden, e], rng)?;
        let category = Embedding::new(store, &format!("{name}.cat"), cfg.categories, e, rng)?;
        let action = Embedding::new(store, &format!("{name}.act"), NUM_ACTIONS, e, rng)?;
        let observation = Linear::new(
            store,
            &format!("{name}.obs"),
            cfg.visual_dim + RAW_DIM,
            e,
            1.0,
            rng,
        )?;
        // The last affine layer starts at zero weight and identity bias, so
        // the untrained engine predicts "nothing moves".
        let first = Linear::new(store, &format!("{name}.affine.0"), 4 * e, cfg.hidden, 1.0, rng)?;
        let last = Linear::from_tensors(
            store,
            &format!("{name}.affine.1"),
            Tensor::zeros(vec![cfg.hidden, 12]),
            Tensor::from_f64(vec![12], &IDENTITY_ROWS)?,
        )?;
        let affine = Mlp {
            layers: vec![first, last],
        };
        let state = Mlp::new(store, &format!("{name}.state"), &[3, cfg.state_hidden, e], rng)?;
        let r_dim = 3 * e;
        let query = Linear::new(store, &format!("{name}.q"), r_dim, cfg.attn_dim, 1.0, rng)?;
        let key = Linear::new(store, &format!("{name}.k"), r_dim, cfg.attn_dim, 1.0, rng)?;
        let value = Linear::new(store, &format!("{name}.v"), r_dim, cfg.attn_dim, 1.0, rng)?;
        let output = Linear::new(store, &format!("{name}.out"), cfg.attn_dim, cfg.out_dim, 1.0, rng)?;
        Ok(Self {
            cfg,
            keypoint,
            category,
            action,
            observation,
            affine,
            state,
            query,
            key,
            value,
            output,
        })
    }
}

/// Average-pooled depth, scaled to `[0, 1]` by `max_depth`.
pub fn raw_observation(obs: &Observation, max_depth: f64) -> Vec<f64> {
    let mut out = vec![0.0; RAW_DIM];
    let mut n = vec![0usize; RAW_DIM];
    for v in 0..obs.height {
        for u in 0..obs.width {
            let cell = (v * RAW_GRID / obs.height) * RAW_GRID + u * RAW_GRID / obs.width;
            out[cell] += obs.depth[v * obs.width + u] / max_depth;
            n[cell] += 1;
        }
    }
    for (o, &k) in out.iter_mut().zip(&n) {
        if k > 0 {
            *o /= k as f64;
        }
    }
    out
}

/// A batch of engine inputs.
#[derive(Debug, Clone)]
pub struct NieInput<T> {
    pub batch: usize,
    pub categories: usize,
    /// `[B * C, 24]`, camera-frame keypoints.
    pub points: Tensor<T>,
    /// `[B * C]`
    pub present: Vec<bool>,
    /// `[B, RAW_DIM]`
    pub raw: Tensor<T>,
}

impl<T: Scalar> NieInput<T> {
    pub fn new(sets: &[&KeypointSet], raws: &[&[f64]]) -> Result<Self, TensorError> {
        let categories = sets.first().map_or(0, |s| s.categories());
        let mut points = Vec::with_capacity(sets.len() * categories * KP_DIM);
        let mut present = Vec::with_capacity(sets.len() * categories);
        for s in sets {
            if s.categories() != categories {
                return Err(TensorError::Shape {
                    op: "nie_input",
                    shapes: vec![vec![categories], vec![s.categories()]],
                });
            }
            points.extend(s.points.iter().flatten().map(|&x| T::from_f64(x)));
            present.extend_from_slice(&s.present);
        }
        let raw: Vec<f64> = raws.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Self {
            batch: sets.len(),
            categories,
            points: Tensor::new(vec![sets.len() * categories, KP_DIM], points)?,
            present,
            raw: Tensor::from_f64(vec![raws.len(), RAW_DIM], &raw)?,
        })
    }

    pub fn row(&self, b: usize, a: usize, c: usize) -> usize {
        (b * NUM_ACTIONS + a) * self.categories + c
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NieOutput {
    pub batch: usize,
    pub categories: usize,
    /// `m`: `[B * A * C, 12]`, `[R | t]` rows.
    pub affine: Var,
    /// `p^a`: `[B * A * C, 24]`
    pub transformed: Var,
    /// `r^a`: `[B * A, D]`
    pub repr: Var,
}

impl NieOutput {
    pub fn row(&self, b: usize, a: usize, c: usize) -> usize {
        (b * NUM_ACTIONS + a) * self.categories + c
    }

    /// Predicted transform for one (sample, category, action).
    pub fn affine_at<T: Scalar>(&self, g: &Graph<'_, T>, b: usize, c: usize, a: usize) -> Affine4 {
        let r = self.row(b, a, c);
        let m = &g.value(self.affine)[r * 12..r * 12 + 12];
        let f = |i: usize| m[i].as_f64();
        Affine4::from_params(&[
            f(0),
            f(1),
            f(2),
            f(4),
            f(5),
            f(6),
            f(8),
            f(9),
            f(10),
            f(3),
            f(7),
            f(11),
        ])
    }
}

/// Constant `[24, 3]` matrix averaging the eight points of a row.
fn center_matrix<T: Scalar>() -> Tensor<T> {
    let mut m = vec![0.0; KP_DIM * 3];
    for k in 0..NUM_KEYPOINTS {
        for i in 0..3 {
            m[(3 * k + i) * 3 + i] = 1.0 / NUM_KEYPOINTS as f64;
        }
    }
    Tensor::from_f64(vec![KP_DIM, 3], &m).expect("static shape")
}

/// Shared front half of the engine: per-sample observation features and
/// predicted affine rows for the requested `(sample, action, category)`
/// triples.
struct Rows {
    affine: Var,
    transformed: Var,
    category: Var,
    point_row: Vec<usize>,
}

fn check_categories(net: &NieNetwork, c: usize) -> Result<(), TensorError> {
    if c != net.cfg.categories {
        return Err(TensorError::Shape {
            op: "nie_forward",
            shapes: vec![vec![net.cfg.categories], vec![c]],
        });
    }
    Ok(())
}

fn predict_rows<T: Scalar>(
    g: &mut Graph<'_, T>,
    net: &NieNetwork,
    input: &NieInput<T>,
    visual: Option<Var>,
    points: Var,
    rows: &[(usize, usize, usize)],
) -> Result<Rows, TensorError> {
    let c = input.categories;
    let sample_of: Vec<usize> = rows.iter().map(|r| r.0).collect();
    let action_of: Vec<usize> = rows.iter().map(|r| r.1).collect();
    let category_of: Vec<usize> = rows.iter().map(|r| r.2).collect();
    let point_row: Vec<usize> = rows.iter().map(|r| r.0 * c + r.2).collect();

    let raw = g.input(input.raw.clone());
    let obs_in = match visual {
        Some(v) => g.concat(&[v, raw])?,
        None => raw,
    };
    let obs = net.observation.forward(g, obs_in)?;
    let obs = g.relu(obs);
    let obs = g.gather(obs, &sample_of)?;

    let kp = net.keypoint.forward(g, points)?;
    let kp = g.gather(kp, &point_row)?;
    let category = net.category.forward(g, &category_of)?;
    let act = net.action.forward(g, &action_of)?;
    let joint = g.concat(&[kp, category, act, obs])?;
    let affine = net.affine.forward(g, joint)?;

    let p_rows = g.gather(points, &point_row)?;
    let transformed = g.affine_points(affine, p_rows)?;
    Ok(Rows {
        affine,
        transformed,
        category,
        point_row,
    })
}

/// Runs the engine. `visual` is the policy's `[B, visual_dim]` feature
/// vector, or `None` when `visual_dim == 0`.
pub fn nie_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    net: &NieNetwork,
    input: &NieInput<T>,
    visual: Option<Var>,
) -> Result<NieOutput, TensorError> {
    let (b, c) = (input.batch, input.categories);
    check_categories(net, c)?;
    let n = b * NUM_ACTIONS * c;
    let mut rows = Vec::with_capacity(n);
    for bi in 0..b {
        for a in 0..NUM_ACTIONS {
            for ci in 0..c {
                rows.push((bi, a, ci));
            }
        }
    }
    let points = g.input(input.points.clone());
    let Rows {
        affine,
        transformed,
        category,
        point_row,
    } = predict_rows(g, net, input, visual, points, &rows)?;

    let avg = center_matrix::<T>();
    let avg = g.input(avg);
    let centers = g.matmul(points, avg)?;
    let s = net.state.forward(g, centers)?;
    let s = g.gather(s, &point_row)?;
    let centers_a = g.matmul(transformed, avg)?;
    let s_a = net.state.forward(g, centers_a)?;
    let r = g.concat(&[s, s_a, category])?;

    let d = net.cfg.attn_dim;
    let shape = [b * NUM_ACTIONS, c, d];
    let q = net.query.forward(g, r)?;
    let q = g.reshape(q, &shape)?;
    let k = net.key.forward(g, r)?;
    let k = g.reshape(k, &shape)?;
    let v = net.value.forward(g, r)?;
    let v = g.reshape(v, &shape)?;
    let mask: Vec<bool> = point_row.iter().map(|&i| input.present[i]).collect();
    let attended = g.attention(q, k, v, &mask)?;

    let mut weights = vec![T::zero(); n];
    for bi in 0..b {
        let seen = input.present[bi * c..(bi + 1) * c].iter().filter(|&&p| p).count();
        if seen == 0 {
            continue;
        }
        let w = T::from_f64(1.0 / seen as f64);
        for a in 0..NUM_ACTIONS {
            for ci in 0..c {
                if input.present[bi * c + ci] {
                    weights[input.row(bi, a, ci)] = w;
                }
            }
        }
    }
    let pooled = g.pool(attended, &weights)?;
    let repr = net.output.forward(g, pooled)?;
    Ok(NieOutput {
        batch: b,
        categories: c,
        affine,
        transformed,
        repr,
    })
}

/// Keypoints predicted for one action per sample only: `[B * C, 24]`, the
/// same values [`nie_forward`] produces in those rows. Used for supervised
/// training, where `r^a` is not needed.
pub fn nie_predict<T: Scalar>(
    g: &mut Graph<'_, T>,
    net: &NieNetwork,
    input: &NieInput<T>,
    visual: Option<Var>,
    actions: &[usize],
) -> Result<Var, TensorError> {
    let (b, c) = (input.batch, input.categories);
    check_categories(net, c)?;
    if actions.len() != b {
        return Err(TensorError::Shape {
            op: "nie_predict",
            shapes: vec![vec![b], vec![actions.len()]],
        });
    }
    let rows: Vec<_> = (0..b)
        .flat_map(|bi| (0..c).map(move |ci| (bi, actions[bi], ci)))
        .collect();
    let points = g.input(input.points.clone());
    Ok(predict_rows(g, net, input, visual, points, &rows)?.transformed)
}

/// Supervision for the executed action of each sample.
#[derive(Debug, Clone)]
pub struct NieTarget<T> {
    /// `t^{a*}`: `[B * C, 24]`
    pub points: Tensor<T>,
    /// `a*` per sample.
    pub action: Vec<usize>,
    /// `O*`: `[B * C]`
    pub observed: Vec<bool>,
}

impl<T: Scalar> NieTarget<T> {
    pub fn new(targets: &[&[[f64; KP_DIM]]], action: Vec<usize>, observed: Vec<bool>) -> Result<Self, TensorError> {
        let rows: usize = targets.iter().map(|t| t.len()).sum();
        let flat: Vec<f64> = targets.iter().flat_map(|t| t.iter().flatten().copied()).collect();
        Ok(Self {
            points: Tensor::from_f64(vec![rows, KP_DIM], &flat)?,
            action,
            observed,
        })
    }
}

/// Mean absolute error between `p^{a*}` and `t^{a*}` over observed
/// categories. With nothing observed the loss is a constant zero.
pub fn nie_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    out: &NieOutput,
    target: &NieTarget<T>,
) -> Result<Var, TensorError> {
    let c = out.categories;
    check_target(out.batch, c, target)?;
    let rows: Vec<usize> = (0..out.batch * c)
        .map(|i| out.row(i / c, target.action[i / c], i % c))
        .collect();
    masked_l1(g, out.transformed, &rows, target)
}

/// [`nie_loss`] on the output of [`nie_predict`].
pub fn nie_predict_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    predicted: Var,
    batch: usize,
    categories: usize,
    target: &NieTarget<T>,
) -> Result<Var, TensorError> {
    check_target(batch, categories, target)?;
    let rows: Vec<usize> = (0..batch * categories).collect();
    masked_l1(g, predicted, &rows, target)
}

fn check_target<T: Scalar>(batch: usize, c: usize, target: &NieTarget<T>) -> Result<(), TensorError> {
    if target.action.len() != batch || target.observed.len() != batch * c {
        return Err(TensorError::Shape {
            op: "nie_loss",
            shapes: vec![vec![batch, c], vec![target.action.len(), target.observed.len()]],
        });
    }
    if let Some(&a) = target.action.iter().find(|&&a| a >= NUM_ACTIONS) {
        return Err(TensorError::Index {
            op: "nie_loss",
            index: a,
            bound: NUM_ACTIONS,
        });
    }
    Ok(())
}

/// L1 over the observed entries; `rows[i]` is the prediction row for target
/// row `i`.
fn masked_l1<T: Scalar>(
    g: &mut Graph<'_, T>,
    predicted: Var,
    rows: &[usize],
    target: &NieTarget<T>,
) -> Result<Var, TensorError> {
    let (pred_rows, target_rows): (Vec<usize>, Vec<usize>) = rows
        .iter()
        .enumerate()
        .filter(|&(i, _)| target.observed[i])
        .map(|(i, &r)| (r, i))
        .unzip();
    if pred_rows.is_empty() {
        return Ok(g.input(Tensor::scalar(T::zero())));
    }
    let pred = g.gather(predicted, &pred_rows)?;
    let t = g.input(target.points.clone());
    let t = g.gather(t, &target_rows)?;
    let diff = g.sub(pred, t)?;
    let diff = g.abs(diff);
    Ok(g.mean(diff))
}
