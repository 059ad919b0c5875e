//! Multi-layer patchwise InfoNCE.
//!
//! For each encoder tap, `N` locations of the real image's features become
//! positives (and, for every other anchor, negatives); the same locations of
//! the translated image's features become anchors. On the query-selected taps
//! the features are first routed through the selected attention rows; on the
//! remaining taps the locations are sampled uniformly.

use qsattn_tensor::{Scalar, Tape, Tensor, Var};
use rand::seq::index;
use rand::Rng;

use crate::attn::{chw_to_hwc, gather_locations, route_on_tape, select_queries, Domain, FeatureMap, Routing, SelectionResult, SelectionStrategy};
use crate::error::{QsError, Result};
use crate::nets::{Generator, TapSet, TAP_COUNT};
use crate::params::{Bound, ParamId, ParamStore};

/// Embedding width of every projection head.
pub const EMBED_DIM: usize = 256;

/// Default InfoNCE temperature.
pub const DEFAULT_TAU: f64 = 0.07;

const HEAD_INIT_STD: f64 = 0.02;
const NORM_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug)]
struct HeadLayer {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// One two-layer perceptron per encoder tap, `C → 256 → 256`.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    layers: Vec<HeadLayer>,
    dim: usize,
}

impl ProjectionHead {
    /// Registers heads named `H.<layer>.*` for taps with the given channel counts.
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, tap_channels: &[usize], rng: &mut R) -> Self {
        Self::with_dim(store, tap_channels, EMBED_DIM, rng)
    }

    pub fn with_dim<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        tap_channels: &[usize],
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let layers = tap_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| HeadLayer {
                w1: store.add_normal(format!("H.{l}.w1"), vec![c, dim], HEAD_INIT_STD, rng),
                b1: store.add_zeros(format!("H.{l}.b1"), vec![dim]),
                w2: store.add_normal(format!("H.{l}.w2"), vec![dim, dim], HEAD_INIT_STD, rng),
                b2: store.add_zeros(format!("H.{l}.b2"), vec![dim]),
            })
            .collect();
        ProjectionHead { layers, dim }
    }

    /// Tap channel counts of a generator with base width `ngf`.
    pub fn tap_channels(ngf: usize) -> [usize; TAP_COUNT] {
        [3, 2 * ngf, 4 * ngf, 4 * ngf, 4 * ngf]
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Projects `N×C` features of tap `layer` to `N×dim`.
    pub fn project<T: Scalar>(&self, tape: &mut Tape<T>, bound: &Bound, layer: usize, x: Var) -> Result<Var> {
        let l = self
            .layers
            .get(layer)
            .ok_or_else(|| QsError::config(format!("no projection head for tap {layer}")))?;
        let h = tape.matmul(x, bound.var(l.w1))?;
        let h = tape.add_row_vector(h, bound.var(l.b1))?;
        let h = tape.relu(h);
        let h = tape.matmul(h, bound.var(l.w2))?;
        Ok(tape.add_row_vector(h, bound.var(l.b2))?)
    }
}

/// Anchors and positives of one tap, already projected and normalized.
#[derive(Clone, Debug, PartialEq)]
pub struct NceBatch<T: Scalar = f64> {
    pub anchors: Tensor<T>,
    pub positives: Tensor<T>,
    pub tau: T,
}

impl<T: Scalar> NceBatch<T> {
    pub fn new(anchors: Tensor<T>, positives: Tensor<T>, tau: T) -> Result<Self> {
        let (n, d) = anchors.dims2("NceBatch")?;
        if positives.shape() != [n, d] {
            return Err(QsError::Alignment(format!(
                "anchors {:?} vs positives {:?}",
                anchors.shape(),
                positives.shape()
            )));
        }
        if !(tau > T::zero()) {
            return Err(QsError::config(format!("temperature must be positive, got {tau}")));
        }
        Ok(NceBatch { anchors, positives, tau })
    }

    pub fn len(&self) -> usize {
        self.anchors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the locations of one tap are chosen.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerPlan<T: Scalar = f64> {
    /// Query-selected attention rows, routed before projection.
    Selected(SelectionResult<T>),
    /// Uniformly sampled locations, gathered as they are.
    Sampled(Vec<usize>),
}

impl<T: Scalar> LayerPlan<T> {
    pub fn indices(&self) -> &[usize] {
        match self {
            LayerPlan::Selected(sel) => &sel.indices,
            LayerPlan::Sampled(idx) => idx,
        }
    }
}

/// Taps that use query selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QsLayers {
    /// The two deepest taps; shallower taps are sampled uniformly.
    #[default]
    LastTwo,
    /// No query selection anywhere.
    None,
}

impl QsLayers {
    pub fn uses_selection(self, layer: usize) -> bool {
        match self {
            QsLayers::LastTwo => layer + 2 >= TAP_COUNT,
            QsLayers::None => false,
        }
    }
}

/// Settings of the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchNce {
    pub n_queries: usize,
    pub strategy: SelectionStrategy,
    pub tau: f64,
    pub qs_layers: QsLayers,
}

impl Default for PatchNce {
    fn default() -> Self {
        PatchNce {
            n_queries: 256,
            strategy: SelectionStrategy::global(),
            tau: DEFAULT_TAU,
            qs_layers: QsLayers::LastTwo,
        }
    }
}

/// Uniform sample of `n` distinct locations out of `hw`.
pub fn sample_locations<R: Rng + ?Sized>(hw: usize, n: usize, rng: &mut R) -> Result<Vec<usize>> {
    if n == 0 || n > hw {
        return Err(QsError::config(format!("cannot sample {n} locations from {hw}")));
    }
    Ok(index::sample(rng, hw, n).into_vec())
}

impl PatchNce {
    /// Chooses the locations of every tap from the real image's features.
    pub fn plan<T: Scalar, R: Rng + ?Sized>(&self, tape: &Tape<T>, real: &TapSet, rng: &mut R) -> Result<Vec<LayerPlan<T>>> {
        real.taps
            .iter()
            .enumerate()
            .map(|(layer, &tap)| {
                let f = FeatureMap::from_chw(tape.value(tap), layer, Domain::SourceReal)?;
                if self.qs_layers.uses_selection(layer) {
                    Ok(LayerPlan::Selected(select_queries(&f, &self.strategy, self.n_queries, rng)?))
                } else {
                    Ok(LayerPlan::Sampled(sample_locations(f.hw(), self.n_queries, rng)?))
                }
            })
            .collect()
    }

    /// Mean over taps of the per-tap InfoNCE loss.
    pub fn loss_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        head: &ProjectionHead,
        real: &TapSet,
        fake: &TapSet,
        plans: &[LayerPlan<T>],
    ) -> Result<Var> {
        if real.taps.len() != plans.len() || fake.taps.len() != plans.len() {
            return Err(QsError::Alignment(format!(
                "{} real taps, {} fake taps, {} plans",
                real.taps.len(),
                fake.taps.len(),
                plans.len()
            )));
        }
        let mut losses = Vec::with_capacity(plans.len());
        for (layer, plan) in plans.iter().enumerate() {
            let r = chw_to_hwc(tape, real.taps[layer])?;
            let f = chw_to_hwc(tape, fake.taps[layer])?;
            let (anchors, positives) = embed_on_tape(tape, bound, head, layer, plan, r, f, self.strategy.routing)?;
            losses.push(nce_loss_on_tape(tape, anchors, positives, self.tau)?);
        }
        let stacked = concat_scalars(tape, &losses)?;
        Ok(tape.mean(stacked))
    }

    /// Translates `x`, then scores the translation against `x`'s own features.
    ///
    /// Returns the translated image and the loss.
    pub fn branch<T: Scalar, R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        generator: &Generator,
        head: &ProjectionHead,
        x: Var,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let (y, real) = generator.forward(tape, bound, x)?;
        let fake = generator.encode(tape, bound, y)?;
        let plans = self.plan(tape, &real, rng)?;
        let loss = self.loss_on_tape(tape, bound, head, &real, &fake, &plans)?;
        Ok((y, loss))
    }
}

/// The identity branch: the contrastive loss between a target-domain image and its own translation.
pub fn identity_branch<T: Scalar, R: Rng + ?Sized>(
    tape: &mut Tape<T>,
    bound: &Bound,
    generator: &Generator,
    head: &ProjectionHead,
    nce: &PatchNce,
    i_y: Var,
    rng: &mut R,
) -> Result<Var> {
    Ok(nce.branch(tape, bound, generator, head, i_y, rng)?.1)
}

fn concat_scalars<T: Scalar>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let rows = xs
        .iter()
        .map(|&x| tape.reshape(x, vec![1]))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(tape.concat(&rows)?)
}

/// Anchors (gradient-carrying) and positives (detached), projected and normalized.
#[allow(clippy::too_many_arguments)]
pub fn embed_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &Bound,
    head: &ProjectionHead,
    layer: usize,
    plan: &LayerPlan<T>,
    real_hwc: Var,
    fake_hwc: Var,
    routing: Routing,
) -> Result<(Var, Var)> {
    let (pos, anc) = match plan {
        LayerPlan::Selected(sel) => route_on_tape(tape, sel, real_hwc, fake_hwc, routing)?,
        LayerPlan::Sampled(idx) => {
            if tape.shape(real_hwc) != tape.shape(fake_hwc) {
                return Err(QsError::Alignment(format!(
                    "{:?} vs {:?}",
                    tape.shape(real_hwc),
                    tape.shape(fake_hwc)
                )));
            }
            (gather_locations(tape, real_hwc, idx)?, gather_locations(tape, fake_hwc, idx)?)
        }
    };
    let pos = head.project(tape, bound, layer, pos)?;
    let pos = tape.l2_normalize_rows(pos, NORM_EPS)?;
    let pos = tape.detach(pos);
    let anc = head.project(tape, bound, layer, anc)?;
    let anc = tape.l2_normalize_rows(anc, NORM_EPS)?;
    Ok((anc, pos))
}

/// `mean_i −log softmax_i(qᵢ·k / τ)[i]` over `N×D` anchors and positives.
pub fn nce_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    let (n, _) = tape.value(anchors).dims2("nce_loss")?;
    if n < 2 {
        return Err(QsError::config(format!("InfoNCE needs at least 2 queries for negatives, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(QsError::config(format!("temperature must be positive, got {tau}")));
    }
    let kt = tape.transpose(positives)?;
    let sim = tape.matmul(anchors, kt)?;
    let logits = tape.scale(sim, T::lit(1.0 / tau));
    let logp = tape.log_softmax_rows(logits)?;
    let diag: Vec<usize> = (0..n).collect();
    let picked = tape.pick_cols(logp, &diag)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -T::one()))
}

/// Loss of a prepared batch.
pub fn nce_loss<T: Scalar>(batch: &NceBatch<T>) -> Result<T> {
    let mut tape = Tape::new();
    let a = tape.constant(batch.anchors.clone());
    let k = tape.constant(batch.positives.clone());
    let loss = nce_loss_on_tape(&mut tape, a, k, batch.tau.as_f64())?;
    Ok(tape.value(loss).item())
}

/// Builds the batch of one tap from plain feature maps.
#[allow(clippy::too_many_arguments)]
pub fn build_nce_batch<T: Scalar>(
    plan: &LayerPlan<T>,
    f_real: &FeatureMap<T>,
    f_fake: &FeatureMap<T>,
    head: &ProjectionHead,
    store: &ParamStore<T>,
    routing: Routing,
    tau: f64,
) -> Result<NceBatch<T>> {
    if f_real.layer_id() != f_fake.layer_id() {
        return Err(QsError::Alignment(format!(
            "layer {} vs layer {}",
            f_real.layer_id(),
            f_fake.layer_id()
        )));
    }
    let hw = f_real.hw();
    if let Some(&bad) = plan.indices().iter().find(|&&i| i >= hw) {
        return Err(QsError::config(format!("location {bad} outside a map of {hw} locations")));
    }
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let r = tape.constant(f_real.tensor().clone());
    let f = tape.constant(f_fake.tensor().clone());
    let (anc, pos) = embed_on_tape(&mut tape, &bound, head, f_real.layer_id(), plan, r, f, routing)?;
    NceBatch::new(tape.value(anc).clone(), tape.value(pos).clone(), T::lit(tau))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(anchors: Vec<f64>, positives: Vec<f64>, n: usize, tau: f64) -> NceBatch {
        let d = anchors.len() / n;
        NceBatch::new(
            Tensor::new(vec![n, d], anchors).unwrap(),
            Tensor::new(vec![n, d], positives).unwrap(),
            tau,
        )
        .unwrap()
    }

    fn eye(n: usize) -> Vec<f64> {
        (0..n * n).map(|k| if k / n == k % n { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn identical_embeddings_give_log_n() {
        let v = [0.6, 0.8].repeat(4);
        for tau in [0.07, 1.0, 3.0] {
            let loss = nce_loss(&batch(v.clone(), v.clone(), 4, tau)).unwrap();
            assert!((loss - 4f64.ln()).abs() < 1e-9, "{loss}");
        }
    }

    #[test]
    fn orthogonal_negatives_closed_form() {
        let loss = nce_loss(&batch(eye(4), eye(4), 4, 1.0)).unwrap();
        let expect = (1.0 + 3.0 * (-1f64).exp()).ln();
        assert!((loss - expect).abs() < 1e-12);
        assert!((expect - 0.7437).abs() < 1e-4);
    }

    #[test]
    fn single_query_is_rejected() {
        let b = batch(vec![1.0, 0.0], vec![1.0, 0.0], 1, 0.07);
        assert!(matches!(nce_loss(&b), Err(QsError::Config(_))));
    }

    #[test]
    fn qs_layers_cover_the_two_deepest_taps() {
        let used: Vec<_> = (0..TAP_COUNT).filter(|&l| QsLayers::LastTwo.uses_selection(l)).collect();
        assert_eq!(used, vec![3, 4]);
        assert!((0..TAP_COUNT).all(|l| !QsLayers::None.uses_selection(l)));
    }

    #[test]
    fn equal_maps_give_equal_anchors_and_positives() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let head = ProjectionHead::with_dim(&mut store, &[3, 3, 3, 3, 5], 8, &mut rng);
        let f = FeatureMap::new(Tensor::randn(vec![4, 4, 5], 1.0, &mut rng), 4, Domain::SourceReal).unwrap();
        let sel = select_queries(&f, &SelectionStrategy::global(), 6, &mut rng).unwrap();
        let b = build_nce_batch(&LayerPlan::Selected(sel), &f, &f, &head, &store, Routing::CrossDomain, 0.07).unwrap();
        assert_eq!(b.anchors, b.positives);
        assert_eq!(b.anchors.shape(), &[6, 8]);
    }

    #[test]
    fn index_outside_map_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let head = ProjectionHead::with_dim(&mut store, &[2], 4, &mut rng);
        let f = FeatureMap::new(Tensor::randn(vec![2, 2, 2], 1.0, &mut rng), 0, Domain::SourceReal).unwrap();
        let plan = LayerPlan::Sampled(vec![0, 4]);
        assert!(build_nce_batch(&plan, &f, &f, &head, &store, Routing::CrossDomain, 0.07).is_err());
        assert!(sample_locations(4, 5, &mut rng).is_err());
    }
}
