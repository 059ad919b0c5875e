//! Query-selected attention.
//!
//! A feature map from the source image is compared with itself, globally
//! (`HW×HW`) or inside a `w×w` window (`HW×w²`). Rows of the resulting
//! row-stochastic matrix are scored by entropy; the `N` lowest-entropy rows
//! form the reduced routing matrix that mixes value features from both the
//! source image and its translation.
//!
//! Attention logits are plain dot products (no `1/√C` factor). The max-mean
//! alternative measure does scale by `1/√C`.

use std::fmt;
use std::str::FromStr;

use qsattn_tensor::{Scalar, Tape, Tensor, Var};
use rand::seq::index;
use rand::Rng;

use crate::error::{QsError, Result};

/// Largest `H·W` for which a dense `HW×HW` matrix is built.
pub const GLOBAL_HW_LIMIT: usize = 4096;

/// Default local attention window.
pub const DEFAULT_WINDOW: usize = 9;

/// Which image a feature map was extracted from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    /// The real source image.
    SourceReal,
    /// The translation of the source image.
    TargetFake,
    /// A real target-domain image.
    TargetReal,
    /// The generator's output for a real target-domain image.
    TargetIdentity,
}

/// An `H×W×C` encoder activation.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T: Scalar = f64> {
    tensor: Tensor<T>,
    layer_id: usize,
    domain: Domain,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(tensor: Tensor<T>, layer_id: usize, domain: Domain) -> Result<Self> {
        let (h, w, c) = tensor.dims3("FeatureMap")?;
        if h == 0 || w == 0 || c == 0 {
            return Err(QsError::config(format!("empty feature map {:?}", tensor.shape())));
        }
        if layer_id >= crate::nets::TAP_COUNT {
            return Err(QsError::config(format!("layer id {layer_id} outside 0..{}", crate::nets::TAP_COUNT)));
        }
        Ok(FeatureMap {
            tensor,
            layer_id,
            domain,
        })
    }

    /// Builds a map from a network activation laid out `C×H×W`.
    pub fn from_chw(chw: &Tensor<T>, layer_id: usize, domain: Domain) -> Result<Self> {
        let (c, h, w) = chw.dims3("FeatureMap::from_chw")?;
        let hwc = chw.reshape(vec![c, h * w])?.transpose2d()?.reshape(vec![h, w, c])?;
        Self::new(hwc, layer_id, domain)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.tensor
    }

    pub fn layer_id(&self) -> usize {
        self.layer_id
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }

    pub fn hw(&self) -> usize {
        self.height() * self.width()
    }

    /// The `HW×C` query/key/value matrix.
    pub fn matrix(&self) -> Tensor<T> {
        self.tensor
            .reshape(vec![self.hw(), self.channels()])
            .expect("same element count")
    }
}

/// Converts a `C×H×W` tape value to `H×W×C`.
pub fn chw_to_hwc<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).dims3("chw_to_hwc")?;
    let m = tape.reshape(x, vec![c, h * w])?;
    let t = tape.transpose(m)?;
    Ok(tape.reshape(t, vec![h, w, c])?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Global,
    Local(usize),
}

impl AttentionKind {
    /// Row width: `HW` for global attention, `w²` for local.
    pub fn row_width(self, hw: usize) -> usize {
        match self {
            AttentionKind::Global => hw,
            AttentionKind::Local(w) => w * w,
        }
    }
}

/// A row-stochastic attention matrix over the locations of one feature map.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix<T: Scalar = f64> {
    pub kind: AttentionKind,
    pub rows: Tensor<T>,
}

fn check_window(w: usize) -> Result<()> {
    if w == 0 || w.is_multiple_of(2) {
        return Err(QsError::config(format!("local window must be odd, got {w}")));
    }
    Ok(())
}

/// Raw `HW×HW` dot-product logits `Q·Qᵀ`.
fn global_logits<T: Scalar>(f: &FeatureMap<T>) -> Result<Tensor<T>> {
    if f.hw() > GLOBAL_HW_LIMIT {
        return Err(QsError::Resource(format!(
            "global attention over {}×{} = {} locations exceeds the {GLOBAL_HW_LIMIT}-location budget; \
             use local attention or pool the map first",
            f.height(),
            f.width(),
            f.hw()
        )));
    }
    let q = f.matrix();
    Ok(q.matmul(&q.transpose2d()?)?)
}

fn softmax_rows<T: Scalar>(logits: Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let v = tape.constant(logits);
    let s = tape.softmax_rows(v)?;
    Ok(tape.value(s).clone())
}

/// Row-softmax of all pairwise feature dot products.
pub fn global_attention<T: Scalar>(f: &FeatureMap<T>) -> Result<AttentionMatrix<T>> {
    Ok(AttentionMatrix {
        kind: AttentionKind::Global,
        rows: softmax_rows(global_logits(f)?)?,
    })
}

/// Row-softmax of each location's dot products with its zero-padded `w×w` neighbours.
pub fn local_attention<T: Scalar>(f: &FeatureMap<T>, window: usize) -> Result<AttentionMatrix<T>> {
    check_window(window)?;
    let (hw, c, k) = (f.hw(), f.channels(), window * window);
    let mut tape = Tape::new();
    let x = tape.constant(f.tensor.clone());
    let nb = tape.unfold(x, window)?;
    let nb = tape.value(nb).data();
    let q = f.tensor.data();
    let logits = Tensor::from_fn(vec![hw, k], |idx| {
        let (i, j) = (idx / k, idx % k);
        let query = &q[i * c..(i + 1) * c];
        let key = &nb[(i * k + j) * c..(i * k + j + 1) * c];
        query.iter().zip(key).map(|(&a, &b)| a * b).sum()
    });
    Ok(AttentionMatrix {
        kind: AttentionKind::Local(window),
        rows: softmax_rows(logits)?,
    })
}

/// Shannon entropy (nats) of every row, with `0·log 0 = 0`.
pub fn row_entropy<T: Scalar>(a: &AttentionMatrix<T>) -> Result<Tensor<T>> {
    let (rows, cols) = a.rows.dims2("row_entropy")?;
    if let Some(bad) = a.rows.data().iter().find(|v| !(**v >= T::zero())) {
        return Err(QsError::Invariant(format!("attention entry {bad} is negative or NaN")));
    }
    Ok(Tensor::from_fn(vec![rows], |i| {
        a.rows.data()[i * cols..(i + 1) * cols]
            .iter()
            .map(|&p| {
                // -log p, with the infinite value at p = 0 replaced by 0
                let surprisal = -p.ln();
                p * if surprisal.is_infinite() { T::zero() } else { surprisal }
            })
            .sum()
    }))
}

/// Max-minus-mean of each query's `1/√C`-scaled similarities with all keys.
pub fn informer_measure<T: Scalar>(f: &FeatureMap<T>) -> Result<Tensor<T>> {
    let logits = global_logits(f)?;
    let hw = f.hw();
    let scale = T::one() / T::lit(f.channels() as f64).sqrt();
    Ok(Tensor::from_fn(vec![hw], |i| {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mean = row.iter().copied().sum::<T>() / T::lit(hw as f64);
        (max - mean) * scale
    }))
}

/// How query locations are chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selector {
    /// Lowest entropy of global attention rows.
    Global,
    /// Lowest entropy of local attention rows.
    Local(usize),
    /// Lowest local entropy picks the rows; the routed rows come from global attention.
    LocalGlobal(usize),
    /// Highest max-mean measure, routed with global rows.
    InformerGlobal,
    /// Uniform sample without replacement, routed with global rows.
    Random,
}

/// Which value features the selected rows are applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Routing {
    /// One source-derived matrix routes both the source and translated values.
    #[default]
    CrossDomain,
    /// Each image routes its own values with its own attention rows at the same indices.
    SelfDomain,
    /// Selected features are used as they are, without routing.
    NoRouting,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SelectionStrategy {
    pub selector: Selector,
    pub routing: Routing,
}

impl SelectionStrategy {
    pub fn new(selector: Selector, routing: Routing) -> Result<Self> {
        match selector {
            Selector::Local(w) | Selector::LocalGlobal(w) => check_window(w)?,
            _ => {}
        }
        if routing == Routing::NoRouting && selector != Selector::Global {
            return Err(QsError::config(
                "selection without routing is only defined for global entropy selection",
            ));
        }
        Ok(SelectionStrategy { selector, routing })
    }

    pub fn global() -> Self {
        SelectionStrategy {
            selector: Selector::Global,
            routing: Routing::CrossDomain,
        }
    }

    /// The attention kind whose rows are used for routing.
    pub fn routing_kind(&self) -> AttentionKind {
        match self.selector {
            Selector::Local(w) => AttentionKind::Local(w),
            _ => AttentionKind::Global,
        }
    }
}

impl Default for SelectionStrategy {
    fn default() -> Self {
        Self::global()
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Selector::Global => write!(f, "global"),
            Selector::Local(_) => write!(f, "local"),
            Selector::LocalGlobal(_) => write!(f, "local-global"),
            Selector::InformerGlobal => write!(f, "informer"),
            Selector::Random => write!(f, "random"),
        }
    }
}

impl fmt::Display for Routing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Routing::CrossDomain => "cross",
            Routing::SelfDomain => "self",
            Routing::NoRouting => "none",
        })
    }
}

impl FromStr for Routing {
    type Err = QsError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Routing::CrossDomain),
            "self" => Ok(Routing::SelfDomain),
            "none" => Ok(Routing::NoRouting),
            other => Err(QsError::config(format!("unknown routing `{other}` (expected cross|self|none)"))),
        }
    }
}

/// Parses a selector name; `window` applies to the local variants.
pub fn parse_selector(name: &str, window: usize) -> Result<Selector> {
    match name {
        "global" => Ok(Selector::Global),
        "local" => Ok(Selector::Local(window)),
        "local-global" => Ok(Selector::LocalGlobal(window)),
        "informer" => Ok(Selector::InformerGlobal),
        "random" => Ok(Selector::Random),
        other => Err(QsError::config(format!(
            "unknown strategy `{other}` (expected global|local|local-global|informer|random)"
        ))),
    }
}

/// The chosen queries and their rows of the routing matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionResult<T: Scalar = f64> {
    /// Row-major spatial indices into `H×W`.
    pub indices: Vec<usize>,
    /// Selection score of each chosen query (entropy, or max-mean measure).
    pub scores: Vec<T>,
    /// `N×K` rows of the routing matrix.
    pub a_qs: Tensor<T>,
    /// Geometry of `a_qs` rows.
    pub kind: AttentionKind,
}

impl<T: Scalar> SelectionResult<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Indices of the `n` smallest scores; equal scores keep ascending index order.
pub fn smallest_n<T: Scalar>(scores: &[T], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    order.truncate(n);
    order
}

/// Indices of the `n` largest scores; equal scores keep ascending index order.
pub fn largest_n<T: Scalar>(scores: &[T], n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    order.truncate(n);
    order
}

fn take_rows<T: Scalar>(m: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let cols = m.shape()[1];
    let data = idx.iter().flat_map(|&i| m.row(i).iter().copied()).collect();
    Tensor::new(vec![idx.len(), cols], data).expect("row gather")
}

/// Picks `n` queries from the source feature map.
///
/// The routing matrix depends only on `f_source`. `rng` is consumed only by
/// the random selector.
pub fn select_queries<T: Scalar, R: Rng + ?Sized>(
    f_source: &FeatureMap<T>,
    strategy: &SelectionStrategy,
    n: usize,
    rng: &mut R,
) -> Result<SelectionResult<T>> {
    let hw = f_source.hw();
    if n == 0 || n > hw {
        return Err(QsError::config(format!(
            "cannot select {n} queries from a {}×{} map ({hw} locations)",
            f_source.height(),
            f_source.width()
        )));
    }
    let by_entropy = |a: &AttentionMatrix<T>| -> Result<(Vec<usize>, Vec<T>)> {
        let h = row_entropy(a)?;
        let idx = smallest_n(h.data(), n);
        let scores = idx.iter().map(|&i| h.data()[i]).collect();
        Ok((idx, scores))
    };
    let (indices, scores, a_qs, kind) = match strategy.selector {
        Selector::Global => {
            let ag = global_attention(f_source)?;
            let (idx, scores) = by_entropy(&ag)?;
            let rows = take_rows(&ag.rows, &idx);
            (idx, scores, rows, AttentionKind::Global)
        }
        Selector::Local(w) => {
            let al = local_attention(f_source, w)?;
            let (idx, scores) = by_entropy(&al)?;
            let rows = take_rows(&al.rows, &idx);
            (idx, scores, rows, AttentionKind::Local(w))
        }
        Selector::LocalGlobal(w) => {
            let al = local_attention(f_source, w)?;
            let (idx, scores) = by_entropy(&al)?;
            let ag = global_attention(f_source)?;
            let rows = take_rows(&ag.rows, &idx);
            (idx, scores, rows, AttentionKind::Global)
        }
        Selector::InformerGlobal => {
            let m = informer_measure(f_source)?;
            let idx = largest_n(m.data(), n);
            let scores = idx.iter().map(|&i| m.data()[i]).collect();
            let ag = global_attention(f_source)?;
            let rows = take_rows(&ag.rows, &idx);
            (idx, scores, rows, AttentionKind::Global)
        }
        Selector::Random => {
            let idx = index::sample(rng, hw, n).into_vec();
            let ag = global_attention(f_source)?;
            let h = row_entropy(&ag)?;
            let scores = idx.iter().map(|&i| h.data()[i]).collect();
            let rows = take_rows(&ag.rows, &idx);
            (idx, scores, rows, AttentionKind::Global)
        }
    };
    Ok(SelectionResult {
        indices,
        scores,
        a_qs,
        kind,
    })
}

/// Attention rows of `f` at `indices`, in the given geometry.
pub fn attention_rows<T: Scalar>(f: &FeatureMap<T>, kind: AttentionKind, indices: &[usize]) -> Result<Tensor<T>> {
    let a = match kind {
        AttentionKind::Global => global_attention(f)?,
        AttentionKind::Local(w) => local_attention(f, w)?,
    };
    Ok(take_rows(&a.rows, indices))
}

/// Applies routing rows to an `H×W×C` value map on the tape: `N×C` result.
///
/// The rows are recorded as constants, so gradients reach only the values.
pub fn route_rows<T: Scalar>(
    tape: &mut Tape<T>,
    a_qs: &Tensor<T>,
    kind: AttentionKind,
    indices: &[usize],
    values: Var,
) -> Result<Var> {
    let (h, w, c) = tape.value(values).dims3("route_rows")?;
    let a = tape.constant(a_qs.clone());
    match kind {
        AttentionKind::Global => {
            let v = tape.reshape(values, vec![h * w, c])?;
            Ok(tape.matmul(a, v)?)
        }
        AttentionKind::Local(win) => {
            let nb = tape.unfold(values, win)?;
            let picked = tape.gather_rows(nb, indices)?;
            Ok(tape.batched_row_matvec(a, picked)?)
        }
    }
}

/// Raw features of an `H×W×C` map at `indices`: `N×C`.
pub fn gather_locations<T: Scalar>(tape: &mut Tape<T>, values: Var, indices: &[usize]) -> Result<Var> {
    let (h, w, c) = tape.value(values).dims3("gather_locations")?;
    let m = tape.reshape(values, vec![h * w, c])?;
    Ok(tape.gather_rows(m, indices)?)
}

fn check_aligned(a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(QsError::Alignment(format!("source {a:?} vs target {b:?}")));
    }
    Ok(())
}

/// Routes source and target values on the tape, returning `(positives, anchors)`,
/// both `N×C`. `source` and `target` are `H×W×C` values.
pub fn route_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    sel: &SelectionResult<T>,
    source: Var,
    target: Var,
    routing: Routing,
) -> Result<(Var, Var)> {
    check_aligned(tape.shape(source), tape.shape(target))?;
    match routing {
        Routing::CrossDomain => {
            let pos = route_rows(tape, &sel.a_qs, sel.kind, &sel.indices, source)?;
            let anc = route_rows(tape, &sel.a_qs, sel.kind, &sel.indices, target)?;
            Ok((pos, anc))
        }
        Routing::SelfDomain => {
            let pos = route_rows(tape, &sel.a_qs, sel.kind, &sel.indices, source)?;
            let target_map = FeatureMap::new(tape.value(target).clone(), 0, Domain::TargetFake)?;
            let rows_y = attention_rows(&target_map, sel.kind, &sel.indices)?;
            let anc = route_rows(tape, &rows_y, sel.kind, &sel.indices, target)?;
            Ok((pos, anc))
        }
        Routing::NoRouting => {
            let pos = gather_locations(tape, source, &sel.indices)?;
            let anc = gather_locations(tape, target, &sel.indices)?;
            Ok((pos, anc))
        }
    }
}

/// Output of [`route_values`].
#[derive(Clone, Debug, PartialEq)]
pub struct Routed<T: Scalar = f64> {
    /// Routed source values, `N×C`.
    pub positives: Tensor<T>,
    /// Routed target values, `N×C`.
    pub anchors: Tensor<T>,
    /// Source values the rows were applied to: `HW×C` (global) or `N×w²×C` (local).
    pub value_pool: Tensor<T>,
}

/// Value routing on plain feature maps.
pub fn route_values<T: Scalar>(
    sel: &SelectionResult<T>,
    f_source: &FeatureMap<T>,
    f_target: &FeatureMap<T>,
    routing: Routing,
) -> Result<Routed<T>> {
    check_aligned(f_source.tensor.shape(), f_target.tensor.shape())?;
    if f_source.layer_id != f_target.layer_id {
        return Err(QsError::Alignment(format!(
            "layer {} vs layer {}",
            f_source.layer_id, f_target.layer_id
        )));
    }
    let mut tape = Tape::new();
    let src = tape.constant(f_source.tensor.clone());
    let tgt = tape.constant(f_target.tensor.clone());
    let (pos, anc) = route_on_tape(&mut tape, sel, src, tgt, routing)?;
    let value_pool = match sel.kind {
        AttentionKind::Local(w) if routing != Routing::NoRouting => {
            let nb = tape.unfold(src, w)?;
            let g = tape.gather_rows(nb, &sel.indices)?;
            tape.value(g).clone()
        }
        _ => f_source.matrix(),
    };
    Ok(Routed {
        positives: tape.value(pos).clone(),
        anchors: tape.value(anc).clone(),
        value_pool,
    })
}

/// Average-pools a map down to `target_side × target_side`.
pub fn pooled_all_layers<T: Scalar>(f: &FeatureMap<T>, target_side: usize) -> Result<FeatureMap<T>> {
    let factor = pool_factor(f.height(), f.width(), target_side)?;
    let mut tape = Tape::new();
    let x = tape.constant(f.tensor.clone());
    let p = tape.avg_pool_hwc(x, factor)?;
    FeatureMap::new(tape.value(p).clone(), f.layer_id, f.domain)
}

/// Pooling factor that brings an `h×w` map to `target_side` per side.
pub fn pool_factor(h: usize, w: usize, target_side: usize) -> Result<usize> {
    if target_side == 0 || h < target_side || w < target_side || !h.is_multiple_of(target_side) || !w.is_multiple_of(target_side) || h != w {
        return Err(QsError::config(format!(
            "{h}×{w} map cannot be average-pooled to {target_side}×{target_side}"
        )));
    }
    Ok(h / target_side)
}

/// `index,row,col,score` lines sorted ascending by score.
pub fn selection_dump<T: Scalar>(sel: &SelectionResult<T>, width: usize) -> String {
    let mut order: Vec<usize> = (0..sel.len()).collect();
    order.sort_by(|&a, &b| {
        sel.scores[a]
            .partial_cmp(&sel.scores[b])
            .expect("finite scores")
            .then(sel.indices[a].cmp(&sel.indices[b]))
    });
    let mut out = String::new();
    for k in order {
        let i = sel.indices[k];
        out.push_str(&format!("{},{},{},{}\n", i, i / width, i % width, sel.scores[k].as_f64()));
    }
    out
}
