//! Strategy/routing ablations and the query-count sweep at desk scale.

use std::fs;
use std::io::Write;
use std::path::Path;

use qsattn_tensor::Tensor;

use crate::attn::{Routing, Selector};
use crate::config::TrainConfig;
use crate::data::{synth_pair, UnpairedData, SYNTH_PALETTES};
use crate::error::Result;
use crate::metrics::{domain_score, swd, PatchBank, DEFAULT_PATCH, MIN_BANK};
use crate::train::{StepReport, Trainer};

/// Query counts of the sweep.
pub const QUERY_SWEEP: [usize; 4] = [64, 128, 256, 512];

/// One ablation configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub strategy: Selector,
    pub routing: Routing,
    pub n_queries: usize,
}

/// Models A to H: selection criterion × routing.
pub fn strategy_variants(window: usize, n_queries: usize) -> Vec<Variant> {
    let rows = [
        ("A", Selector::Global, Routing::CrossDomain),
        ("B", Selector::Random, Routing::CrossDomain),
        ("C", Selector::Global, Routing::NoRouting),
        ("D", Selector::Global, Routing::SelfDomain),
        ("E", Selector::Random, Routing::SelfDomain),
        ("F", Selector::InformerGlobal, Routing::CrossDomain),
        ("G", Selector::Local(window), Routing::CrossDomain),
        ("H", Selector::LocalGlobal(window), Routing::CrossDomain),
    ];
    rows.into_iter()
        .map(|(label, strategy, routing)| Variant {
            label: label.into(),
            strategy,
            routing,
            n_queries,
        })
        .collect()
}

/// Global selection with each query count of the sweep.
pub fn query_variants() -> Vec<Variant> {
    QUERY_SWEEP
        .iter()
        .map(|&n| Variant {
            label: format!("N{n}"),
            strategy: Selector::Global,
            routing: Routing::CrossDomain,
            n_queries: n,
        })
        .collect()
}

/// Smallest image side (a multiple of 4, at least `base`) whose deepest tap has `n` locations.
pub fn side_for_queries(n: usize, base: usize) -> usize {
    let mut side = base.max(8).div_ceil(4) * 4;
    while (side / 4).pow(2) < n {
        side += 4;
    }
    side
}

/// Outcome of one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    pub size: usize,
    pub steps: u64,
    pub first: StepReport,
    pub last: StepReport,
    pub swd: f64,
    pub domain_score: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str =
        "label,strategy,routing,n_queries,size,steps,con_x_first,con_x_last,g_last,d_last,swd,domain_score";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{:.5},{:.5},{:.5},{:.5},{:.5},{:.3}",
            self.variant.label,
            self.variant.strategy,
            self.variant.routing,
            self.variant.n_queries,
            self.size,
            self.steps,
            self.first.con_x,
            self.last.con_x,
            self.last.g_total,
            self.last.d_loss,
            self.swd,
            self.domain_score
        )
    }
}

/// Settings shared by every configuration of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationPlan {
    pub base: TrainConfig,
    pub steps: u64,
    pub test_images: usize,
}

/// Trains and evaluates one variant. Writes its step log to `log_dir` when given.
pub fn run_variant(plan: &AblationPlan, variant: &Variant, log_dir: Option<&Path>) -> Result<AblationRow> {
    let mut cfg = plan.base.clone();
    cfg.strategy = variant.strategy;
    cfg.routing = variant.routing;
    cfg.n_queries = variant.n_queries;
    if let Selector::Local(w) | Selector::LocalGlobal(w) = variant.strategy {
        cfg.window = w;
    }
    cfg.size = side_for_queries(variant.n_queries, cfg.size);
    let train = synth_pair(cfg.seed, cfg.synth_images, cfg.size)?;
    let test = synth_pair(cfg.seed.wrapping_add(1), plan.test_images, cfg.size)?;
    let data = UnpairedData::from_synth(&train)?;
    let size = cfg.size;
    let mut trainer = Trainer::<f32>::new(cfg)?;
    let mut reports = Vec::new();
    trainer.run(&data, plan.steps, |r| {
        reports.push(r.clone());
        Ok(())
    })?;
    if let Some(dir) = log_dir {
        fs::create_dir_all(dir)?;
        let mut f = fs::File::create(dir.join(format!("{}.csv", variant.label)))?;
        writeln!(f, "{}", StepReport::CSV_HEADER)?;
        for r in &reports {
            writeln!(f, "{}", r.csv())?;
        }
    }
    let fakes: Vec<Tensor<f32>> = test.x.iter().map(|s| trainer.translate(&s.image)).collect::<Result<_>>()?;
    let masks: Vec<Vec<bool>> = test.x.iter().map(|s| s.mask.clone().unwrap_or_default()).collect();
    let ys: Vec<Tensor<f32>> = test.y.iter().map(|s| s.image.clone()).collect();
    let distance = swd(
        &PatchBank::sample(&fakes, DEFAULT_PATCH, MIN_BANK, 1)?,
        &PatchBank::sample(&ys, DEFAULT_PATCH, MIN_BANK, 2)?,
        crate::metrics::DEFAULT_PROJECTIONS,
        3,
    )?;
    Ok(AblationRow {
        variant: variant.clone(),
        size,
        steps: plan.steps,
        first: reports.first().cloned().expect("at least one step"),
        last: reports.last().cloned().expect("at least one step"),
        swd: distance,
        domain_score: domain_score(&fakes, &masks, &SYNTH_PALETTES)?,
    })
}

/// Runs every variant in order, returning the CSV table.
pub fn run_ablation(plan: &AblationPlan, variants: &[Variant], log_dir: Option<&Path>) -> Result<(Vec<AblationRow>, String)> {
    let mut rows = Vec::new();
    let mut table = format!("{}\n", AblationRow::CSV_HEADER);
    for v in variants {
        log::info!("ablation {}: {} / {} / N={}", v.label, v.strategy, v.routing, v.n_queries);
        let row = run_variant(plan, v, log_dir)?;
        table.push_str(&row.csv());
        table.push('\n');
        rows.push(row);
    }
    Ok((rows, table))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variants_cover_models_a_to_h() {
        let v = strategy_variants(9, 64);
        let labels: Vec<_> = v.iter().map(|v| v.label.as_str()).collect();
        assert_eq!(labels, ["A", "B", "C", "D", "E", "F", "G", "H"]);
        assert_eq!(v[2].routing, Routing::NoRouting);
        assert!(v.iter().all(|v| crate::attn::SelectionStrategy::new(v.strategy, v.routing).is_ok()));
        assert_eq!(query_variants().len(), 4);
    }

    #[test]
    fn image_side_grows_with_query_count() {
        assert_eq!(side_for_queries(64, 64), 64);
        assert_eq!(side_for_queries(256, 64), 64);
        assert_eq!(side_for_queries(512, 64), 92);
        assert_eq!(side_for_queries(16, 30), 32);
    }
}
