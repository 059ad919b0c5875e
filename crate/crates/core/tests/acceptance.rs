//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

mod common;

use std::time::Instant;

use qsattn::ablation::{query_variants, run_ablation, strategy_variants, AblationPlan};
use qsattn::attn::*;
use qsattn::config::TrainConfig;
use qsattn::contrast::*;
use qsattn::data::{synth_pair, UnpairedData, SYNTH_PALETTES};
use qsattn::metrics::{domain_score, downsample_mask, hit_rate, swd, PatchBank, DEFAULT_PATCH, DEFAULT_PROJECTIONS};
use qsattn::params::ParamStore;
use qsattn::train::{StepReport, Trainer};
use qsattn_tensor::{check_gradients, op_catalog, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = qsattn::Result<(bool, String)>;

const ORACLE_TOL: f64 = 1e-6;
const GRAD_TOL: f64 = 1e-4;
const CLOSED_FORM_TOL: f64 = 1e-9;
const MIN_HIT_RATE: f64 = 0.70;
const MIN_CON_DROP: f64 = 0.30;
const MIN_TRANSLATED_SCORE: f64 = 0.8;
const MAX_INPUT_SCORE: f64 = 0.1;

fn random_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    (h, w, rng.random_range(1..=6))
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    let maps = 40;
    for _ in 0..maps {
        let (h, w, c) = random_dims(&mut rng);
        let f = common::random_map(&mut rng, h, w, c, 4);
        let g = common::random_map(&mut rng, h, w, c, 4);
        let ag = global_attention(&f)?;
        worst = worst.max(common::max_abs(ag.rows.data(), &common::global(&f).concat()));
        let h_naive: Vec<f64> = common::global(&f).iter().map(|r| common::entropy(r)).collect();
        worst = worst.max(common::max_abs(row_entropy(&ag)?.data(), &h_naive));
        worst = worst.max(common::max_abs(informer_measure(&f)?.data(), &common::informer(&f)));
        for win in [3, 5] {
            let al = local_attention(&f, win)?;
            let naive = common::local(&f, win);
            worst = worst.max(common::max_abs(al.rows.data(), &naive.concat()));
            let hl: Vec<f64> = naive.iter().map(|r| common::entropy(r)).collect();
            worst = worst.max(common::max_abs(row_entropy(&al)?.data(), &hl));
        }
        let n = rng.random_range(1..=f.hw());
        for selector in [Selector::Global, Selector::Local(3), Selector::Local(5), Selector::InformerGlobal] {
            let sel = select_queries(&f, &SelectionStrategy::new(selector, Routing::CrossDomain)?, n, &mut rng)?;
            let expected = match selector {
                Selector::Global => common::smallest(&h_naive, n),
                Selector::Local(win) => {
                    let hl: Vec<f64> = common::local(&f, win).iter().map(|r| common::entropy(r)).collect();
                    common::smallest(&hl, n)
                }
                _ => common::largest(&common::informer(&f), n),
            };
            if sel.indices != expected {
                return Ok((false, format!("{selector} selection differs on a {h}x{w}x{c} map")));
            }
            let routed = route_values(&sel, &f, &g, Routing::CrossDomain)?;
            for (k, &i) in sel.indices.iter().enumerate() {
                let row = sel.a_qs.row(k);
                let (p, a) = match sel.kind {
                    AttentionKind::Global => (common::route_global(row, &f), common::route_global(row, &g)),
                    AttentionKind::Local(win) => (common::route_local(row, i, &f, win), common::route_local(row, i, &g, win)),
                };
                worst = worst.max(common::max_abs(routed.positives.row(k), &p));
                worst = worst.max(common::max_abs(routed.anchors.row(k), &a));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < ORACLE_TOL && secs < 10.0,
        format!("{maps} maps, max abs error {worst:.2e} (< {ORACLE_TOL:.0e}), {secs:.2}s (< 10s)"),
    ))
}

fn selection_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let maps = 100;
    for m in 0..maps {
        let (h, w, c) = random_dims(&mut rng);
        // quantized features force ties
        let f: FeatureMap = FeatureMap::new(
            Tensor::from_fn(vec![h, w, c], |_| (rng.random_range(-2i32..=2) as f64) * 0.5),
            4,
            Domain::SourceReal,
        )?;
        let n = rng.random_range(1..=f.hw());
        let hg: Vec<f64> = row_entropy(&global_attention(&f)?)?.data().to_vec();
        let hl: Vec<f64> = row_entropy(&local_attention(&f, 3)?)?.data().to_vec();
        let inf = informer_measure(&f)?.data().to_vec();
        let run = |s: Selector, rng: &mut ChaCha8Rng| select_queries(&f, &SelectionStrategy::new(s, Routing::CrossDomain).unwrap(), n, rng);
        let checks = [
            (run(Selector::Global, &mut rng)?.indices, common::smallest(&hg, n)),
            (run(Selector::Local(3), &mut rng)?.indices, common::smallest(&hl, n)),
            (run(Selector::InformerGlobal, &mut rng)?.indices, common::largest(&inf, n)),
        ];
        if let Some(k) = checks.iter().position(|(got, want)| got != want) {
            return Ok((false, format!("map {m}: selector #{k} disagrees with exhaustive sort")));
        }
    }
    let flat: FeatureMap = FeatureMap::new(Tensor::full(vec![4, 4, 3], 0.7), 4, Domain::SourceReal)?;
    let tied = select_queries(&flat, &SelectionStrategy::global(), 5, &mut rng)?;
    let ok = tied.indices == [0, 1, 2, 3, 4];
    Ok((ok, format!("{maps} maps x 3 selectors match exhaustive sort; all-tie map selects first N: {ok}")))
}

fn entropy_conventions() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut rows = 0usize;
    for _ in 0..100 {
        let (h, w, c) = random_dims(&mut rng);
        let f: FeatureMap = FeatureMap::new(Tensor::randn(vec![h, w, c], 3.0, &mut rng), 4, Domain::SourceReal)?;
        for a in [global_attention(&f)?, local_attention(&f, 3)?, local_attention(&f, 5)?] {
            let k = a.rows.shape()[1] as f64;
            for &e in row_entropy(&a)?.data() {
                rows += 1;
                if !(e >= 0.0 && e <= k.ln() + 1e-12) {
                    return Ok((false, format!("entropy {e} outside [0, ln {k}]")));
                }
            }
        }
    }
    let mut uniform_err = 0.0f64;
    for k in [1usize, 2, 9, 25, 81, 4096] {
        let uniform = AttentionMatrix { kind: AttentionKind::Global, rows: Tensor::full(vec![1, k], 1.0 / k as f64) };
        uniform_err = uniform_err.max((row_entropy(&uniform)?.data()[0] - (k as f64).ln()).abs());
        let hot = AttentionMatrix {
            kind: AttentionKind::Global,
            rows: Tensor::from_fn(vec![1, k], |j| if j == k - 1 { 1.0 } else { 0.0 }),
        };
        if row_entropy(&hot)?.data()[0] != 0.0 {
            return Ok((false, format!("one-hot row of width {k} has nonzero entropy")));
        }
    }
    Ok((
        uniform_err < CLOSED_FORM_TOL,
        format!("{rows} rows within [0, ln K]; one-hot exactly 0; uniform error {uniform_err:.1e} (< {CLOSED_FORM_TOL:.0e})"),
    ))
}

fn gradient_suite() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let cases = op_catalog(&mut rng, 3);
    let mut worst = (0.0f64, "");
    for case in &cases {
        let r = check_gradients(&case.inputs, 1e-5, &case.f)?;
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, case.name);
        }
    }
    // composed loss: head and routing fixed, fake features free
    let real = common::random_map(&mut rng, 4, 4, 3, 4);
    let mut store = ParamStore::<f64>::new();
    let head = ProjectionHead::with_dim(&mut store, &[3; 5], 6, &mut rng);
    let mut composed = 0.0f64;
    for selector in [Selector::Global, Selector::Local(3)] {
        let sel = select_queries(&real, &SelectionStrategy::new(selector, Routing::CrossDomain)?, 5, &mut rng)?;
        let plan = LayerPlan::Selected(sel);
        let fake = Tensor::randn(vec![4, 4, 3], 1.0, &mut rng);
        let r = check_gradients(&[fake], 1e-5, |tape, v| {
            let bound = store.bind(tape, false);
            let rv = tape.constant(real.tensor().clone());
            let (anc, pos) = embed_on_tape(tape, &bound, &head, 4, &plan, rv, v[0], Routing::CrossDomain).unwrap();
            Ok(nce_loss_on_tape(tape, anc, pos, 0.5).unwrap())
        })?;
        composed = composed.max(r.max_rel_error);
    }
    // detach contract: p scales the real side, q the translated side
    let sel = select_queries(&real, &SelectionStrategy::global(), 6, &mut rng)?;
    let plan = LayerPlan::Selected(sel);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, true);
    let p = tape.param(Tensor::full(vec![4, 4, 3], 1.0));
    let q = tape.param(Tensor::full(vec![4, 4, 3], 1.0));
    let xv = tape.constant(real.tensor().clone());
    let yv = tape.constant(Tensor::randn(vec![4, 4, 3], 1.0, &mut rng));
    let rv = tape.mul(p, xv)?;
    let fv = tape.mul(q, yv)?;
    let (anc, pos) = embed_on_tape(&mut tape, &bound, &head, 4, &plan, rv, fv, Routing::CrossDomain)?;
    let loss = nce_loss_on_tape(&mut tape, anc, pos, 0.07)?;
    let grads = tape.backward(loss)?;
    let real_zero = grads.get(p).is_none_or(|g| g.data().iter().all(|&v| v == 0.0));
    let fake_nonzero = grads.get(q).is_some_and(|g| g.data().iter().any(|&v| v != 0.0));
    Ok((
        worst.0 < GRAD_TOL && composed < GRAD_TOL && real_zero && fake_nonzero,
        format!(
            "{} op cases, worst rel {:.1e} ({}); composed loss rel {composed:.1e} (< {GRAD_TOL:.0e}); positives zero grad: {real_zero}; anchors nonzero: {fake_nonzero}",
            cases.len(),
            worst.0,
            worst.1
        ),
    ))
}

fn closed_forms() -> Outcome {
    let same = Tensor::full(vec![4, 8], 0.5);
    let identical = nce_loss(&NceBatch::new(same.clone(), same, 0.07)?)?;
    let eye = Tensor::from_fn(vec![4, 4], |k| if k / 4 == k % 4 { 1.0 } else { 0.0 });
    let orthogonal = nce_loss(&NceBatch::new(eye.clone(), eye, 1.0)?)?;
    let (e1, e2) = ((identical - 4f64.ln()).abs(), (orthogonal - (1.0 + 3.0 * (-1f64).exp()).ln()).abs());
    Ok((
        e1 < CLOSED_FORM_TOL && e2 < CLOSED_FORM_TOL,
        format!("identical: {identical:.12} vs ln 4 (err {e1:.1e}); orthogonal: {orthogonal:.12} vs ln(1+3/e) (err {e2:.1e})"),
    ))
}

struct ToyRun {
    hits_before: f64,
    hits_after: f64,
    con_x: Vec<f64>,
    score_fake: f64,
    score_input: f64,
    swd_fake: f64,
    swd_input: f64,
    secs: f64,
}

fn toy_run() -> qsattn::Result<ToyRun> {
    let start = Instant::now();
    let cfg = TrainConfig {
        ngf: 16,
        ndf: 16,
        n_queries: 64,
        synth_images: 50,
        ..TrainConfig::default()
    };
    let n = cfg.n_queries;
    let train = synth_pair(cfg.seed, cfg.synth_images, cfg.size)?;
    let test = synth_pair(cfg.seed + 1, 20, cfg.size)?;
    let data = UnpairedData::from_synth(&train)?;
    let mut trainer = Trainer::<f32>::new(cfg)?;
    let hits = |t: &Trainer<f32>| -> qsattn::Result<f64> {
        let mut total = 0.0;
        for s in &test.x {
            let f = &t.features(&s.image)?[4];
            let sel = select_queries(f, &SelectionStrategy::global(), n, &mut ChaCha8Rng::seed_from_u64(0))?;
            let mask = downsample_mask(s.mask.as_deref().unwrap_or_default(), s.side(), f.height())?;
            total += hit_rate(&sel.indices, &mask);
        }
        Ok(total / test.x.len() as f64)
    };
    let hits_before = hits(&trainer)?;
    let mut con_x = Vec::new();
    trainer.run(&data, 1000, |r| {
        con_x.push(r.con_x);
        Ok(())
    })?;
    let hits_after = hits(&trainer)?;
    let fakes: Vec<Tensor<f32>> = test.x.iter().map(|s| trainer.translate(&s.image)).collect::<qsattn::Result<_>>()?;
    let inputs: Vec<Tensor<f32>> = test.x.iter().map(|s| s.image.clone()).collect();
    let masks: Vec<Vec<bool>> = test.x.iter().map(|s| s.mask.clone().unwrap_or_default()).collect();
    let ys: Vec<Tensor<f32>> = test.y.iter().map(|s| s.image.clone()).collect();
    let by = PatchBank::sample(&ys, DEFAULT_PATCH, 2048, 1)?;
    Ok(ToyRun {
        hits_before,
        hits_after,
        con_x,
        score_fake: domain_score(&fakes, &masks, &SYNTH_PALETTES)?,
        score_input: domain_score(&inputs, &masks, &SYNTH_PALETTES)?,
        swd_fake: swd(&PatchBank::sample(&fakes, DEFAULT_PATCH, 2048, 2)?, &by, DEFAULT_PROJECTIONS, 3)?,
        swd_input: swd(&PatchBank::sample(&inputs, DEFAULT_PATCH, 2048, 2)?, &by, DEFAULT_PROJECTIONS, 3)?,
        secs: start.elapsed().as_secs_f64(),
    })
}

fn desk_selection(run: &ToyRun) -> Outcome {
    Ok((
        run.hits_after >= MIN_HIT_RATE && run.secs < 1800.0,
        format!(
            "hit rate {:.3} after 1000 steps (>= {MIN_HIT_RATE}; {:.3} untrained), 20 test images, {:.0}s (< 1800s)",
            run.hits_after, run.hits_before, run.secs
        ),
    ))
}

fn training_sanity(run: &ToyRun) -> Outcome {
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let early = mean(&run.con_x[..10]);
    let late = mean(&run.con_x[run.con_x.len() - 50..]);
    let drop = 1.0 - late / early;
    let ok = drop >= MIN_CON_DROP
        && run.score_fake >= MIN_TRANSLATED_SCORE
        && run.score_input <= MAX_INPUT_SCORE
        && run.swd_fake < run.swd_input;
    Ok((
        ok,
        format!(
            "con_x {early:.3} -> {late:.3} ({:.0}% drop, >= {:.0}%); domain score {:.2} vs inputs {:.2}; SWD {:.4} vs inputs {:.4}",
            100.0 * drop,
            100.0 * MIN_CON_DROP,
            run.score_fake,
            run.score_input,
            run.swd_fake,
            run.swd_input
        ),
    ))
}

fn parameter_invariance() -> Outcome {
    let base = TrainConfig::toy();
    let counts = |cfg: TrainConfig| -> qsattn::Result<(usize, usize)> {
        let t = Trainer::<f32>::new(cfg)?;
        Ok((t.gen_store().count(), t.disc_store().count()))
    };
    let reference = counts(TrainConfig { qs_layers: QsLayers::None, strategy: Selector::Random, ..base.clone() })?;
    let mut all = true;
    for v in strategy_variants(base.window, base.n_queries) {
        for qs_layers in [QsLayers::LastTwo, QsLayers::None] {
            all &= counts(TrainConfig { strategy: v.strategy, routing: v.routing, qs_layers, ..base.clone() })? == reference;
        }
    }
    Ok((all, format!("G {} / D {} parameters for every strategy, routing and QS on/off", reference.0, reference.1)))
}

fn ablation_harness() -> Outcome {
    let start = Instant::now();
    let plan = AblationPlan { base: TrainConfig { synth_images: 8, ..TrainConfig::toy() }, steps: 3, test_images: 4 };
    let mut variants = strategy_variants(plan.base.window, plan.base.n_queries);
    variants.extend(query_variants());
    let (rows, _) = run_ablation(&plan, &variants, None)?;
    let finite = rows.iter().all(|r| {
        [r.last.con_x, r.last.con_y, r.last.adv, r.last.d_loss, r.swd, r.domain_score].iter().all(|v| v.is_finite())
    });
    let labels: Vec<&str> = rows.iter().map(|r| r.variant.label.as_str()).collect();
    Ok((
        finite && rows.len() == 12,
        format!("{} runs ({}) x {} steps finite, {:.0}s", rows.len(), labels.join(" "), plan.steps, start.elapsed().as_secs_f64()),
    ))
}

fn determinism() -> Outcome {
    let cfg = TrainConfig { synth_images: 4, ..TrainConfig::toy() };
    let data = UnpairedData::from_synth(&synth_pair(cfg.seed, cfg.synth_images, cfg.size)?)?;
    let run = |t: &mut Trainer<f32>, steps: u64| -> qsattn::Result<Vec<StepReport>> {
        let mut out = Vec::new();
        t.run(&data, steps, |r| {
            out.push(r.clone());
            Ok(())
        })?;
        Ok(out)
    };
    let mut a = Trainer::<f32>::new(cfg.clone())?;
    let mut b = Trainer::<f32>::new(cfg.clone())?;
    let (ra, rb) = (run(&mut a, 3)?, run(&mut b, 3)?);
    let repeat = ra.iter().zip(&rb).all(|(x, y)| x.same_values(y));

    let dir = tempfile::tempdir()?;
    let mut first = Trainer::<f32>::new(cfg)?;
    run(&mut first, 2)?;
    first.save(dir.path())?;
    let mut resumed = Trainer::<f32>::load(dir.path())?;
    let rest = run(&mut resumed, 1)?;
    let same_params = resumed.gen_store().iter().zip(a.gen_store().iter()).all(|(x, y)| x == y)
        && resumed.disc_store().iter().zip(a.disc_store().iter()).all(|(x, y)| x == y);
    let resume = rest[0].same_values(&ra[2]) && same_params;
    Ok((repeat && resume, format!("3-step reruns bitwise equal: {repeat}; save at step 2 and resume matches step 3: {resume}")))
}

fn main() {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, outcome: Outcome| {
        let (ok, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        failed += usize::from(!ok);
        println!("{} {id:>2} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    };
    report(1, "oracle equivalence", oracle_equivalence());
    report(2, "selection correctness", selection_correctness());
    report(3, "entropy bounds and conventions", entropy_conventions());
    report(4, "gradient suite and detach contract", gradient_suite());
    report(5, "closed-form loss values", closed_forms());
    match toy_run() {
        Ok(run) => {
            report(6, "selected queries land on the object", desk_selection(&run));
            report(7, "training sanity", training_sanity(&run));
        }
        Err(e) => {
            report(6, "selected queries land on the object", Err(e));
            report(7, "training sanity", Ok((false, "toy run failed".into())));
        }
    }
    report(8, "parameter-count invariance", parameter_invariance());
    report(9, "ablation harness", ablation_harness());
    report(10, "determinism and persistence", determinism());
    if failed > 0 {
        eprintln!("{failed} criteria failed");
        std::process::exit(1);
    }
}
