//! Trains the desk profile on synthetic data and prints the quality signals.
//!
//! `cargo run --release -p qsattn --example desk_run -- [ngf] [steps]`

use qsattn::attn::{select_queries, SelectionStrategy};
use qsattn::config::TrainConfig;
use qsattn::data::{synth_pair, UnpairedData, SYNTH_PALETTES};
use qsattn::metrics::{domain_score, downsample_mask, hit_rate, swd, PatchBank};
use qsattn::train::Trainer;
use qsattn_tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> qsattn::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().expect("integer argument")).collect();
    let ngf = args.first().copied().unwrap_or(16);
    let steps = args.get(1).copied().unwrap_or(1000) as u64;
    let cfg = TrainConfig {
        ngf,
        ndf: ngf,
        n_queries: 64,
        synth_images: 50,
        epochs: 20,
        decay_start_epoch: 10,
        ..TrainConfig::default()
    };
    let train = synth_pair(cfg.seed, cfg.synth_images, cfg.size)?;
    let test = synth_pair(cfg.seed + 1, 20, cfg.size)?;
    let data = UnpairedData::from_synth(&train)?;
    let mut trainer = Trainer::<f32>::new(cfg)?;

    let hits = |t: &Trainer<f32>| -> qsattn::Result<f64> {
        let mut total = 0.0;
        for s in &test.x {
            let f = &t.features(&s.image)?[4];
            let sel = select_queries(f, &SelectionStrategy::global(), 64, &mut ChaCha8Rng::seed_from_u64(0))?;
            let mask = downsample_mask(s.mask.as_ref().unwrap(), s.side(), f.height())?;
            total += hit_rate(&sel.indices, &mask);
        }
        Ok(total / test.x.len() as f64)
    };
    println!("initial hit rate {:.3}", hits(&trainer)?);
    let mut con = Vec::new();
    let start = std::time::Instant::now();
    trainer.run(&data, steps, |r| {
        con.push(r.con_x);
        if r.step % 100 == 0 {
            println!("{} ({:.0}s)", r.csv(), start.elapsed().as_secs_f64());
        }
        Ok(())
    })?;
    let ma = |end: usize, w: usize| con[end.saturating_sub(w)..end].iter().sum::<f64>() / w.min(end) as f64;
    println!("con_x at 10: {:.4}, 50-step mean at end: {:.4}", con[9], ma(con.len(), 50));
    println!("final hit rate {:.3}", hits(&trainer)?);
    let fakes: Vec<Tensor<f32>> = test.x.iter().map(|s| trainer.translate(&s.image)).collect::<Result<_, _>>()?;
    let masks: Vec<Vec<bool>> = test.x.iter().map(|s| s.mask.clone().unwrap()).collect();
    let inputs: Vec<Tensor<f32>> = test.x.iter().map(|s| s.image.clone()).collect();
    println!(
        "domain score translated {:.2}, inputs {:.2}",
        domain_score(&fakes, &masks, &SYNTH_PALETTES)?,
        domain_score(&inputs, &masks, &SYNTH_PALETTES)?
    );
    let ys: Vec<Tensor<f32>> = test.y.iter().map(|s| s.image.clone()).collect();
    let by = PatchBank::sample(&ys, 7, 2048, 1)?;
    println!(
        "swd translated {:.4}, inputs {:.4}",
        swd(&PatchBank::sample(&fakes, 7, 2048, 2)?, &by, 256, 3)?,
        swd(&PatchBank::sample(&inputs, 7, 2048, 2)?, &by, 256, 3)?
    );
    Ok(())
}
