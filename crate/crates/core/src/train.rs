//! Alternating adversarial/contrastive training, learning-rate schedule and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use qsattn_tensor::{load_checkpoint, save_checkpoint, Scalar, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attn::{Domain, FeatureMap};
use crate::config::{GanMode, TrainConfig, UpdateOrder};
use crate::contrast::{identity_branch, PatchNce, ProjectionHead};
use crate::data::UnpairedData;
use crate::error::{QsError, Result};
use crate::nets::{Discriminator, Generator};
use crate::params::{Adam, Bound, ParamStore};

pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "log.csv";
pub const LATEST_CHECKPOINT: &str = "checkpoint";

/// Learning rate of `epoch`: constant, then linear decay reaching 0 at `epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(QsError::config(format!("epoch {epoch} is past the last epoch {}", cfg.epochs)));
    }
    if cfg.decay_start_epoch == 0 || cfg.decay_start_epoch > cfg.epochs {
        return Err(QsError::config("decay_start_epoch must lie in 1..=epochs"));
    }
    if epoch < cfg.decay_start_epoch {
        return Ok(cfg.lr);
    }
    let span = (cfg.epochs - cfg.decay_start_epoch) as f64;
    if span == 0.0 {
        return Ok(0.0);
    }
    Ok(cfg.lr * (1.0 - (epoch - cfg.decay_start_epoch) as f64 / span))
}

/// Losses and schedule state of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub epoch: usize,
    pub step: u64,
    pub adv: f64,
    pub con_x: f64,
    pub con_y: f64,
    pub g_total: f64,
    pub d_loss: f64,
    pub lr: f64,
    pub wall_secs: f64,
}

impl StepReport {
    pub const CSV_HEADER: &'static str = "epoch,step,adv,con_x,con_y,g_total,d_loss,lr,wall_secs";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{:.4}",
            self.epoch, self.step, self.adv, self.con_x, self.con_y, self.g_total, self.d_loss, self.lr, self.wall_secs
        )
    }

    /// Bitwise equality of everything except wall time.
    pub fn same_values(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.step == other.step
            && [self.adv, self.con_x, self.con_y, self.g_total, self.d_loss, self.lr]
                .iter()
                .zip([other.adv, other.con_x, other.con_y, other.g_total, other.d_loss, other.lr])
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Generator-objective terms recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorTerms {
    pub fake: Var,
    pub con_x: Var,
    pub con_y: Var,
}

/// Generator, projection heads, discriminator and both optimizers.
#[derive(Clone, Debug)]
pub struct Trainer<T: Scalar = f32> {
    cfg: TrainConfig,
    nce: PatchNce,
    gen: ParamStore<T>,
    disc: ParamStore<T>,
    generator: Generator,
    head: ProjectionHead,
    discriminator: Discriminator,
    g_opt: Adam<T>,
    d_opt: Adam<T>,
    step: u64,
}

fn finite(term: &'static str, step: u64, value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(QsError::NonFinite {
            term,
            step,
            detail: format!("value {value}"),
        })
    }
}

fn gan_target<T: Scalar>(tape: &mut Tape<T>, logits: Var, real: bool, mode: GanMode) -> Var {
    match mode {
        GanMode::LeastSquares => {
            let d = if real { tape.add_scalar(logits, -T::one()) } else { logits };
            let sq = tape.square(d);
            tape.mean(sq)
        }
        GanMode::NonSaturatingLog => {
            // −log σ(d) = softplus(−d), −log(1 − σ(d)) = softplus(d)
            let d = if real { tape.scale(logits, -T::one()) } else { logits };
            let sp = tape.softplus(d);
            tape.mean(sp)
        }
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let nce = cfg.patch_nce()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut gen = ParamStore::new();
        let generator = Generator::new(&mut gen, cfg.generator(), &mut rng)?;
        let head = ProjectionHead::new(&mut gen, &ProjectionHead::tap_channels(cfg.ngf), &mut rng);
        let mut disc = ParamStore::new();
        let discriminator = Discriminator::new(&mut disc, cfg.discriminator(), &mut rng)?;
        let g_opt = Adam::new(&gen, cfg.adam_beta1, cfg.adam_beta2);
        let d_opt = Adam::new(&disc, cfg.adam_beta1, cfg.adam_beta2);
        Ok(Trainer {
            cfg,
            nce,
            gen,
            disc,
            generator,
            head,
            discriminator,
            g_opt,
            d_opt,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn head(&self) -> &ProjectionHead {
        &self.head
    }

    pub fn patch_nce(&self) -> &PatchNce {
        &self.nce
    }

    /// Generator and projection-head parameters.
    pub fn gen_store(&self) -> &ParamStore<T> {
        &self.gen
    }

    pub fn gen_store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.gen
    }

    pub fn disc_store(&self) -> &ParamStore<T> {
        &self.disc
    }

    pub fn disc_store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.disc
    }

    /// The random stream of iteration `step`.
    pub fn step_rng(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(step);
        rng
    }

    /// Records the discriminator objective for a real and a fake image.
    pub fn discriminator_loss(&self, tape: &mut Tape<T>, bound: &Bound, real: Var, fake: Var) -> Result<Var> {
        let d_real = self.discriminator.forward(tape, bound, real)?;
        let d_fake = self.discriminator.forward(tape, bound, fake)?;
        let lr = gan_target(tape, d_real, true, self.cfg.gan_mode);
        let lf = gan_target(tape, d_fake, false, self.cfg.gan_mode);
        let sum = tape.add(lr, lf)?;
        Ok(tape.scale(sum, T::lit(0.5)))
    }

    /// Generator's adversarial term for a fake image, judged by `bound`'s discriminator.
    pub fn adversarial_term(&self, tape: &mut Tape<T>, bound: &Bound, fake: Var) -> Result<Var> {
        let d_fake = self.discriminator.forward(tape, bound, fake)?;
        Ok(gan_target(tape, d_fake, true, self.cfg.gan_mode))
    }

    /// Translates `x` and records both contrastive terms.
    pub fn generator_terms(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        y: Var,
        rng: &mut ChaCha8Rng,
    ) -> Result<GeneratorTerms> {
        let (fake, con_x) = self.nce.branch(tape, bound, &self.generator, &self.head, x, rng)?;
        let con_y = identity_branch(tape, bound, &self.generator, &self.head, &self.nce, y, rng)?;
        Ok(GeneratorTerms { fake, con_x, con_y })
    }

    /// One discriminator update against a detached fake. Returns the loss before the update.
    pub fn discriminator_step(&mut self, y: &Tensor<T>, fake: &Tensor<T>, lr: f64) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.disc.bind(&mut tape, true);
        let real = tape.constant(y.clone());
        let fake = tape.constant(fake.clone());
        let loss = self.discriminator_loss(&mut tape, &bound, real, fake)?;
        let value = finite("discriminator loss", self.step, tape.value(loss).item().as_f64())?;
        let grads = tape.backward(loss)?;
        let grads = bound.gradients(&self.disc, &grads);
        self.d_opt.update(&mut self.disc, &grads, lr);
        Ok(value)
    }

    /// One full iteration on a source image `x` and an unrelated target image `y`.
    pub fn train_step(&mut self, x: &Tensor<T>, y: &Tensor<T>, epoch: usize, rng: &mut ChaCha8Rng) -> Result<StepReport> {
        let start = Instant::now();
        let lr = lr_at(epoch, &self.cfg)?;
        let mut tape = Tape::new();
        let g_bound = self.gen.bind(&mut tape, true);
        let xv = tape.constant(x.clone());
        let yv = tape.constant(y.clone());
        let terms = self.generator_terms(&mut tape, &g_bound, xv, yv, rng)?;
        let fake = tape.value(terms.fake).clone();

        let mut d_loss = None;
        if self.cfg.update_order == UpdateOrder::DThenG {
            d_loss = Some(self.discriminator_step(y, &fake, lr)?);
        }
        let d_bound = self.disc.bind(&mut tape, false);
        let adv = self.adversarial_term(&mut tape, &d_bound, terms.fake)?;
        let w = self.cfg.weights;
        let parts = [(adv, w.adv), (terms.con_x, w.con_x), (terms.con_y, w.con_y)];
        let mut total = tape.scale(parts[0].0, T::lit(parts[0].1));
        for &(v, wt) in &parts[1..] {
            let s = tape.scale(v, T::lit(wt));
            total = tape.add(total, s)?;
        }
        let step = self.step;
        let adv_v = finite("adversarial loss", step, tape.value(adv).item().as_f64())?;
        let con_x = finite("contrastive loss (translation)", step, tape.value(terms.con_x).item().as_f64())?;
        let con_y = finite("contrastive loss (identity)", step, tape.value(terms.con_y).item().as_f64())?;
        let g_total = finite("generator loss", step, tape.value(total).item().as_f64())?;
        let grads = tape.backward(total)?;
        let grads = g_bound.gradients(&self.gen, &grads);
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(QsError::NonFinite {
                term: "generator gradient",
                step,
                detail: format!("parameter {}", self.gen.iter().nth(bad).map(|p| p.0).unwrap_or("?")),
            });
        }
        self.g_opt.update(&mut self.gen, &grads, lr);
        let d_loss = match d_loss {
            Some(d) => d,
            None => self.discriminator_step(y, &fake, lr)?,
        };
        self.step += 1;
        Ok(StepReport {
            epoch,
            step,
            adv: adv_v,
            con_x,
            con_y,
            g_total,
            d_loss,
            lr,
            wall_secs: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs `steps` further iterations over `data`, continuing from the current step.
    pub fn run(&mut self, data: &UnpairedData, steps: u64, mut on_report: impl FnMut(&StepReport) -> Result<()>) -> Result<()> {
        let len = data.epoch_len() as u64;
        let mut order: Option<(usize, Vec<usize>)> = None;
        for _ in 0..steps {
            let s = self.step;
            let epoch = (s / len) as usize;
            if order.as_ref().map(|o| o.0) != Some(epoch) {
                order = Some((epoch, data.epoch_order(self.cfg.seed, epoch)));
            }
            let xi = order.as_ref().expect("order set").1[(s % len) as usize];
            let mut rng = self.step_rng(s);
            let yi = data.pick_y(&mut rng);
            let x = data.x[xi].cast::<T>();
            let y = data.y[yi].cast::<T>();
            let report = self.train_step(&x, &y, epoch.min(self.cfg.epochs - 1), &mut rng)?;
            on_report(&report)?;
        }
        Ok(())
    }

    /// Generator output for one image.
    pub fn translate(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let bound = self.gen.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (y, _) = self.generator.forward(&mut tape, &bound, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Encoder features of one image at every tap.
    pub fn features(&self, x: &Tensor<T>) -> Result<Vec<FeatureMap<T>>> {
        let mut tape = Tape::new();
        let bound = self.gen.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let taps = self.generator.encode(&mut tape, &bound, xv)?;
        taps.taps
            .iter()
            .enumerate()
            .map(|(l, &t)| FeatureMap::from_chw(tape.value(t), l, Domain::SourceReal))
            .collect()
    }

    /// Writes parameters, optimizer moments, counters and configuration to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let counters = |v: u64| Tensor::<T>::new(vec![2], vec![T::lit((v >> 24) as f64), T::lit((v & 0xFF_FFFF) as f64)]);
        let step = counters(self.step)?;
        let g_steps = counters(self.g_opt.steps_taken())?;
        let d_steps = counters(self.d_opt.steps_taken())?;
        let mut entries: Vec<(String, &Tensor<T>)> = vec![
            ("state.step".into(), &step),
            ("state.gen_adam_steps".into(), &g_steps),
            ("state.disc_adam_steps".into(), &d_steps),
        ];
        for (prefix, store, opt) in [("gen", &self.gen, &self.g_opt), ("disc", &self.disc, &self.d_opt)] {
            for (name, t) in store.iter() {
                entries.push((name.to_string(), t));
            }
            for (name, m, v) in opt.state(store) {
                entries.push((format!("adam.{prefix}.m.{name}"), m));
                entries.push((format!("adam.{prefix}.v.{name}"), v));
            }
        }
        save_checkpoint(dir, &entries)?;
        fs::write(dir.join(CONFIG_FILE), self.cfg.to_string())?;
        Ok(())
    }

    /// Restores a trainer written by [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = TrainConfig::from_file(&dir.join(CONFIG_FILE))?;
        let mut trainer = Self::new(cfg)?;
        let tensors: std::collections::HashMap<String, Tensor<f32>> = load_checkpoint(dir)?.into_iter().collect();
        let get = |name: &str| -> Result<Tensor<T>> {
            tensors
                .get(name)
                .map(|t| t.cast::<T>())
                .ok_or_else(|| QsError::Tensor(qsattn_tensor::TensorError::Checkpoint(format!("missing tensor {name}"))))
        };
        let counter = |name: &str| -> Result<u64> {
            let t = get(name)?;
            match t.data() {
                [hi, lo] => Ok(((hi.as_f64() as u64) << 24) | lo.as_f64() as u64),
                _ => Err(QsError::config(format!("malformed counter {name}"))),
            }
        };
        trainer.step = counter("state.step")?;
        let restore = |store: &mut ParamStore<T>, opt: &mut Adam<T>, prefix: &str, steps: u64| -> Result<()> {
            let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
            let (mut m, mut v) = (Vec::new(), Vec::new());
            for name in &names {
                let id = store.id(name).expect("registered name");
                store.set(id, get(name)?)?;
                m.push(get(&format!("adam.{prefix}.m.{name}"))?);
                v.push(get(&format!("adam.{prefix}.v.{name}"))?);
            }
            opt.restore(steps, m, v)
        };
        let (g_steps, d_steps) = (counter("state.gen_adam_steps")?, counter("state.disc_adam_steps")?);
        restore(&mut trainer.gen, &mut trainer.g_opt, "gen", g_steps)?;
        restore(&mut trainer.disc, &mut trainer.d_opt, "disc", d_steps)?;
        Ok(trainer)
    }
}

/// Trains for every configured epoch, writing the configuration, a CSV step
/// log and checkpoints under `out_dir`.
pub fn train(cfg: TrainConfig, data: &UnpairedData, out_dir: &Path) -> Result<Trainer<f32>> {
    let mut trainer = Trainer::<f32>::new(cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(CONFIG_FILE), trainer.cfg.to_string())?;
    let mut log = fs::File::create(out_dir.join(LOG_FILE))?;
    writeln!(log, "{}", StepReport::CSV_HEADER)?;
    let len = data.epoch_len() as u64;
    let every = trainer.cfg.checkpoint_every;
    for epoch in 0..trainer.cfg.epochs {
        trainer.run(data, len, |r| {
            writeln!(log, "{}", r.csv())?;
            Ok(())
        })?;
        log::info!("epoch {} done, lr {:.3e}", epoch + 1, lr_at(epoch, &trainer.cfg)?);
        if every > 0 && (epoch + 1) % every == 0 {
            trainer.save(&out_dir.join(format!("epoch_{:04}", epoch + 1)))?;
        }
    }
    trainer.save(&out_dir.join(LATEST_CHECKPOINT))?;
    Ok(trainer)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(epochs: usize, decay: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            decay_start_epoch: decay,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn learning_rate_schedule() {
        let cfg = sched(400, 200);
        assert_eq!(lr_at(0, &cfg).unwrap(), 2e-4);
        assert_eq!(lr_at(199, &cfg).unwrap(), 2e-4);
        assert!((lr_at(300, &cfg).unwrap() - 1e-4).abs() < 1e-18);
        assert!((lr_at(399, &cfg).unwrap() - 1e-6).abs() < 1e-18);
        assert_eq!(lr_at(400, &cfg).unwrap(), 0.0);
        assert_eq!(lr_at(200, &cfg).unwrap(), 2e-4);
        assert!(lr_at(401, &cfg).is_err());
    }

    #[test]
    fn counters_round_trip_through_checkpoint() {
        let mut cfg = TrainConfig::toy();
        cfg.size = 32;
        cfg.ngf = 2;
        cfg.ndf = 2;
        cfg.n_queries = 8;
        let mut t = Trainer::<f32>::new(cfg).unwrap();
        t.step = (1 << 30) + 12345;
        let dir = tempfile::tempdir().unwrap();
        t.save(dir.path()).unwrap();
        assert_eq!(Trainer::<f32>::load(dir.path()).unwrap().step, (1 << 30) + 12345);
    }

    #[test]
    fn constant_discriminator_losses() {
        let mut cfg = TrainConfig::toy();
        cfg.size = 32;
        cfg.ngf = 2;
        cfg.ndf = 2;
        cfg.n_queries = 8;
        let t = Trainer::<f64>::new(cfg).unwrap();
        let mut tape = Tape::new();
        let zero = tape.constant(Tensor::zeros(vec![1, 6, 6]));
        let one = tape.constant(Tensor::full(vec![1, 6, 6], 1.0));
        let lr = gan_target(&mut tape, zero, true, GanMode::LeastSquares);
        let lf = gan_target(&mut tape, zero, false, GanMode::LeastSquares);
        assert_eq!(0.5 * (tape.value(lr).item() + tape.value(lf).item()), 0.5);
        let lr = gan_target(&mut tape, one, true, GanMode::LeastSquares);
        let lf = gan_target(&mut tape, zero, false, GanMode::LeastSquares);
        assert_eq!(0.5 * (tape.value(lr).item() + tape.value(lf).item()), 0.0);
        let ln = gan_target(&mut tape, zero, true, GanMode::NonSaturatingLog);
        assert!((tape.value(ln).item() - 2f64.ln()).abs() < 1e-15);
        drop(t);
    }
}
