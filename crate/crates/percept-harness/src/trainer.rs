//! The training loop: gradient-accumulated batches over the mixed data
//! stream, AdamW with cosine/warmup schedule, stage-freezing contracts,
//! encoder-output caching (the vision encoder is frozen in both stages),
//! divergence abort, and exact checkpoint/resume.

use crate::checkpoint::{
    load_params_into, AdamSnapshot, Checkpoint, CheckpointError, RngSnapshot, RngStreams,
};
use crate::config::{Source, StageConfig};
use crate::data::{prompt_labels, stage1_sample, stage2_sample, target_instances, Corpus, Split};
use crate::sampler::MixSampler;
use crate::HarnessError;
use percept_autograd::{AdamW, Graph, Tensor};
use percept_core::RasterImage;
use percept_model::{build_prompt, DecodePhase, DenoisingConfig, EncodedImage, Model};
use percept_objective::{total_loss, LossReport};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// Distinct ChaCha streams are derived from the base seed with fixed odd
/// offsets (golden-ratio steps), so one user seed fans out deterministically.
const DATA_STREAM: u64 = 0x9E37_79B9_7F4A_7C15;
const NOISE_STREAM: u64 = 0x3C6E_F372_FE94_F82A;

/// Cached encoder outputs per image. Valid because the vision encoder is
/// frozen in every stage: stage 1 trains the connector only, stage 2 trains
/// everything except the encoder. Each training graph re-inserts the cached
/// tensors as constants, so the connector and everything above it stay on
/// the differentiation tape.
#[derive(Debug, Clone, Default)]
pub struct EncodingCache {
    map: BTreeMap<(Split, usize), CachedEncoding>,
}

#[derive(Debug, Clone)]
struct CachedEncoding {
    levels: Vec<Tensor>,
    level_sides: Vec<usize>,
    pixel: Tensor,
    pixel_side: usize,
}

impl EncodingCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts the (possibly cached) encoder outputs for an image into a
    /// graph as constants.
    pub fn nodes(
        &mut self,
        g: &mut Graph,
        model: &Model,
        split: Split,
        index: usize,
        image: &RasterImage,
    ) -> Result<EncodedImage, HarnessError> {
        if !self.map.contains_key(&(split, index)) {
            let mut scratch = Graph::new();
            let enc = model.encode_image(&mut scratch, image)?;
            self.map.insert(
                (split, index),
                CachedEncoding {
                    levels: enc.levels.iter().map(|&n| scratch.value(n).clone()).collect(),
                    level_sides: enc.level_sides.clone(),
                    pixel: scratch.value(enc.pixel).clone(),
                    pixel_side: enc.pixel_side,
                },
            );
        }
        let c = &self.map[&(split, index)];
        Ok(EncodedImage {
            levels: c.levels.iter().map(|t| g.constant(t.clone())).collect(),
            level_sides: c.level_sides.clone(),
            pixel: g.constant(c.pixel.clone()),
            pixel_side: c.pixel_side,
        })
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Drops all cached encodings (required if encoder weights ever change).
    pub fn clear(&mut self) {
        self.map.clear();
    }
}

/// Where a run currently stands: the step counter, the full loss history,
/// and the human-readable log lines.
#[derive(Debug, Clone, Default)]
pub struct RunState {
    pub step: usize,
    pub losses: Vec<f64>,
    pub log: Vec<String>,
}

/// One training stage wired to its data, model, optimizer, and streams.
pub struct TrainJob {
    pub cfg: StageConfig,
    pub model: Model,
    pub corpus: Corpus,
    pub opt: AdamW,
    pub state: RunState,
    pub cache: EncodingCache,
    sampler: MixSampler,
    data_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    trainable: Vec<bool>,
    /// Checkpoints are written here; divergence also saves its last-good
    /// state here when set.
    pub out_dir: Option<PathBuf>,
    /// Echo log lines to stdout as they happen.
    pub verbose: bool,
}

impl TrainJob {
    /// Fresh job over an existing model (stage 2 typically receives the
    /// model that finished stage 1).
    pub fn new(
        cfg: StageConfig,
        corpus: Corpus,
        model: Model,
        seed: u64,
    ) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let sampler = MixSampler::new(&cfg.mix, seed)?;
        let data_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(DATA_STREAM));
        let noise_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(NOISE_STREAM));
        let trainable = trainable_mask(&cfg, &model);
        debug_assert!(
            model
                .store
                .iter()
                .zip(&trainable)
                .all(|((_, name, _), &t)| !(t && Model::is_encoder_param(name))),
            "the encoder must stay frozen or the encoding cache is invalid"
        );
        let opt = AdamW::new(&model.store);
        Ok(Self {
            cfg,
            model,
            corpus,
            opt,
            state: RunState::default(),
            cache: EncodingCache::new(),
            sampler,
            data_rng,
            noise_rng,
            trainable,
            out_dir: None,
            verbose: false,
        })
    }

    /// Restores a job mid-run from a full checkpoint: parameters, optimizer
    /// moments, stream positions, step counter, and loss history. The
    /// continued run reproduces the uninterrupted run's losses exactly.
    pub fn resume(
        ckpt: &Checkpoint,
        cfg: StageConfig,
        corpus: Corpus,
    ) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let mut model = Model::new(ckpt.model_config.clone(), ckpt.tokenizer.clone(), 0)?;
        if !ckpt.aligns_with(&model.store) {
            return Err(CheckpointError::AdamMisaligned.into());
        }
        load_params_into(&mut model.store, &ckpt.params, |_| true)?;
        let mut opt = AdamW::new(&model.store);
        let adam = ckpt.adam.as_ref().ok_or(CheckpointError::MissingState("optimizer moments"))?;
        opt.restore(adam.m.clone(), adam.v.clone(), adam.t);
        let rngs = ckpt.rngs.as_ref().ok_or(CheckpointError::MissingState("random streams"))?;
        let sampler = MixSampler::with_rng(&cfg.mix, rngs.sampler.restore())?;
        let trainable = trainable_mask(&cfg, &model);
        Ok(Self {
            cfg,
            model,
            corpus,
            opt,
            state: RunState { step: ckpt.step as usize, losses: ckpt.losses.clone(), log: Vec::new() },
            cache: EncodingCache::new(),
            sampler,
            data_rng: rngs.data.restore(),
            noise_rng: rngs.noise.restore(),
            trainable,
            out_dir: None,
            verbose: false,
        })
    }

    /// Overwrites selected parameters from a checkpoint (by name). Used to
    /// initialize stage 2 from a stage-1 checkpoint with
    /// [`crate::checkpoint::stage_transfer_filter`].
    pub fn init_params_from(
        &mut self,
        ckpt: &Checkpoint,
        filter: impl FnMut(&str) -> bool,
    ) -> Result<usize, HarnessError> {
        let n = load_params_into(&mut self.model.store, &ckpt.params, filter)?;
        self.cache.clear(); // encoder values may have changed
        Ok(n)
    }

    /// Snapshot of the complete run state.
    pub fn checkpoint(&self) -> Checkpoint {
        let (m, v, t) = self.opt.state();
        Checkpoint {
            stage: self.cfg.stage,
            step: self.state.step as u64,
            model_config: self.model.config.clone(),
            tokenizer: self.model.tokenizer.clone(),
            params: Checkpoint::snapshot_params(&self.model.store),
            adam: Some(AdamSnapshot { m: m.to_vec(), v: v.to_vec(), t }),
            rngs: Some(RngStreams {
                sampler: RngSnapshot::capture(self.sampler.rng()),
                data: RngSnapshot::capture(&self.data_rng),
                noise: RngSnapshot::capture(&self.noise_rng),
            }),
            losses: self.state.losses.clone(),
        }
    }

    pub fn save_checkpoint(&self, tag: &str) -> Result<Option<PathBuf>, HarnessError> {
        let Some(dir) = &self.out_dir else { return Ok(None) };
        std::fs::create_dir_all(dir).map_err(HarnessError::io(format!("creating {}", dir.display())))?;
        let path = dir.join(format!("stage{}-{tag}.pchk", self.cfg.stage));
        self.checkpoint().save(&path)?;
        Ok(Some(path))
    }

    /// Runs (or continues) the stage to its configured step count.
    pub fn run(&mut self) -> Result<(), HarnessError> {
        while self.state.step < self.cfg.steps {
            self.step_once()?;
        }
        self.save_checkpoint("final")?;
        Ok(())
    }

    /// One optimizer step: `batch_size` forward/backward passes accumulated
    /// into a mean gradient, then an AdamW update at the scheduled rate.
    pub fn step_once(&mut self) -> Result<f64, HarnessError> {
        let step = self.state.step;
        let lr = self.cfg.lr_at(step);
        let mut grads: Vec<Option<Tensor>> = vec![None; self.model.store.len()];
        let mut batch_loss = 0.0;
        let mut last_report: Option<LossReport> = None;

        for _ in 0..self.cfg.batch_size {
            let Self { cfg, model, corpus, cache, sampler, data_rng, noise_rng, .. } = self;
            let (loss, report) =
                sample_pass(cfg, model, corpus, cache, sampler, data_rng, noise_rng, &mut grads)?;
            batch_loss += loss;
            if report.is_some() {
                last_report = report;
            }
        }
        let scale = 1.0 / self.cfg.batch_size as f64;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        batch_loss *= scale;

        if !batch_loss.is_finite() {
            // Parameters are still at their last good values: the optimizer
            // has not stepped yet this iteration.
            let saved = self.save_checkpoint("lastgood")?;
            return Err(HarnessError::Diverged { step, loss: batch_loss, checkpoint: saved });
        }

        self.opt.step(
            &mut self.model.store,
            &grads,
            &self.trainable,
            lr,
            self.cfg.weight_decay,
            Some(self.cfg.grad_clip),
        );
        self.state.step = step + 1;
        self.state.losses.push(batch_loss);

        if self.state.step % self.cfg.log_every == 0 || self.state.step == self.cfg.steps {
            let mut line = format!(
                "stage {} step {:>5}/{} lr {:.3e} loss {:.6}",
                self.cfg.stage, self.state.step, self.cfg.steps, lr, batch_loss
            );
            if let Some(report) = &last_report {
                line.push_str(" |");
                for name in ["llm", "word", "sent", "l1", "giou", "bce", "dice"] {
                    let v = report.sum_of(name);
                    if v != 0.0 {
                        line.push_str(&format!(" {name} {v:.4}"));
                    }
                }
            }
            if self.verbose {
                println!("{line}");
            }
            self.state.log.push(line);
        }
        if self.cfg.checkpoint_every > 0 && self.state.step % self.cfg.checkpoint_every == 0 {
            self.save_checkpoint(&format!("step{:06}", self.state.step))?;
        }
        Ok(batch_loss)
    }
}

fn trainable_mask(cfg: &StageConfig, model: &Model) -> Vec<bool> {
    model.store.iter().map(|(_, name, _)| cfg.trainable.includes(name)).collect()
}

/// One forward/backward pass; gradients are added into `grads`.
#[allow(clippy::too_many_arguments)]
fn sample_pass(
    cfg: &StageConfig,
    model: &Model,
    corpus: &Corpus,
    cache: &mut EncodingCache,
    sampler: &mut MixSampler,
    data_rng: &mut ChaCha8Rng,
    noise_rng: &mut ChaCha8Rng,
    grads: &mut [Option<Tensor>],
) -> Result<(f64, Option<LossReport>), HarnessError> {
    let mut g = Graph::new();
    let (loss_node, report) = if cfg.stage == 1 {
        let cs = stage1_sample(corpus, data_rng)?;
        let image = &corpus.image(cs.split, cs.image_index).labeled.image;
        let enc = cache.nodes(&mut g, model, cs.split, cs.image_index, image)?;
        let vis = model.connect(&mut g, &enc);
        let seq = build_prompt(
            &model.tokenizer,
            crate::data::STAGE1_TASK_DESCRIPTION,
            &[],
            Some(&cs.response),
        )?;
        let lm = model.lm_forward(&mut g, Some(vis), &seq)?;
        let loss = model.lm_loss(&mut g, &lm, &seq)?;
        // Stage 1 optimizes the next-token loss alone.
        (loss, None)
    } else {
        let source: Source = sampler.draw();
        let ts = stage2_sample(corpus, source, data_rng)?;
        let image = &corpus.image(ts.split, ts.image_index).labeled.image;
        let enc = cache.nodes(&mut g, model, ts.split, ts.image_index, image)?;
        let vis = model.connect(&mut g, &enc);
        let labels = prompt_labels(&ts);
        let seq =
            build_prompt(&model.tokenizer, &ts.sft.task_description, &labels, Some(&ts.sft.response))?;
        let lm = model.lm_forward(&mut g, Some(vis), &seq)?;
        let text = model.instruction_embeddings(&mut g, &lm, &seq, ts.granularity)?;
        let aligned = model.align_text(&mut g, text);
        let summary = model.summary_hidden(&mut g, &lm, &seq)?;
        let queries = model.build_queries(&mut g, &enc, summary, aligned, ts.include_stuff)?;
        let targets = target_instances(&ts, &labels, enc.pixel_side)?;
        let gt: Vec<_> = targets.iter().map(|t| (t.label, t.bbox)).collect();
        let dn = model.build_denoising(
            &mut g,
            &gt,
            labels.len(),
            DenoisingConfig::default(),
            noise_rng,
        )?;
        let preds = model.decode(
            &mut g,
            &enc,
            &queries,
            aligned,
            ts.granularity,
            dn.as_ref(),
            DecodePhase::Training,
        )?;
        let llm = model.lm_loss(&mut g, &lm, &seq)?;
        let sample_loss = total_loss(
            &mut g,
            &preds,
            dn.as_ref(),
            &targets,
            ts.granularity,
            Some(llm),
            &cfg.loss_weights,
        )?;
        (sample_loss.total, Some(sample_loss.report))
    };

    g.backward(loss_node);
    accumulate(grads, g.collect_param_grads(&model.store));
    Ok((g.value(loss_node).item(), report))
}

fn accumulate(acc: &mut [Option<Tensor>], fresh: Vec<Option<Tensor>>) {
    for (a, n) in acc.iter_mut().zip(fresh) {
        match (a.as_mut(), n) {
            (_, None) => {}
            (Some(a), Some(n)) => {
                for (x, y) in a.data_mut().iter_mut().zip(n.data()) {
                    *x += *y;
                }
            }
            (None, some) => *a = some,
        }
    }
}

/// Utility for the freezing tests: bitwise comparison of two parameter
/// snapshots, returning the names that differ.
pub fn changed_params(before: &[(String, Tensor)], after: &[(String, Tensor)]) -> Vec<String> {
    before
        .iter()
        .zip(after)
        .filter(|((_, a), (_, b))| {
            a.data().iter().zip(b.data()).any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .map(|((name, _), _)| name.clone())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{make_stage_configs, Scale};
    use crate::data::build_corpus;

    fn tiny_setup(stage: u8, steps: usize) -> TrainJob {
        let (mut s1, mut s2) = make_stage_configs(Scale::Desk);
        s1.image_size = 64;
        s2.image_size = 64;
        s1.steps = steps;
        s2.steps = steps;
        s1.batch_size = 2;
        s2.batch_size = 2;
        s1.log_every = steps;
        s2.log_every = steps;
        let cfg = if stage == 1 { s1 } else { s2 };
        let corpus = build_corpus(64, 3, 5).unwrap();
        let mut mc = percept_model::ModelConfig::desk();
        mc.image_side = 64;
        let model = Model::new(mc, corpus.tokenizer.clone(), 33).unwrap();
        TrainJob::new(cfg, corpus, model, 99).unwrap()
    }

    #[test]
    fn stage1_touches_only_connector_parameters() {
        let mut job = tiny_setup(1, 3);
        let before = Checkpoint::snapshot_params(&job.model.store);
        job.run().unwrap();
        let after = Checkpoint::snapshot_params(&job.model.store);
        let changed = changed_params(&before, &after);
        assert!(!changed.is_empty(), "training must move something");
        for name in &changed {
            assert!(
                Model::is_connector_param(name),
                "stage 1 changed non-connector parameter {name}"
            );
        }
        // And the connector really moved.
        assert!(changed.iter().any(|n| n.starts_with("conn.")));
    }

    #[test]
    fn stage2_freezes_exactly_the_encoder() {
        let mut job = tiny_setup(2, 2);
        let before = Checkpoint::snapshot_params(&job.model.store);
        job.run().unwrap();
        let after = Checkpoint::snapshot_params(&job.model.store);
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if Model::is_encoder_param(name) {
                assert_eq!(a.data(), b.data(), "encoder parameter {name} must stay frozen");
            }
        }
        let changed = changed_params(&before, &after);
        // Representatives from each trainable family must move.
        for family in ["conn.", "lm.", "dec.", "head."] {
            assert!(
                changed.iter().any(|n| n.starts_with(family)),
                "no parameter of family {family} moved in stage 2"
            );
        }
    }

    #[test]
    fn identical_seeds_reproduce_the_loss_sequence() {
        let mut a = tiny_setup(2, 3);
        let mut b = tiny_setup(2, 3);
        a.run().unwrap();
        b.run().unwrap();
        assert_eq!(a.state.losses.len(), 3);
        for (x, y) in a.state.losses.iter().zip(&b.state.losses) {
            assert_eq!(x.to_bits(), y.to_bits(), "same seed must give bit-identical losses");
        }
    }

    #[test]
    fn losses_are_finite_and_logged() {
        let mut job = tiny_setup(2, 2);
        job.run().unwrap();
        assert_eq!(job.state.losses.len(), 2);
        assert!(job.state.losses.iter().all(|l| l.is_finite()));
        assert!(!job.state.log.is_empty());
        let line = &job.state.log[0];
        assert!(line.contains("loss") && line.contains("lr"), "log line: {line}");
        // Stage-2 log lines itemize the loss terms.
        assert!(line.contains("llm") && line.contains("l1"), "log line: {line}");
    }

    #[test]
    fn divergence_aborts_with_last_good_state() {
        let mut job = tiny_setup(2, 2);
        let dir = std::env::temp_dir().join("percept-diverge-test");
        let _ = std::fs::remove_dir_all(&dir);
        job.out_dir = Some(dir.clone());
        // Poison one trainable parameter so the first loss is non-finite.
        let id = job.model.store.id_of("lm.head").unwrap();
        job.model.store.get_mut(id).data_mut()[0] = f64::NAN;
        let before = Checkpoint::snapshot_params(&job.model.store);
        match job.step_once() {
            Err(HarnessError::Diverged { step: 0, checkpoint: Some(path), .. }) => {
                let saved = Checkpoint::load(&path).unwrap();
                // The checkpoint holds the pre-step (last good) parameters.
                for ((name, t), (sname, s)) in before.iter().zip(&saved.params) {
                    assert_eq!(name, sname);
                    let same = t
                        .data()
                        .iter()
                        .zip(s.data())
                        .all(|(a, b)| a.to_bits() == b.to_bits());
                    assert!(same, "diverged checkpoint must hold pre-step values for {name}");
                }
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn encoder_cache_hits_after_first_pass() {
        let mut job = tiny_setup(1, 2);
        assert!(job.cache.is_empty());
        job.run().unwrap();
        let n = job.cache.len();
        assert!(n >= 1 && n <= job.corpus.align.images.len());
    }
}
