//! The hybrid-objective trainer: masked generative loss over response
//! tokens, in-batch InfoNCE over pooled embeddings, one AdamW step per
//! batch.
//!
//! Everything random is derived from `(seed, step)`, so training is a pure
//! function of its inputs and resuming from a checkpoint replays the exact
//! stream.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::vocab::{TokenId, EMB, TAG_CLOSE, TAG_OPEN};
use crate::model::{
    checkpoint, extract_embedding, forward, Binding, ModelState, PoolingStrategy, VisualInput,
};
use crate::numerics::{
    adamw_step, grad_check_sampled, AdPrecision, AdamWHyper, CosineSchedule, DiffFn, Element,
    OptimizerState, Tape, Tensor, Var,
};
use crate::synth::{tokenize_query, DatasetRecord, Item, World, CANDIDATE_PROMPT};

use super::batch::TaskAwareSampler;
use super::config::{CandidateMode, ResponseVariant, TrainConfig};
use super::TrainError;

/// One fully materialized training row: teacher-forced query sequence with
/// its supervision mask, plus the candidate sequence. No randomness remains.
#[derive(Debug, Clone)]
pub struct PreparedRow {
    pub full_ids: Vec<TokenId>,
    pub visual: Option<VisualInput>,
    pub targets: Vec<usize>,
    pub mask: Vec<bool>,
    pub cand_ids: Vec<TokenId>,
    pub cand_visual: VisualInput,
}

/// Build the response token sequence for a record under a component variant.
/// Complex responses vary; direct samples always answer with the bare
/// terminator. Under tag-close pooling the text part is wrapped in structure
/// tags (an empty pair when there is no text) so the pooled position exists
/// for every row.
pub fn response_tokens(
    record: &DatasetRecord,
    variant: ResponseVariant,
    pooling: PoolingStrategy,
    vocab: &crate::model::TokenVocab,
) -> Result<Vec<TokenId>, TrainError> {
    let text = if record.z == 1 {
        match variant {
            ResponseVariant::Full => record.trace.clone(),
            ResponseVariant::ReasoningOnly => match record.trace.rfind(" ; tgt ") {
                Some(pos) => record.trace[..pos].to_string(),
                None => record.trace.clone(),
            },
            ResponseVariant::AnswerOnly => record.answer_text.clone(),
            ResponseVariant::Direct => String::new(),
        }
    } else {
        String::new()
    };
    let mut ids = Vec::new();
    if pooling == PoolingStrategy::TagClose {
        ids.push(TAG_OPEN);
        ids.extend(vocab.encode(&text)?);
        ids.push(TAG_CLOSE);
    } else {
        ids.extend(vocab.encode(&text)?);
    }
    ids.push(EMB);
    Ok(ids)
}

/// Candidate sequence under a candidate mode. `jitter` is the pre-drawn
/// filler padding for the variable-length mode.
pub fn candidate_tokens(
    item: &Item,
    mode: CandidateMode,
    pooling: PoolingStrategy,
    jitter: &[TokenId],
    vocab: &crate::model::TokenVocab,
) -> Result<(Vec<TokenId>, VisualInput), TrainError> {
    let text = match mode {
        CandidateMode::Raw => String::new(),
        CandidateMode::Answer | CandidateMode::FullCot => item.triple.description(),
    };
    let mut ids = Vec::new();
    if mode == CandidateMode::Raw {
        ids.extend(vocab.encode(CANDIDATE_PROMPT)?);
    }
    if pooling == PoolingStrategy::TagClose {
        ids.push(TAG_OPEN);
        ids.extend(vocab.encode(&text)?);
        if mode == CandidateMode::FullCot {
            ids.extend_from_slice(jitter);
        }
        ids.push(TAG_CLOSE);
    } else {
        ids.extend(vocab.encode(&text)?);
        if mode == CandidateMode::FullCot {
            ids.extend_from_slice(jitter);
        }
    }
    ids.push(EMB);
    let visual = VisualInput::prepended(vec![item.visual_feature.clone()]);
    Ok((ids, visual))
}

/// Max filler tokens appended in the variable-length candidate mode.
pub const CANDIDATE_JITTER_MAX: usize = 40;

fn draw_jitter<R: Rng>(rng: &mut R, vocab: &crate::model::TokenVocab) -> Vec<TokenId> {
    let filler_ids: Vec<TokenId> = crate::model::vocab::FILLER_WORDS
        .iter()
        .map(|w| vocab.id(w).expect("filler words are in the core vocab"))
        .collect();
    let len = rng.random_range(0..=CANDIDATE_JITTER_MAX);
    (0..len)
        .map(|_| filler_ids[rng.random_range(0..filler_ids.len())])
        .collect()
}

/// Materialize one record into a training row.
pub fn prepare_row(
    record: &DatasetRecord,
    world: &World,
    cfg: &TrainConfig,
    vocab: &crate::model::TokenVocab,
    jitter_rng: &mut ChaCha8Rng,
) -> Result<PreparedRow, TrainError> {
    let query = tokenize_query(record, vocab)?;
    let response = response_tokens(record, cfg.response_variant, cfg.pooling, vocab)?;
    let mut full_ids = query.ids.clone();
    let response_start = full_ids.len();
    full_ids.extend_from_slice(&response);

    let n_vis = query.visual.as_ref().map_or(0, |v| v.vectors.len());
    let n_rows = full_ids.len() + n_vis;
    // token i sits at row i + n_vis (visual is always prepended)
    let mut targets = vec![0usize; n_rows];
    let mut mask = vec![false; n_rows];
    for ti in response_start..full_ids.len() {
        let row = ti + n_vis;
        targets[row - 1] = full_ids[ti] as usize;
        mask[row - 1] = true;
    }

    let item = world.item(record.target_id).ok_or_else(|| {
        TrainError::Config(format!("target {} missing from world", record.target_id))
    })?;
    let jitter = if cfg.candidate_mode == CandidateMode::FullCot {
        draw_jitter(jitter_rng, vocab)
    } else {
        Vec::new()
    };
    let (cand_ids, cand_visual) =
        candidate_tokens(item, cfg.candidate_mode, cfg.pooling, &jitter, vocab)?;
    Ok(PreparedRow {
        full_ids,
        visual: query.visual,
        targets,
        mask,
        cand_ids,
        cand_visual,
    })
}

pub struct LossVars {
    pub total: Var,
    pub gen: Var,
    pub ret: Var,
}

/// Assemble the joint loss graph for a prepared batch on an existing tape.
/// Candidate sequences contribute to the contrastive term only; generative
/// supervision is query-side by construction.
pub fn build_joint_loss<E: Element>(
    tape: &mut Tape<E>,
    binding: &Binding,
    model: &ModelState,
    rows: &[PreparedRow],
    cfg: &TrainConfig,
) -> Result<LossVars, TrainError> {
    if rows.len() < 2 {
        return Err(TrainError::BatchSize(
            "joint loss needs at least 2 rows for in-batch negatives".into(),
        ));
    }
    let mut per_row_ce: Vec<(Var, usize)> = Vec::with_capacity(rows.len());
    let mut query_embs = Vec::with_capacity(rows.len());
    let mut cand_embs = Vec::with_capacity(rows.len());
    for row in rows {
        let fwd = forward(tape, binding, model, &row.full_ids, row.visual.as_ref())?;
        let n_supervised = row.mask.iter().filter(|&&m| m).count();
        let ce = tape.cross_entropy_masked(fwd.logits, &row.targets, &row.mask)?;
        per_row_ce.push((ce, n_supervised));
        query_embs.push(extract_embedding(tape, &fwd, &row.full_ids, cfg.pooling)?);

        let cfwd = forward(tape, binding, model, &row.cand_ids, Some(&row.cand_visual))?;
        cand_embs.push(extract_embedding(tape, &cfwd, &row.cand_ids, cfg.pooling)?);
    }

    // batch generative loss: mean over all supervised positions
    let total_supervised: usize = per_row_ce.iter().map(|(_, c)| c).sum();
    let mut gen: Option<Var> = None;
    for (ce, count) in per_row_ce {
        let w = E::from_f64_lossy(count as f64 / total_supervised as f64);
        let weighted = tape.scale(ce, w)?;
        gen = Some(match gen {
            None => weighted,
            Some(acc) => tape.add(acc, weighted)?,
        });
    }
    let gen = gen.expect("at least two rows");

    let eq = tape.concat_rows(&query_embs)?;
    let ec = tape.concat_rows(&cand_embs)?;
    let sims = tape.matmul_nt(eq, ec)?;
    let scaled = tape.scale(sims, E::from_f64_lossy(1.0 / cfg.tau_temp))?;
    let diag: Vec<usize> = (0..rows.len()).collect();
    let all = vec![true; rows.len()];
    let ret = tape.cross_entropy_masked(scaled, &diag, &all)?;

    let gen_w = tape.scale(gen, E::from_f64_lossy(cfg.lambda_gen))?;
    let ret_w = tape.scale(ret, E::from_f64_lossy(cfg.lambda_ret))?;
    let total = tape.add(gen_w, ret_w)?;
    Ok(LossVars { total, gen, ret })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub step: u64,
    pub loss_total: f64,
    pub loss_gen: f64,
    pub loss_ret: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: ModelState,
    pub opt: OptimizerState,
    pub cfg: TrainConfig,
    pub dataset: Vec<DatasetRecord>,
    pub world: World,
    sampler: TaskAwareSampler,
    hyper: AdamWHyper,
}

impl Trainer {
    pub fn new(
        mut model: ModelState,
        cfg: TrainConfig,
        dataset: Vec<DatasetRecord>,
        world: World,
    ) -> Result<Self, TrainError> {
        cfg.validate()?;
        if let Some(adapter) = &cfg.adapter {
            if model.adapter.is_none() {
                model
                    .lora_wrap(adapter.clone(), cfg.seed)
                    .map_err(|e| TrainError::Config(e.to_string()))?;
            }
        }
        let sampler = TaskAwareSampler::new(&dataset, &cfg.mix, cfg.batch_size, cfg.seed)?;
        let schedule = CosineSchedule {
            base_lr: cfg.base_lr,
            warmup_steps: cfg.warmup_steps,
            total_steps: cfg.total_steps,
            min_lr: cfg.min_lr,
        };
        let hyper = AdamWHyper {
            weight_decay: cfg.weight_decay,
            ..AdamWHyper::default()
        };
        Ok(Self {
            model,
            opt: OptimizerState::new(schedule),
            cfg,
            dataset,
            world,
            sampler,
            hyper,
        })
    }

    /// Restore a trainer mid-run from a checkpoint with optimizer state.
    pub fn resume(
        path: &Path,
        cfg: TrainConfig,
        dataset: Vec<DatasetRecord>,
        world: World,
    ) -> Result<Self, TrainError> {
        let (model, opt) = checkpoint::load(path).map_err(|e| TrainError::Config(e.to_string()))?;
        let opt = opt.ok_or_else(|| {
            TrainError::Config("checkpoint has no optimizer state; cannot resume".into())
        })?;
        let sampler = TaskAwareSampler::new(&dataset, &cfg.mix, cfg.batch_size, cfg.seed)?;
        let hyper = AdamWHyper {
            weight_decay: cfg.weight_decay,
            ..AdamWHyper::default()
        };
        Ok(Self {
            model,
            opt,
            cfg,
            dataset,
            world,
            sampler,
            hyper,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        checkpoint::save(&self.model, Some(&self.opt), path)
            .map_err(|e| TrainError::Config(e.to_string()))
    }

    /// Rows for the upcoming step, fully materialized.
    pub fn prepare_step(&self) -> Result<Vec<PreparedRow>, TrainError> {
        let step = self.opt.step_count;
        let batch = self.sampler.batch_at(&self.dataset, step)?;
        let mut jitter_rng =
            ChaCha8Rng::seed_from_u64(self.cfg.seed ^ step.wrapping_mul(0xd1b5_4a32_d192_ed03));
        batch
            .rows
            .iter()
            .map(|&i| {
                prepare_row(
                    &self.dataset[i],
                    &self.world,
                    &self.cfg,
                    &self.model.config.vocab,
                    &mut jitter_rng,
                )
            })
            .collect()
    }

    /// Forward, backward, and one optimizer update on the given rows.
    pub fn apply_rows(&mut self, rows: &[PreparedRow]) -> Result<StepStats, TrainError> {
        let step = self.opt.step_count;
        let mut tape = Tape::<f32>::new();
        let binding = Binding::bind(&mut tape, &self.model, true);
        let losses = build_joint_loss(&mut tape, &binding, &self.model, rows, &self.cfg)?;
        let loss_total = tape.value(losses.total).data[0] as f64;
        let loss_gen = tape.value(losses.gen).data[0] as f64;
        let loss_ret = tape.value(losses.ret).data[0] as f64;
        if !loss_total.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                loss_gen,
                loss_ret,
            });
        }
        tape.backward(losses.total)?;

        let mut grads: BTreeMap<String, Vec<f32>> = BTreeMap::new();
        let mut sq_sum = 0.0f64;
        for (name, var) in binding.names() {
            if self.model.is_frozen(name) {
                debug_assert!(tape.grad(var).is_none(), "frozen '{name}' accumulated grad");
                continue;
            }
            if let Some(g) = tape.grad(var) {
                sq_sum += g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>();
                grads.insert(name.clone(), g.to_vec());
            }
        }
        let lr = adamw_step(&mut self.model.params, &grads, &mut self.opt, &self.hyper)?;
        Ok(StepStats {
            step,
            loss_total,
            loss_gen,
            loss_ret,
            lr,
            grad_norm: sq_sum.sqrt(),
        })
    }

    pub fn step(&mut self) -> Result<StepStats, TrainError> {
        let rows = self.prepare_step()?;
        self.apply_rows(&rows)
    }

    /// Run to `total_steps`, appending one metrics row per step.
    pub fn run(&mut self, metrics_path: Option<&Path>) -> Result<(), TrainError> {
        let mut writer = match metrics_path {
            None => None,
            Some(p) => {
                let fresh = !p.exists();
                let file = std::fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(p)?;
                let mut w = csv::WriterBuilder::new()
                    .has_headers(false)
                    .from_writer(file);
                if fresh {
                    w.write_record(["step", "loss_total", "loss_gen", "loss_ret", "lr", "grad_norm"])?;
                }
                Some(w)
            }
        };
        while self.opt.step_count < self.cfg.total_steps {
            let s = self.step()?;
            if let Some(w) = writer.as_mut() {
                w.write_record([
                    s.step.to_string(),
                    format!("{:.6}", s.loss_total),
                    format!("{:.6}", s.loss_gen),
                    format!("{:.6}", s.loss_ret),
                    format!("{:.6e}", s.lr),
                    format!("{:.6}", s.grad_norm),
                ])?;
            }
            if s.step % self.cfg.log_every == 0 {
                log::info!(
                    "step {} loss {:.4} (gen {:.4}, ret {:.4}) lr {:.2e} |g| {:.3}",
                    s.step,
                    s.loss_total,
                    s.loss_gen,
                    s.loss_ret,
                    s.lr,
                    s.grad_norm
                );
            }
        }
        if let Some(w) = writer.as_mut() {
            w.flush()?;
        }
        Ok(())
    }
}

/// The full training objective as a checkable differentiable function of the
/// trainable parameters. Frozen parameters are bound as constants.
pub struct JointLossFn {
    model: ModelState,
    rows: Vec<PreparedRow>,
    cfg: TrainConfig,
    trainable: Vec<String>,
}

impl JointLossFn {
    pub fn new(model: ModelState, rows: Vec<PreparedRow>, cfg: TrainConfig) -> Self {
        let trainable = model
            .params
            .keys()
            .filter(|n| !model.is_frozen(n))
            .cloned()
            .collect();
        Self {
            model,
            rows,
            cfg,
            trainable,
        }
    }

    /// Current trainable parameter values as the gradient-check point.
    pub fn point(&self) -> Vec<Tensor<f64>> {
        self.trainable
            .iter()
            .map(|n| {
                let p = &self.model.params[n];
                Tensor::from_f64(
                    p.shape.clone(),
                    &p.data.iter().map(|&x| x as f64).collect::<Vec<_>>(),
                )
                .expect("consistent shapes")
            })
            .collect()
    }

    /// Verify the reverse-mode gradient of the whole objective against
    /// central finite differences on `n_coords` random coordinates.
    pub fn check<R: Rng>(
        &self,
        precision: AdPrecision,
        epsilon: f64,
        n_coords: usize,
        rng: &mut R,
    ) -> Result<f64, TrainError> {
        Ok(grad_check_sampled(
            self,
            &self.point(),
            epsilon,
            precision,
            n_coords,
            rng,
        )?)
    }
}

impl DiffFn for JointLossFn {
    fn build<E: Element>(
        &self,
        tape: &mut Tape<E>,
        inputs: &[Var],
    ) -> crate::numerics::Result<Var> {
        let mut vars = BTreeMap::new();
        for (name, &var) in self.trainable.iter().zip(inputs.iter()) {
            vars.insert(name.clone(), var);
        }
        for (name, p) in &self.model.params {
            if vars.contains_key(name) {
                continue;
            }
            let t = Tensor::<E>::from_f64(
                p.shape.clone(),
                &p.data.iter().map(|&x| x as f64).collect::<Vec<_>>(),
            )?;
            vars.insert(name.clone(), tape.leaf(t, false));
        }
        let binding = Binding::from_vars(vars);
        build_joint_loss(tape, &binding, &self.model, &self.rows, &self.cfg)
            .map(|l| l.total)
            .map_err(|e| crate::numerics::NumericsError::Invalid(e.to_string()))
    }
}
