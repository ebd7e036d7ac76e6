//! Two-phase training.
//!
//! Phase 1 fits the encoder and main decoder on labeled patches with
//! the supervised loss. Phase 2 adds the auxiliary decoders (when
//! feature consistency is enabled) and optimizes the weighted total:
//! supervised + ramped image consistency + ramped, uncertainty-gated
//! feature consistency. Validation DSC after each epoch drives best
//! checkpoints and early stopping; every random draw comes from one
//! seeded stream whose position is checkpointed, so a resumed run
//! continues bit-identically.

use super::checkpoint::{BestRecord, Checkpoint, RngState, TrainCounters};
use super::config::{ConsistencyConfig, RunConfig};
use super::data::{sample_labeled_patch, sample_unlabeled_patch, Dataset};
use super::infer::infer;
use super::optim::Adam;
use super::PipelineError;
use crate::loss::{
    feature_consistency_loss, image_consistency_loss, masked_feature_consistency_loss,
    ramp_weight, supervised_loss, total_loss, LossReport,
};
use crate::metrics::dice;
use crate::net::{build_network, BoundParams, Network};
use crate::perturb::{
    apply_frozen, perturb, AppliedPerturbation, PerturbContext, PerturbHyperparams,
    PerturbationKind,
};
use crate::tensor::{Dims5, Element, Graph, NodeId, Tensor};
use crate::transform::{sample_transform, Transform};
use crate::uncertainty::{reliable_mask, uncertainty_pair, ConfidenceForm, ReliableMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::Path;

/// Inputs of one finetuning step.
#[derive(Debug, Clone)]
pub struct FinetuneBatch<E: Element> {
    pub labeled_x: Tensor<E>,
    pub labeled_y: Tensor<E>,
    pub unlabeled_x: Tensor<E>,
}

/// Loss-shape settings for one step (derived from the run config).
#[derive(Debug, Clone, Copy)]
pub struct FinetuneSettings {
    pub image: bool,
    pub feature: bool,
    pub masked: bool,
    pub alpha: f64,
    pub beta: f64,
    pub tau_confidence: f64,
    pub tau_consensus: f64,
    pub confidence_form: ConfidenceForm,
    pub stop_gradient_main: bool,
    pub image_on_labeled: bool,
}

impl FinetuneSettings {
    pub fn from_config(c: &ConsistencyConfig, alpha: f64, beta: f64) -> Self {
        FinetuneSettings {
            image: c.image,
            feature: c.feature,
            masked: c.masked,
            alpha,
            beta,
            tau_confidence: c.tau_confidence,
            tau_consensus: c.tau_consensus,
            confidence_form: if c.binary_entropy_confidence {
                ConfidenceForm::BinaryEntropy
            } else {
                ConfidenceForm::MeanNegLog
            },
            stop_gradient_main: c.stop_gradient_main,
            image_on_labeled: c.image_on_labeled,
        }
    }
}

/// Every detached artifact a finetune step drew: replaying them on a
/// rebuilt graph reproduces the same loss as a pure function of the
/// parameters (finite-difference checks rely on this).
#[derive(Debug, Clone)]
pub struct FrozenStep<E: Element> {
    pub transform: Option<Transform>,
    pub perturbations: Vec<FrozenPerturbation<E>>,
    pub omega: Option<ReliableMask>,
}

#[derive(Debug, Clone)]
pub struct FrozenPerturbation<E: Element> {
    pub kind: PerturbationKind,
    pub applied: AppliedPerturbation<E>,
    pub skip_loss: bool,
    pub zero_gradient: bool,
}

/// How the step's detached artifacts are obtained.
pub enum StepMode<E: Element> {
    /// Draw transform/masks/noise/adversarial directions fresh.
    Fresh {
        transform: Option<Transform>,
        perturb_seeds: Vec<u64>,
        hyper: PerturbHyperparams,
    },
    /// Re-apply previously captured artifacts.
    Replay(FrozenStep<E>),
}

fn transform_input_tensor<E: Element>(x: &Tensor<E>, t: &Transform) -> Tensor<E> {
    let d = Dims5::from_shape(x.shape()).expect("5-D input");
    let sp = d.spatial_len();
    let mut out = Vec::with_capacity(x.numel());
    let mut scratch = Vec::new();
    for grp in 0..d.n * d.c {
        t.apply_slice(d.spatial(), &x.data()[grp * sp..(grp + 1) * sp], &mut scratch);
        out.extend_from_slice(&scratch);
    }
    let os = t.out_dims(d.spatial());
    Tensor::from_vec(vec![d.n, d.c, os[0], os[1], os[2]], out).expect("permutation keeps length")
}

/// Build the full finetuning objective on `g`. Returns the total-loss
/// node, the per-term report, and the captured artifacts.
pub fn build_finetune_loss<E: Element>(
    g: &mut Graph<E>,
    net: &Network<E>,
    bound: &BoundParams,
    batch: &FinetuneBatch<E>,
    settings: &FinetuneSettings,
    mode: StepMode<E>,
) -> Result<(NodeId, LossReport, FrozenStep<E>), PipelineError> {
    let xl = g.input("labeled_x", batch.labeled_x.clone());
    let fwd_l = net.forward_main(g, bound, xl)?;
    let l_s = supervised_loss(g, fwd_l.pred, &batch.labeled_y)?;

    let mut report = LossReport {
        supervised: Some(g.scalar_value(l_s)?),
        alpha: settings.alpha,
        beta: settings.beta,
        ..LossReport::default()
    };
    let mut frozen = FrozenStep {
        transform: None,
        perturbations: Vec::new(),
        omega: None,
    };

    let needs_unlabeled = settings.image || settings.feature;
    let mut l_ic: Option<NodeId> = None;
    let mut l_ufc: Option<NodeId> = None;

    if needs_unlabeled {
        let xu = g.input("unlabeled_x", batch.unlabeled_x.clone());
        let fwd_u = net.forward_main(g, bound, xu)?;
        let cons_main = if settings.stop_gradient_main {
            let detached = g.value(fwd_u.pred).clone();
            g.constant(detached)
        } else {
            fwd_u.pred
        };

        if settings.image {
            let t = match &mode {
                StepMode::Fresh { transform, .. } => transform
                    .ok_or_else(|| PipelineError::Train("image consistency enabled but no transform drawn".into()))?,
                StepMode::Replay(f) => f.transform.ok_or_else(|| {
                    PipelineError::Train("replayed step carries no transform".into())
                })?,
            };
            let xt = g.input("unlabeled_xt", transform_input_tensor(&batch.unlabeled_x, &t));
            let fwd_t = net.forward_main(g, bound, xt)?;
            let mut ic = image_consistency_loss(g, cons_main, fwd_t.pred, &t)?;
            if settings.image_on_labeled {
                let xlt = g.input("labeled_xt", transform_input_tensor(&batch.labeled_x, &t));
                let fwd_lt = net.forward_main(g, bound, xlt)?;
                let main_l = if settings.stop_gradient_main {
                    let detached = g.value(fwd_l.pred).clone();
                    g.constant(detached)
                } else {
                    fwd_l.pred
                };
                let ic_l = image_consistency_loss(g, main_l, fwd_lt.pred, &t)?;
                let both = g.add(ic, ic_l)?;
                ic = g.scalar_mul(both, 0.5)?;
            }
            frozen.transform = Some(t);
            report.image_consistency = Some(g.scalar_value(ic)?);
            l_ic = Some(ic);
        }

        if settings.feature {
            let k_total = net.cfg.aux_decoders;
            let p_detached: Vec<f64> =
                g.value(fwd_u.pred).data().iter().map(|v| v.to_f64()).collect();
            let pred_dims = Dims5::from_shape(g.shape(fwd_u.pred)).expect("prediction is 5-D");
            let skip_values: Vec<Tensor<E>> =
                fwd_u.skips.iter().map(|&s| g.value(s).clone()).collect();

            let mut q_nodes = Vec::with_capacity(k_total);
            for k in 0..k_total {
                let kind = PerturbationKind::for_decoder(k);
                let (z_tilde, applied, skip_loss, zero_gradient) = match &mode {
                    StepMode::Fresh {
                        perturb_seeds,
                        hyper,
                        ..
                    } => {
                        let ctx = PerturbContext {
                            main_pred: &p_detached,
                            pred_spatial: pred_dims.spatial(),
                            params: hyper,
                            seed: *perturb_seeds.get(k).ok_or_else(|| {
                                PipelineError::Train(format!(
                                    "missing perturbation seed for decoder {k}"
                                ))
                            })?,
                        };
                        let net_ref = net;
                        let skips_ref = &skip_values;
                        let mut dec = move |g2: &mut Graph<E>, feat: NodeId| {
                            let frozen_params = net_ref.bind_frozen(g2);
                            let skips: Vec<NodeId> = skips_ref
                                .iter()
                                .map(|s| g2.constant(s.clone()))
                                .collect();
                            net_ref.forward_aux(g2, &frozen_params, k, feat, &skips)
                        };
                        let out = perturb(kind, g, fwd_u.bottleneck, &ctx, Some(&mut dec))?;
                        (out.node, out.applied, out.skip_loss, out.zero_gradient)
                    }
                    StepMode::Replay(f) => {
                        let fp = f.perturbations.get(k).ok_or_else(|| {
                            PipelineError::Train(format!("replayed step lacks perturbation {k}"))
                        })?;
                        let node = apply_frozen(g, fwd_u.bottleneck, &fp.applied)?;
                        (node, fp.applied.clone(), fp.skip_loss, fp.zero_gradient)
                    }
                };
                let q = net.forward_aux(g, bound, k, z_tilde, &fwd_u.skips)?;
                q_nodes.push(q);
                frozen.perturbations.push(FrozenPerturbation {
                    kind,
                    applied,
                    skip_loss,
                    zero_gradient,
                });
            }

            let omega = match &mode {
                StepMode::Replay(f) => f
                    .omega
                    .clone()
                    .ok_or_else(|| PipelineError::Train("replayed step lacks a mask".into()))?,
                StepMode::Fresh { .. } => {
                    if settings.masked {
                        let q_vals: Vec<Vec<f64>> = q_nodes
                            .iter()
                            .map(|&q| g.value(q).data().iter().map(|v| v.to_f64()).collect())
                            .collect();
                        let q_refs: Vec<&[f64]> = q_vals.iter().map(|v| v.as_slice()).collect();
                        let pair =
                            uncertainty_pair(&p_detached, &q_refs, settings.confidence_form)?;
                        reliable_mask(
                            &pair.confidence,
                            &pair.consensus,
                            settings.tau_confidence,
                            settings.tau_consensus,
                        )?
                    } else {
                        ReliableMask {
                            mask: vec![true; p_detached.len()],
                            tau_confidence: f64::INFINITY,
                            tau_consensus: f64::INFINITY,
                        }
                    }
                }
            };

            let included: Vec<NodeId> = q_nodes
                .iter()
                .zip(&frozen.perturbations)
                .filter_map(|(&q, fp)| (!fp.skip_loss).then_some(q))
                .collect();
            if included.is_empty() {
                let zero = g.constant(Tensor::scalar(E::ZERO));
                report.masked_feature_consistency = Some(0.0);
                report.empty_mask = true;
                l_ufc = Some(zero);
            } else {
                let (ufc, info) =
                    masked_feature_consistency_loss(g, cons_main, &included, &omega)?;
                let fc_diag = feature_consistency_loss(g, cons_main, &included)?;
                report.masked_feature_consistency = Some(g.scalar_value(ufc)?);
                report.feature_consistency_unmasked = Some(g.scalar_value(fc_diag)?);
                report.reliable_fraction = Some(info.fraction);
                report.empty_mask = info.empty_mask;
                l_ufc = Some(ufc);
            }
            frozen.omega = Some(omega);
        }
    }

    let total = total_loss(g, Some(l_s), l_ic, l_ufc, settings.alpha, settings.beta)?;
    report.total = g.scalar_value(total)?;
    Ok((total, report, frozen))
}

/// Collect gradients per parameter name after a backward pass.
pub fn collect_gradients<E: Element>(
    g: &Graph<E>,
    bound: &BoundParams,
) -> BTreeMap<String, Tensor<E>> {
    let mut grads = BTreeMap::new();
    for (name, node) in bound.iter() {
        if let Some(grad) = g.grad(*node) {
            grads.insert(name.clone(), grad.clone());
        }
    }
    grads
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<E: Element> {
    /// Checkpoint at the best validation DSC.
    pub best: Checkpoint<E>,
    pub final_checkpoint: Checkpoint<E>,
    pub best_val_dsc: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub log: Vec<String>,
}

pub fn train<E: Element>(
    cfg: &RunConfig,
    data: &Dataset,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<E>, PipelineError> {
    cfg.validate()?;
    let net = build_network::<E>(&cfg.net, seed)?;
    let trainer = Trainer::fresh(cfg, data, seed, net)?;
    trainer.run(out_dir)
}

/// Continue a run from a checkpoint; the next step is bit-identical to
/// what the uninterrupted run would have computed.
pub fn resume<E: Element>(
    cfg: &RunConfig,
    data: &Dataset,
    ckpt: Checkpoint<E>,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<E>, PipelineError> {
    cfg.validate()?;
    let trainer = Trainer::from_checkpoint(cfg, data, ckpt)?;
    trainer.run(out_dir)
}

struct Trainer<'a, E: Element> {
    cfg: &'a RunConfig,
    data: &'a Dataset,
    net: Network<E>,
    adam: Adam<E>,
    rng: ChaCha8Rng,
    counters: TrainCounters,
    best: Option<BestRecord>,
    best_params: Option<crate::net::ParamStore<E>>,
    best_significant: f64,
    log: Vec<String>,
}

impl<'a, E: Element> Trainer<'a, E> {
    fn fresh(
        cfg: &'a RunConfig,
        data: &'a Dataset,
        seed: u64,
        net: Network<E>,
    ) -> Result<Self, PipelineError> {
        let mut log = Vec::new();
        log.push("# dcseg run log".to_string());
        log.push(format!("# seed {seed}"));
        for line in cfg.to_toml_string().lines() {
            log.push(format!("# {line}"));
        }
        Ok(Trainer {
            cfg,
            data,
            net,
            adam: Adam::new(cfg.optim),
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: TrainCounters {
                phase: 1,
                ..TrainCounters::default()
            },
            best: None,
            best_params: None,
            best_significant: f64::NEG_INFINITY,
            log,
        })
    }

    fn from_checkpoint(
        cfg: &'a RunConfig,
        data: &'a Dataset,
        ckpt: Checkpoint<E>,
    ) -> Result<Self, PipelineError> {
        let net = Network::from_params(ckpt.net_cfg, ckpt.params)?;
        let mut adam = Adam::new(cfg.optim);
        adam.restore_states(ckpt.moments);
        let mut rng = ChaCha8Rng::from_seed(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        let mut log = Vec::new();
        log.push("# dcseg run log (resumed)".to_string());
        Ok(Trainer {
            cfg,
            data,
            net,
            adam,
            rng,
            counters: ckpt.counters,
            best: ckpt.best,
            best_params: None,
            best_significant: ckpt.best.map(|b| b.val_dsc).unwrap_or(f64::NEG_INFINITY),
            log,
        })
    }

    fn checkpoint(&self) -> Checkpoint<E> {
        Checkpoint {
            net_cfg: self.net.cfg,
            params: self.net.params().clone(),
            moments: self.adam.states().clone(),
            counters: self.counters,
            best: self.best,
            rng: RngState {
                seed: self.rng.get_seed(),
                word_pos: self.rng.get_word_pos(),
                stream: self.rng.get_stream(),
            },
        }
    }

    fn run(mut self, out_dir: Option<&Path>) -> Result<TrainOutcome<E>, PipelineError> {
        let sched = self.cfg.schedule;
        let total_epochs = (sched.pretrain_epochs + sched.finetune_epochs) as u64;
        let mut stopped_early = false;

        while self.counters.epoch < sched.pretrain_epochs as u64 {
            self.train_epoch(false)?;
            self.validate_epoch()?;
        }

        if self.counters.phase == 1 {
            self.counters.phase = 2;
            if self.cfg.consistency.feature {
                // Auxiliary decoders exist only from the finetuning
                // phase on; fresh random initializations.
                let aux_seed = self.rng.gen::<u64>();
                self.net.instantiate_aux_decoders(aux_seed);
            }
            self.log.push(format!(
                "# phase 2 begins at epoch {} (aux decoders: {})",
                self.counters.epoch,
                self.net.has_aux_decoders()
            ));
        }

        while self.counters.epoch < total_epochs {
            self.train_epoch(true)?;
            let stop = self.validate_epoch()?;
            if stop {
                stopped_early = true;
                self.log.push(format!(
                    "# early stop at epoch {} after {} stagnant epochs",
                    self.counters.epoch, self.counters.stagnation_epochs
                ));
                break;
            }
        }

        let final_checkpoint = self.checkpoint();
        let best_params = self.best_params.clone().unwrap_or_else(|| {
            // No validation improvement was ever recorded (tiny runs);
            // fall back to the final parameters.
            self.net.params().clone()
        });
        let best = Checkpoint {
            params: best_params,
            ..self.checkpoint()
        };
        let outcome = TrainOutcome {
            best_val_dsc: self.best.map(|b| b.val_dsc).unwrap_or(f64::NAN),
            best,
            final_checkpoint,
            epochs_run: self.counters.epoch as usize,
            stopped_early,
            log: self.log,
        };
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)
                .map_err(|e| PipelineError::Train(format!("{}: {e}", dir.display())))?;
            std::fs::write(dir.join("run.log"), outcome.log.join("\n") + "\n")
                .map_err(|e| PipelineError::Train(e.to_string()))?;
            super::checkpoint::save_checkpoint(dir.join("best.dckp"), &outcome.best)?;
            super::checkpoint::save_checkpoint(dir.join("final.dckp"), &outcome.final_checkpoint)?;
        }
        Ok(outcome)
    }

    fn train_epoch(&mut self, finetune: bool) -> Result<(), PipelineError> {
        let lr = self.cfg.optim.lr_at_epoch(self.counters.epoch as usize);
        for _ in 0..self.cfg.schedule.steps_per_epoch {
            if finetune {
                self.finetune_step(lr)?;
            } else {
                self.pretrain_step(lr)?;
            }
            self.counters.global_step += 1;
        }
        self.counters.epoch += 1;
        Ok(())
    }

    fn sample_labeled_batch(&mut self) -> Result<(Tensor<E>, Tensor<E>), PipelineError> {
        let patch = self.cfg.net.patch;
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..self.cfg.batch.labeled {
            let idx = self.rng.gen_range(0..self.data.labeled.len());
            let (x, y) = sample_labeled_patch::<E>(
                &self.data.labeled[idx],
                patch,
                self.cfg.batch.lesion_bias,
                &mut self.rng,
            )?;
            xs.push(x);
            ys.push(y);
        }
        Ok((stack_batch(xs), stack_batch(ys)))
    }

    fn sample_unlabeled_batch(&mut self) -> Result<Tensor<E>, PipelineError> {
        let patch = self.cfg.net.patch;
        let pool = if self.data.unlabeled.is_empty() {
            &self.data.labeled
        } else {
            &self.data.unlabeled
        };
        let mut xs = Vec::new();
        for _ in 0..self.cfg.batch.unlabeled.max(1) {
            let idx = self.rng.gen_range(0..pool.len());
            xs.push(sample_unlabeled_patch::<E>(&pool[idx], patch, &mut self.rng)?);
        }
        Ok(stack_batch(xs))
    }

    fn pretrain_step(&mut self, lr: f64) -> Result<(), PipelineError> {
        let (x, y) = self.sample_labeled_batch()?;
        let mut g = Graph::<E>::new();
        let bound = self.net.bind(&mut g);
        let xn = g.input("x", x);
        let fwd = self.net.forward_main(&mut g, &bound, xn)?;
        let loss = supervised_loss(&mut g, fwd.pred, &y)?;
        g.backward(loss)?;
        let grads = collect_gradients(&g, &bound);
        self.adam.step(self.net.params_mut(), &grads, lr);
        let value = g.scalar_value(loss)?;
        self.log.push(format!(
            "step={} phase=1 lr={} l_s={} total={}",
            self.counters.global_step, lr, value, value
        ));
        Ok(())
    }

    fn finetune_step(&mut self, lr: f64) -> Result<(), PipelineError> {
        let ramp = ramp_weight(
            self.counters.finetune_step as usize,
            self.cfg.schedule.ramp_length(),
        )?;
        let settings = FinetuneSettings::from_config(&self.cfg.consistency, ramp, ramp);

        let (labeled_x, labeled_y) = self.sample_labeled_batch()?;
        let needs_unlabeled = settings.image || settings.feature;
        let unlabeled_x = if needs_unlabeled {
            self.sample_unlabeled_batch()?
        } else {
            Tensor::zeros(labeled_x.shape())
        };
        let batch = FinetuneBatch {
            labeled_x,
            labeled_y,
            unlabeled_x,
        };

        let transform = if settings.image {
            Some(sample_transform(
                &mut self.rng,
                &self.cfg.transforms.to_pool(),
            )?)
        } else {
            None
        };
        let perturb_seeds: Vec<u64> = if settings.feature {
            (0..self.net.cfg.aux_decoders)
                .map(|_| self.rng.gen::<u64>())
                .collect()
        } else {
            Vec::new()
        };

        let mut g = Graph::<E>::new();
        let bound = self.net.bind(&mut g);
        let (total, report, _frozen) = build_finetune_loss(
            &mut g,
            &self.net,
            &bound,
            &batch,
            &settings,
            StepMode::Fresh {
                transform,
                perturb_seeds,
                hyper: self.cfg.perturb,
            },
        )?;
        g.backward(total)?;
        let grads = collect_gradients(&g, &bound);
        self.adam.step(self.net.params_mut(), &grads, lr);

        let mut line = format!(
            "step={} phase=2 lr={} l_s={}",
            self.counters.global_step,
            lr,
            report.supervised.unwrap_or(0.0)
        );
        if let Some(ic) = report.image_consistency {
            line.push_str(&format!(" l_ic={ic} alpha={}", report.alpha));
        }
        if settings.feature {
            if let Some(fc) = report.feature_consistency_unmasked {
                line.push_str(&format!(" l_fc={fc}"));
            }
            line.push_str(&format!(
                " l_ufc={} beta={}",
                report.masked_feature_consistency.unwrap_or(0.0),
                report.beta
            ));
            if let Some(frac) = report.reliable_fraction {
                line.push_str(&format!(" omega={frac}"));
            }
            if report.empty_mask {
                line.push_str(" empty_mask=1");
            }
        }
        line.push_str(&format!(" total={}", report.total));
        self.log.push(line);
        self.counters.finetune_step += 1;
        Ok(())
    }

    /// Sliding-window validation DSC (main decoder only). Returns true
    /// when early stopping should trigger.
    fn validate_epoch(&mut self) -> Result<bool, PipelineError> {
        let stride = self.cfg.schedule.eval_stride;
        let mut total = 0.0;
        for case in &self.data.val {
            let gt = case.label.as_ref().ok_or_else(|| {
                PipelineError::Config(format!("validation case {} has no label", case.name))
            })?;
            let (_, pred) = infer(&self.net, &case.image, stride)?;
            total += dice(&pred, gt)?;
        }
        let val_dsc = total / self.data.val.len() as f64;

        let improved = self.best.map(|b| val_dsc > b.val_dsc).unwrap_or(true);
        if improved {
            self.best = Some(BestRecord {
                val_dsc,
                epoch: self.counters.epoch,
            });
            self.best_params = Some(self.net.params().clone());
        }
        let significant = val_dsc > self.best_significant + self.cfg.schedule.min_improvement;
        if significant {
            self.best_significant = val_dsc;
            self.counters.stagnation_epochs = 0;
        } else {
            self.counters.stagnation_epochs += 1;
        }
        self.log.push(format!(
            "epoch={} phase={} val_dsc={} best={} stagnation={}",
            self.counters.epoch,
            self.counters.phase,
            val_dsc,
            self.best.map(|b| b.val_dsc).unwrap_or(f64::NAN),
            self.counters.stagnation_epochs
        ));
        Ok(self.counters.phase == 2
            && self.counters.stagnation_epochs >= self.cfg.schedule.patience as u64)
    }
}

fn stack_batch<E: Element>(tensors: Vec<Tensor<E>>) -> Tensor<E> {
    debug_assert!(!tensors.is_empty());
    if tensors.len() == 1 {
        return tensors.into_iter().next().expect("nonempty");
    }
    let mut shape = tensors[0].shape().to_vec();
    shape[0] = tensors.iter().map(|t| t.shape()[0]).sum();
    let mut data = Vec::with_capacity(shape.iter().product());
    for t in &tensors {
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(shape, data).expect("stacked batch shape")
}

/// Convenience for evaluating a stored checkpoint: rebuild the network
/// it describes.
pub fn network_from_checkpoint<E: Element>(
    ckpt: &Checkpoint<E>,
) -> Result<Network<E>, PipelineError> {
    Ok(Network::from_params(ckpt.net_cfg, ckpt.params.clone())?)
}
