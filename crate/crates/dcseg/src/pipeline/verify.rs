//! End-to-end gradient verification: finite differences through the
//! whole network and training objective, in `f64`.

use super::train::{build_finetune_loss, FinetuneBatch, FinetuneSettings, StepMode};
use super::PipelineError;
use crate::loss::supervised_loss;
use crate::net::{build_network, NetConfig};
use crate::perturb::PerturbHyperparams;
use crate::tensor::{grad_check, Graph, Tensor};
use crate::transform::Transform;
use crate::uncertainty::ConfidenceForm;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn check_net_config() -> NetConfig {
    NetConfig {
        levels: 2,
        base_channels: 2,
        aux_decoders: 7,
        patch: 8,
        in_channels: 1,
        out_channels: 1,
    }
}

fn random_patch(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_vec(
        vec![1, 1, 8, 8, 8],
        (0..512).map(|_| rng.gen_range(lo..hi)).collect(),
    )
    .expect("patch shape")
}

fn random_binary_patch(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_vec(
        vec![1, 1, 8, 8, 8],
        (0..512).map(|_| f64::from(rng.gen::<bool>() as u8)).collect(),
    )
    .expect("patch shape")
}

/// Max relative error of the analytic gradient of the supervised
/// (Dice + cross entropy) loss through a 2-level network on an 8^3
/// patch.
pub fn check_supervised_loss_gradients(seed: u64, eps: f64) -> Result<f64, PipelineError> {
    let cfg = check_net_config();
    let net = build_network::<f64>(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let x = random_patch(&mut rng, 0.0, 1.0);
    let y = random_binary_patch(&mut rng);

    let mut g = Graph::<f64>::new();
    let bound = net.bind(&mut g);
    let xn = g.input("x", x);
    let fwd = net.forward_main(&mut g, &bound, xn)?;
    let loss = supervised_loss(&mut g, fwd.pred, &y)?;
    let report = grad_check(&mut g, loss, eps)?;
    Ok(report.max_rel_err())
}

/// Max relative error of the full training objective — supervised +
/// image consistency + uncertainty-gated feature consistency across
/// all seven perturbation kinds — through a 2-level network on an 8^3
/// patch. The step's detached artifacts (transform, masks, noise,
/// adversarial direction, reliable mask) are captured once and
/// replayed, so the differentiated loss is a pure function of the
/// parameters, exactly as the backward pass treats it.
pub fn check_total_loss_gradients(seed: u64, eps: f64) -> Result<f64, PipelineError> {
    let cfg = check_net_config();
    let mut net = build_network::<f64>(&cfg, seed)?;
    net.instantiate_aux_decoders(seed ^ 0xA0A0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xF00D);
    let batch = FinetuneBatch {
        labeled_x: random_patch(&mut rng, 0.0, 1.0),
        labeled_y: random_binary_patch(&mut rng),
        unlabeled_x: random_patch(&mut rng, 0.0, 1.0),
    };
    let settings = FinetuneSettings {
        image: true,
        feature: true,
        masked: true,
        alpha: 0.7,
        beta: 0.7,
        tau_confidence: 0.34,
        tau_consensus: 0.12,
        confidence_form: ConfidenceForm::MeanNegLog,
        stop_gradient_main: false,
        image_on_labeled: false,
    };
    let transform = Transform {
        src: [1, 2, 0],
        flip: [true, false, true],
        shift: [0; 3],
    };
    let seeds: Vec<u64> = (0..cfg.aux_decoders).map(|k| seed ^ (k as u64 * 7919)).collect();

    // Capture the artifacts at the current parameters.
    let frozen = {
        let mut g = Graph::<f64>::new();
        let bound = net.bind(&mut g);
        let (_, _, frozen) = build_finetune_loss(
            &mut g,
            &net,
            &bound,
            &batch,
            &settings,
            StepMode::Fresh {
                transform: Some(transform),
                perturb_seeds: seeds,
                hyper: PerturbHyperparams::default(),
            },
        )?;
        frozen
    };

    // Rebuild with the frozen artifacts and check the gradient.
    let mut g = Graph::<f64>::new();
    let bound = net.bind(&mut g);
    let (total, _, _) =
        build_finetune_loss(&mut g, &net, &bound, &batch, &settings, StepMode::Replay(frozen))?;
    let report = grad_check(&mut g, total, eps)?;
    Ok(report.max_rel_err())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn supervised_loss_through_the_network_matches_finite_differences() {
        let err = check_supervised_loss_gradients(2024, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn total_loss_through_the_network_matches_finite_differences() {
        let err = check_total_loss_gradients(2025, 1e-5).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }
}
