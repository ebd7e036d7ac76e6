//! Sliding-window inference: cover the volume with patch-sized
//! windows, average overlapping main-decoder probabilities, threshold
//! at 0.5. Auxiliary decoders never run here.

use super::PipelineError;
use crate::io::{sliding_positions, Volume};
use crate::io::{extract_patch, OverlapAccumulator};
use crate::metrics::BinaryMask;
use crate::net::Network;
use crate::tensor::{Element, Graph, Tensor};
use rayon::prelude::*;

/// Probability map plus the thresholded mask for one volume.
pub fn infer<E: Element>(
    net: &Network<E>,
    volume: &Volume,
    stride: usize,
) -> Result<(Volume, BinaryMask), PipelineError> {
    let patch = net.cfg.patch;
    if volume.dims.iter().any(|&d| d < patch) {
        return Err(PipelineError::Config(format!(
            "volume dims {:?} are smaller than the {patch}^3 patch; pad the volume to at least the patch size",
            volume.dims
        )));
    }
    let positions = sliding_positions(volume.dims, [patch; 3], stride)?;

    // Each window runs on its own graph; results are folded in a fixed
    // position order so the assembly is deterministic.
    let predictions: Vec<(usize, Result<Vec<f32>, PipelineError>)> = positions
        .par_iter()
        .enumerate()
        .map(|(i, &corner)| {
            let run = || -> Result<Vec<f32>, PipelineError> {
                let data = extract_patch(volume, corner, [patch; 3]);
                let mut g = Graph::<E>::new();
                let bound = net.bind_frozen(&mut g);
                let x = g.input(
                    "x",
                    Tensor::from_vec(
                        vec![1, 1, patch, patch, patch],
                        data.iter().map(|&v| E::from_f64(v as f64)).collect(),
                    )
                    .expect("patch shape"),
                );
                let fwd = net.forward_main(&mut g, &bound, x)?;
                Ok(g.value(fwd.pred)
                    .data()
                    .iter()
                    .map(|v| v.to_f64() as f32)
                    .collect())
            };
            (i, run())
        })
        .collect();

    let mut acc = OverlapAccumulator::new(volume.dims, volume.spacing);
    let mut ordered: Vec<Option<Vec<f32>>> = vec![None; positions.len()];
    for (i, r) in predictions {
        ordered[i] = Some(r?);
    }
    for (i, &corner) in positions.iter().enumerate() {
        let patch_pred = ordered[i].take().expect("every window predicted");
        acc.add_patch(corner, [patch; 3], &patch_pred);
    }
    let probs = acc.finish();
    let mask = BinaryMask::from_probabilities(probs.dims, probs.spacing_f64(), &probs.data);
    Ok((probs, mask))
}

/// Sliding-window inference that additionally assembles confidence and
/// consensus uncertainty volumes from the perturbed auxiliary decoders
/// (the same construction the training mask uses). Requires the
/// checkpoint to carry auxiliary decoders.
pub fn infer_with_uncertainty<E: Element>(
    net: &Network<E>,
    volume: &Volume,
    stride: usize,
    hyper: &crate::perturb::PerturbHyperparams,
    form: crate::uncertainty::ConfidenceForm,
    seed: u64,
) -> Result<UncertaintyInference, PipelineError> {
    use crate::perturb::{perturb, PerturbContext, PerturbationKind};
    use crate::tensor::NodeId;
    use crate::uncertainty::uncertainty_pair;

    if !net.has_aux_decoders() {
        return Err(PipelineError::Config(
            "uncertainty maps need a checkpoint with auxiliary decoders (a finetuned one)".into(),
        ));
    }
    let patch = net.cfg.patch;
    if volume.dims.iter().any(|&d| d < patch) {
        return Err(PipelineError::Config(format!(
            "volume dims {:?} are smaller than the {patch}^3 patch; pad the volume to at least the patch size",
            volume.dims
        )));
    }
    let positions = sliding_positions(volume.dims, [patch; 3], stride)?;
    let mut prob_acc = OverlapAccumulator::new(volume.dims, volume.spacing);
    let mut conf_acc = OverlapAccumulator::new(volume.dims, volume.spacing);
    let mut cons_acc = OverlapAccumulator::new(volume.dims, volume.spacing);

    for (i, &corner) in positions.iter().enumerate() {
        let data = extract_patch(volume, corner, [patch; 3]);
        let mut g = Graph::<E>::new();
        let bound = net.bind_frozen(&mut g);
        let x = g.input(
            "x",
            Tensor::from_vec(
                vec![1, 1, patch, patch, patch],
                data.iter().map(|&v| E::from_f64(v as f64)).collect(),
            )
            .expect("patch shape"),
        );
        let fwd = net.forward_main(&mut g, &bound, x)?;
        let p: Vec<f64> = g.value(fwd.pred).data().iter().map(|v| v.to_f64()).collect();
        let skip_values: Vec<Tensor<E>> = fwd.skips.iter().map(|&s| g.value(s).clone()).collect();

        let mut q_vals: Vec<Vec<f64>> = Vec::with_capacity(net.cfg.aux_decoders);
        for k in 0..net.cfg.aux_decoders {
            let ctx = PerturbContext {
                main_pred: &p,
                pred_spatial: [patch; 3],
                params: hyper,
                seed: seed ^ ((i as u64) << 8) ^ k as u64,
            };
            let net_ref = net;
            let skips_ref = &skip_values;
            let mut dec = move |g2: &mut Graph<E>, feat: NodeId| {
                let frozen = net_ref.bind_frozen(g2);
                let skips: Vec<NodeId> = skips_ref.iter().map(|s| g2.constant(s.clone())).collect();
                net_ref.forward_aux(g2, &frozen, k, feat, &skips)
            };
            let out = perturb(
                PerturbationKind::for_decoder(k),
                &mut g,
                fwd.bottleneck,
                &ctx,
                Some(&mut dec),
            )?;
            let q = net.forward_aux(&mut g, &bound, k, out.node, &fwd.skips)?;
            q_vals.push(g.value(q).data().iter().map(|v| v.to_f64()).collect());
        }
        let q_refs: Vec<&[f64]> = q_vals.iter().map(|v| v.as_slice()).collect();
        let pair = uncertainty_pair(&p, &q_refs, form)?;

        let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        prob_acc.add_patch(corner, [patch; 3], &to_f32(&p));
        conf_acc.add_patch(corner, [patch; 3], &to_f32(&pair.confidence));
        cons_acc.add_patch(corner, [patch; 3], &to_f32(&pair.consensus));
    }
    let probabilities = prob_acc.finish();
    let mask = BinaryMask::from_probabilities(
        probabilities.dims,
        probabilities.spacing_f64(),
        &probabilities.data,
    );
    Ok(UncertaintyInference {
        mask,
        confidence: conf_acc.finish(),
        consensus: cons_acc.finish(),
        probabilities,
    })
}

pub struct UncertaintyInference {
    pub probabilities: Volume,
    pub mask: BinaryMask,
    pub confidence: Volume,
    pub consensus: Volume,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{build_network, NetConfig};

    fn small_net(seed: u64) -> Network<f32> {
        build_network(
            &NetConfig {
                levels: 2,
                base_channels: 2,
                aux_decoders: 2,
                patch: 8,
                in_channels: 1,
                out_channels: 1,
            },
            seed,
        )
        .unwrap()
    }

    #[test]
    fn volume_equal_to_patch_is_one_forward_pass() {
        let net = small_net(1);
        let v = Volume::filled([8, 8, 8], 0.3);
        let (probs, mask) = infer(&net, &v, 8).unwrap();
        assert_eq!(probs.dims, [8, 8, 8]);
        assert_eq!(mask.dims, [8, 8, 8]);
        assert!(probs.data.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn undersized_volume_suggests_padding() {
        let net = small_net(1);
        let v = Volume::filled([4, 8, 8], 0.0);
        match infer(&net, &v, 4) {
            Err(PipelineError::Config(msg)) => assert!(msg.contains("pad")),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn overlap_averaging_is_deterministic() {
        let net = small_net(5);
        let data: Vec<f32> = (0..16 * 16 * 16).map(|i| (i as f32 * 0.01).sin()).collect();
        let v = Volume::new([16, 16, 16], data);
        let (a, _) = infer(&net, &v, 4).unwrap();
        let (b, _) = infer(&net, &v, 4).unwrap();
        assert!(a
            .data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn deleting_aux_decoders_leaves_inference_bit_identical() {
        let mut net = small_net(9);
        net.instantiate_aux_decoders(10);
        let data: Vec<f32> = (0..12 * 12 * 12).map(|i| (i as f32 * 0.02).cos()).collect();
        let v = Volume::new([12, 12, 12], data);
        let (with_aux, _) = infer(&net, &v, 4).unwrap();
        net.strip_aux_decoders();
        let (without_aux, _) = infer(&net, &v, 4).unwrap();
        assert!(with_aux
            .data
            .iter()
            .zip(&without_aux.data)
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn uncertainty_inference_produces_bounded_maps() {
        let mut net = small_net(11);
        net.instantiate_aux_decoders(12);
        let v = Volume::filled([8, 8, 8], 0.4);
        let out = infer_with_uncertainty(
            &net,
            &v,
            8,
            &crate::perturb::PerturbHyperparams::default(),
            crate::uncertainty::ConfidenceForm::MeanNegLog,
            5,
        )
        .unwrap();
        assert_eq!(out.confidence.dims, [8, 8, 8]);
        assert!(out
            .confidence
            .data
            .iter()
            .all(|&u| (0.0..=0.368).contains(&u)));
        assert!(out.consensus.data.iter().all(|&u| (0.0..=0.5).contains(&u)));
        // Main-path probabilities are unaffected by the aux machinery.
        let (plain, _) = infer(&net, &v, 8).unwrap();
        assert_eq!(plain.data, out.probabilities.data);
    }

    #[test]
    fn uncertainty_inference_requires_aux_decoders() {
        let net = small_net(13);
        let v = Volume::filled([8, 8, 8], 0.1);
        assert!(infer_with_uncertainty(
            &net,
            &v,
            8,
            &crate::perturb::PerturbHyperparams::default(),
            crate::uncertainty::ConfidenceForm::MeanNegLog,
            1,
        )
        .is_err());
    }
}
