//! How close the Fisher block of a layer is to diagonal, before and after
//! rotating that layer.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fim::{estimate_full_fim_layer, FimMode};
use crate::linalg::{diag_energy_ratio, Matrix};
use crate::nn::{Activations, Network};
use crate::rotation::{accumulate_correlations_at, rotate_layers, GradientLabels};

/// Diagonal energy of one layer's Fisher block in both bases.
#[derive(Clone, Debug)]
pub struct EnergyComparison {
    /// Plain index of the layer.
    pub layer: usize,
    pub before: Matrix,
    pub after: Matrix,
    pub ratio_before: f64,
    pub ratio_after: f64,
}

impl EnergyComparison {
    pub fn summary(&self) -> EnergySummary {
        EnergySummary {
            layer: self.layer,
            params: self.before.rows(),
            ratio_before: self.ratio_before,
            ratio_after: self.ratio_after,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergySummary {
    pub layer: usize,
    pub params: usize,
    pub ratio_before: f64,
    pub ratio_after: f64,
}

/// Compares the full Fisher block of weight layer `layer` of a plain network
/// with the block of the same layer once only it is rotated.
///
/// The rotation statistics and both Fisher estimates use the same inputs and
/// seed, so the two blocks describe the same samples.
pub fn fim_energy_comparison(
    net: &Network,
    data: &Activations,
    layer: usize,
    sample_budget: usize,
    mode: FimMode,
    seed: u64,
) -> Result<EnergyComparison> {
    if net.is_rotated() {
        return Err(Error::State(
            "energy comparison needs a plain network".into(),
        ));
    }
    let before = estimate_full_fim_layer(net, data, layer, sample_budget, mode, seed)?;
    let stats = accumulate_correlations_at(
        net,
        data,
        &[layer],
        sample_budget,
        GradientLabels::Model,
        seed,
    )?;
    let (rotated, pairs) = rotate_layers(net, &stats, &[layer])?;
    let core = pairs[0].core;
    let after = estimate_full_fim_layer(&rotated, data, core, sample_budget, mode, seed)?;
    Ok(EnergyComparison {
        layer,
        ratio_before: diag_energy_ratio(&before.matrix)?,
        ratio_after: diag_energy_ratio(&after.matrix)?,
        before: before.matrix,
        after: after.matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::build_network;

    #[test]
    fn blocks_have_matching_size_and_valid_ratios() {
        let net = build_network(&"mlp-6-5-4-3".parse().unwrap(), 3).unwrap();
        let mut x = Activations::zeros(50, net.input_shape());
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v = ((i * 37 % 101) as f64 / 50.0 - 1.0) * if i % 3 == 0 { 2.0 } else { 0.5 };
        }
        let layer = net.weight_layers()[1];
        let cmp = fim_energy_comparison(&net, &x, layer, 50, FimMode::Expected, 1).unwrap();
        assert_eq!(cmp.before.shape(), (20, 20));
        assert_eq!(cmp.after.shape(), (20, 20));
        for r in [cmp.ratio_before, cmp.ratio_after] {
            assert!((0.0..=1.0).contains(&r));
        }
        // Rotating the weights is an orthogonal change of basis of the block.
        let fb = cmp.before.frobenius_sq();
        let fa = cmp.after.frobenius_sq();
        assert!((fb - fa).abs() <= 1e-9 * fb.max(1e-300), "{fb} vs {fa}");
    }

    #[test]
    fn rotated_networks_are_rejected() {
        let net = build_network(&"mlp-4-3-2".parse().unwrap(), 0).unwrap();
        let x = Activations::zeros(4, net.input_shape());
        let stats = accumulate_correlations_at(
            &net,
            &x,
            &[net.weight_layers()[0]],
            4,
            GradientLabels::Model,
            0,
        )
        .unwrap();
        let (rot, _) = rotate_layers(&net, &stats, &[net.weight_layers()[0]]).unwrap();
        assert!(matches!(
            fim_energy_comparison(&rot, &x, 1, 4, FimMode::Expected, 0),
            Err(Error::State(_))
        ));
    }
}
