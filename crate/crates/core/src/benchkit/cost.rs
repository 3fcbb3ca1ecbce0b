use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::nnkernel::conv_output_size;
use crate::yolicnet::{ModelSpec, NetError};

pub const FLOP_CONVENTION: &str = "1 multiply-accumulate = 2 FLOPs";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    /// `[C, H, W]` or `[F]`.
    pub output: Vec<usize>,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostReport {
    pub input_size: usize,
    pub convention: String,
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_flops: u64,
}

struct Plan {
    layers: Vec<LayerCost>,
}

impl Plan {
    /// Convolution + batch norm (+ ReLU): weights and the two affine vectors;
    /// `2 k^2 Cin Cout Hout Wout / groups` plus one FLOP per activation.
    #[allow(clippy::too_many_arguments)]
    fn conv(&mut self, name: String, cin: usize, cout: usize, k: usize, stride: usize, groups: usize, relu: bool, hw: usize) -> usize {
        let out = conv_output_size(hw, k, stride, k / 2).expect("spec validated");
        let weights = (k * k * cin / groups * cout) as u64;
        let elems = (cout * out * out) as u64;
        let mut flops = 2 * weights * (out * out) as u64;
        if relu {
            flops += elems;
        }
        self.layers.push(LayerCost {
            name,
            kind: if groups == 1 { "conv" } else { "dwconv" }.into(),
            output: vec![cout, out, out],
            params: weights + 2 * cout as u64,
            flops,
        });
        out
    }

    fn unit(&mut self, prefix: &str, cin: usize, cout: usize, stride: usize, hw: usize) -> usize {
        let half = cout / 2;
        if stride > 1 {
            let o = self.conv(format!("{prefix}.branch1.0"), cin, cin, 3, stride, cin, false, hw);
            self.conv(format!("{prefix}.branch1.1"), cin, half, 1, 1, 1, true, o);
        }
        let b2_in = if stride > 1 { cin } else { half };
        let o = self.conv(format!("{prefix}.branch2.0"), b2_in, half, 1, 1, 1, true, hw);
        let o = self.conv(format!("{prefix}.branch2.1"), half, half, 3, stride, half, false, o);
        self.conv(format!("{prefix}.branch2.2"), half, half, 1, 1, 1, true, o)
    }
}

/// Per-layer parameters and FLOPs derived from the spec alone. Batch norm
/// contributes parameters but no FLOPs (it folds into the convolution at
/// inference); channel split, concat and shuffle are data movement.
pub fn cost_report(spec: &ModelSpec, input_size: usize) -> Result<CostReport, NetError> {
    let spec = ModelSpec {
        input_size,
        ..spec.clone()
    };
    spec.validate()?;
    let ch = &spec.stage_channels;
    let mut plan = Plan { layers: Vec::new() };
    let hw = plan.conv("stem".into(), 3, ch[0], 3, 2, 1, true, input_size);
    let mut hw = conv_output_size(hw, 3, 2, 1).expect("spec validated");
    plan.layers.push(LayerCost {
        name: "maxpool".into(),
        kind: "maxpool".into(),
        output: vec![ch[0], hw, hw],
        params: 0,
        flops: (ch[0] * hw * hw) as u64,
    });
    let mut cin = ch[0];
    for (s, (&reps, &cout)) in spec.stage_repeats.iter().zip(&ch[1..4]).enumerate() {
        for r in 0..reps {
            let stride = if r == 0 { 2 } else { 1 };
            hw = plan.unit(&format!("stage{}.{r}", s + 2), cin, cout, stride, hw);
            cin = cout;
        }
    }
    plan.conv("conv5".into(), cin, ch[4], 1, 1, 1, true, hw);
    plan.layers.push(LayerCost {
        name: "pool".into(),
        kind: "avgpool".into(),
        output: vec![ch[4]],
        params: 0,
        flops: ch[4] as u64,
    });
    let c = spec.n_outputs;
    plan.layers.push(LayerCost {
        name: "fc".into(),
        kind: "linear".into(),
        output: vec![c],
        params: (ch[4] * c + c) as u64,
        flops: 2 * (ch[4] * c) as u64,
    });
    Ok(CostReport {
        input_size,
        convention: FLOP_CONVENTION.into(),
        total_params: plan.layers.iter().map(|l| l.params).sum(),
        total_flops: plan.layers.iter().map(|l| l.flops).sum(),
        layers: plan.layers,
    })
}

pub fn count_params(spec: &ModelSpec) -> Result<u64, NetError> {
    Ok(cost_report(spec, spec.input_size)?.total_params)
}

pub fn count_flops(spec: &ModelSpec, input_size: usize) -> Result<u64, NetError> {
    Ok(cost_report(spec, input_size)?.total_flops)
}

impl CostReport {
    pub fn to_text(&self) -> String {
        let mut out = format!("input {0}x{0}, {1}\n", self.input_size, self.convention);
        let _ = writeln!(out, "{:<22} {:<8} {:>16} {:>10} {:>14}", "layer", "kind", "output", "params", "flops");
        for l in &self.layers {
            let shape = l.output.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            let _ = writeln!(out, "{:<22} {:<8} {:>16} {:>10} {:>14}", l.name, l.kind, shape, l.params, l.flops);
        }
        let _ = writeln!(
            out,
            "total params {} ({:.3}M), flops {} ({:.3}G)",
            self.total_params,
            self.total_params as f64 / 1e6,
            self.total_flops,
            self.total_flops as f64 / 1e9
        );
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::yolicnet::{build_model, YolicModel};

    #[test]
    fn tiny_pointwise_example() {
        // 1x1 conv, 2 -> 3 channels on a 1x1 plane: 6 MACs
        let mut plan = Plan { layers: Vec::new() };
        plan.conv("x".into(), 2, 3, 1, 1, 1, false, 1);
        assert_eq!(plan.layers[0].flops, 12);
    }

    #[test]
    fn head_with_two_inputs_three_outputs() {
        let mut spec = ModelSpec::tiny(3, 32);
        spec.stage_channels[4] = 2;
        let fc = cost_report(&spec, 32).unwrap().layers.pop().unwrap();
        assert_eq!((fc.params, fc.flops), (9, 12));
    }

    #[test]
    fn params_equal_tensor_walk() {
        for spec in [ModelSpec::tiny(12, 64), ModelSpec::table1(1248), ModelSpec::table1(210)] {
            let m: YolicModel<f32> = build_model(&spec, 0).unwrap();
            assert_eq!(count_params(&spec).unwrap(), m.n_trainable() as u64);
        }
    }

    #[test]
    fn per_layer_params_match_model_groups() {
        let spec = ModelSpec::tiny(12, 64);
        let m: YolicModel<f32> = build_model(&spec, 0).unwrap();
        let report = cost_report(&spec, 64).unwrap();
        for l in &report.layers {
            let walked: usize = m
                .params()
                .iter()
                .filter(|p| p.name.rsplit_once('.').is_some_and(|(head, _)| head == l.name || head == format!("{}.bn", l.name)))
                .map(|p| p.value.len())
                .sum();
            assert_eq!(walked as u64, l.params, "{}", l.name);
        }
    }

    #[test]
    fn output_shapes_match_forward_trace() {
        let spec = ModelSpec::tiny(5, 64);
        let report = cost_report(&spec, 64).unwrap();
        let m: YolicModel<f32> = build_model(&spec, 0).unwrap();
        let trace = m.trace_shapes(&crate::nnkernel::Tensor::zeros(&[1, 3, 64, 64])).unwrap();
        let find = |n: &str| report.layers.iter().find(|l| l.name == n).unwrap().output.clone();
        assert_eq!(find("stem"), trace[0].1[1..].to_vec());
        assert_eq!(find("maxpool"), trace[1].1[1..].to_vec());
        assert_eq!(find("conv5"), trace[5].1[1..].to_vec());
        assert_eq!(find("fc"), vec![5]);
    }

    #[test]
    fn totals_are_sums() {
        let r = cost_report(&ModelSpec::table1(1248), 224).unwrap();
        assert_eq!(r.total_params, r.layers.iter().map(|l| l.params).sum::<u64>());
        assert_eq!(r.total_flops, r.layers.iter().map(|l| l.flops).sum::<u64>());
        assert!(r.to_text().contains("total params"));
    }

    #[test]
    fn doubling_side_quadruples_conv_flops() {
        let spec = ModelSpec::table1(1248);
        let conv = |s| -> u64 {
            cost_report(&spec, s)
                .unwrap()
                .layers
                .iter()
                .filter(|l| l.kind.ends_with("conv"))
                .map(|l| l.flops)
                .sum()
        };
        let ratio = conv(448) as f64 / conv(224) as f64;
        assert!((ratio - 4.0).abs() < 0.05, "{ratio}");
    }
}
