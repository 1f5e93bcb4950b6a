//! Residual anomaly amplification: a matching-guided residual gate (dual
//! memory banks behind a softmax matcher) and an attribute-scaling residual
//! generator (tanh channel weights times the input feature).
//!
//! Per level k the advanced feature is F_A = F_T + w·Δ. During gate-aware
//! training the predicted weight is replaced by the ground-truth mask bit,
//! so normal patches pass through bit-exactly and only abnormal residuals
//! carry gradient.

use crate::error::{Error, Result};
use crate::rng::{self, Fnv64};
use crate::synth::Mask;
use crate::tape::{NodeId, Tape};
use crate::teacher::features_to_patches;
use crate::tensor::Tensor;

/// Whether model tensors enter a tape as trainable leaves or constants.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Train,
    Frozen,
}

fn bind_leaf(tape: &mut Tape, name: &str, t: &Tensor, bind: Bind) -> Result<NodeId> {
    match bind {
        Bind::Train => tape.param(name, t),
        Bind::Frozen => tape.constant(t.clone()),
    }
}

// ------------------------------------------------------------------- mlp

/// 3-layer perceptron with relu between layers and a linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w: Vec<Tensor>,
    pub b: Vec<Tensor>,
}

impl Mlp {
    /// Fan-in-scaled Gaussian init, width `dim` throughout. With
    /// `zero_last` the final layer starts at zero, so the net's output is
    /// exactly zero until trained.
    pub fn init(dim: usize, seed: u64, zero_last: bool) -> Self {
        let std = (1.0 / dim as f32).sqrt();
        let mut w = Vec::new();
        let mut b = Vec::new();
        for layer in 0..3 {
            if layer == 2 && zero_last {
                w.push(Tensor::zeros(vec![dim, dim]));
            } else {
                w.push(rng::gaussian(vec![dim, dim], std, rng::mix(seed, layer as u64)));
            }
            b.push(Tensor::zeros(vec![dim]));
        }
        Mlp { w, b }
    }

    pub fn identity(dim: usize) -> Self {
        let mut eye = Tensor::zeros(vec![dim, dim]);
        for i in 0..dim {
            eye.data_mut()[i * dim + i] = 1.0;
        }
        Mlp {
            w: vec![eye.clone(), eye.clone(), eye],
            b: vec![Tensor::zeros(vec![dim]); 3],
        }
    }

    /// x: [n, dim] -> [n, dim].
    pub fn forward(&self, tape: &mut Tape, x: NodeId, prefix: &str, bind: Bind) -> Result<NodeId> {
        let mut h = x;
        for layer in 0..3 {
            let w = bind_leaf(tape, &format!("{prefix}/w{layer}"), &self.w[layer], bind)?;
            let b = bind_leaf(tape, &format!("{prefix}/b{layer}"), &self.b[layer], bind)?;
            h = tape.matmul(h, w)?;
            h = tape.add_row(h, b)?;
            if layer < 2 {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn named(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for layer in 0..3 {
            out.push((format!("{prefix}/w{layer}"), self.w[layer].clone()));
            out.push((format!("{prefix}/b{layer}"), self.b[layer].clone()));
        }
    }

    pub fn load(&mut self, prefix: &str, tensors: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        for layer in 0..3 {
            self.w[layer] = fetch(tensors, &format!("{prefix}/w{layer}"))?;
            self.b[layer] = fetch(tensors, &format!("{prefix}/b{layer}"))?;
        }
        Ok(())
    }
}

pub(crate) fn fetch(
    tensors: &std::collections::BTreeMap<String, Tensor>,
    name: &str,
) -> Result<Tensor> {
    tensors.get(name).cloned().ok_or_else(|| Error::Format {
        path: String::new(),
        message: format!("missing tensor `{name}` in checkpoint"),
    })
}

// ----------------------------------------------------- position encoding

/// Amplitude of the sinusoidal position encoding. Kept well below the
/// typical feature magnitude so queries stay feature-dominated; the
/// encoding only disambiguates position.
pub const PE_SCALE: f32 = 0.1;

/// Fixed 2-D sinusoidal position encoding as an (H·W)×C patch matrix.
/// The first C/2 channels encode the row index, the rest the column index,
/// each half as interleaved (sin, cos) pairs over a geometric frequency
/// ladder. All values lie in [-1, 1].
pub fn position_encoding(c: usize, h: usize, w: usize) -> Result<Tensor> {
    if c % 4 != 0 {
        return Err(Error::InvalidArgument {
            context: format!("position encoding needs channels divisible by 4, got {c}"),
        });
    }
    let half = c / 2;
    let pairs = half / 2;
    let omega: Vec<f64> = (0..pairs)
        .map(|i| 1.0 / 10000.0f64.powf(2.0 * i as f64 / half as f64))
        .collect();
    let mut data = vec![0.0f32; h * w * c];
    for y in 0..h {
        for x in 0..w {
            let row = (y * w + x) * c;
            for (i, &om) in omega.iter().enumerate() {
                let ay = y as f64 * om;
                let ax = x as f64 * om;
                data[row + 2 * i] = PE_SCALE * ay.sin() as f32;
                data[row + 2 * i + 1] = PE_SCALE * ay.cos() as f32;
                data[row + half + 2 * i] = PE_SCALE * ax.sin() as f32;
                data[row + half + 2 * i + 1] = PE_SCALE * ax.cos() as f32;
            }
        }
    }
    Tensor::new(vec![h * w, c], data)
}

// ------------------------------------------------------------- raa level

/// Per-level module: projection net, residual net, dual memory banks.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelRaa {
    pub phi1: Mlp,
    pub phi2: Mlp,
    pub mem_normal: Tensor,
    pub mem_anomaly: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RaaParams {
    pub levels: Vec<LevelRaa>,
    pub mem_len: usize,
}

impl RaaParams {
    /// Memories are unit Gaussian; `phi2_zero_init` zeroes the residual
    /// net's last layer so residuals start exactly at zero.
    pub fn init(channels: &[usize], mem_len: usize, seed: u64, phi2_zero_init: bool) -> Self {
        let levels = channels
            .iter()
            .enumerate()
            .map(|(k, &c)| {
                let s = rng::mix(seed, 0x0AA0 + k as u64);
                LevelRaa {
                    phi1: Mlp::init(c, rng::mix(s, 1), false),
                    phi2: Mlp::init(c, rng::mix(s, 2), phi2_zero_init),
                    mem_normal: rng::gaussian(vec![mem_len, c], 1.0, rng::mix(s, 3)),
                    mem_anomaly: rng::gaussian(vec![mem_len, c], 1.0, rng::mix(s, 4)),
                }
            })
            .collect();
        RaaParams { levels, mem_len }
    }

    pub fn k_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, lvl) in self.levels.iter().enumerate() {
            lvl.phi1.named(&format!("raa/level{k}/phi1"), &mut out);
            lvl.phi2.named(&format!("raa/level{k}/phi2"), &mut out);
            out.push((format!("raa/level{k}/mem_n"), lvl.mem_normal.clone()));
            out.push((format!("raa/level{k}/mem_a"), lvl.mem_anomaly.clone()));
        }
        out
    }

    pub fn load(&mut self, tensors: &std::collections::BTreeMap<String, Tensor>) -> Result<()> {
        for (k, lvl) in self.levels.iter_mut().enumerate() {
            lvl.phi1.load(&format!("raa/level{k}/phi1"), tensors)?;
            lvl.phi2.load(&format!("raa/level{k}/phi2"), tensors)?;
            lvl.mem_normal = fetch(tensors, &format!("raa/level{k}/mem_n"))?;
            lvl.mem_anomaly = fetch(tensors, &format!("raa/level{k}/mem_a"))?;
        }
        Ok(())
    }

    pub fn hash(&self) -> u64 {
        let mut h = Fnv64::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            rng::hash_tensor(&mut h, &t);
        }
        h.finish()
    }

    /// Named mutable views of every trainable tensor, for the optimizer.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (k, lvl) in self.levels.iter_mut().enumerate() {
            for (layer, t) in lvl.phi1.w.iter_mut().enumerate() {
                out.push((format!("raa/level{k}/phi1/w{layer}"), t));
            }
            for (layer, t) in lvl.phi1.b.iter_mut().enumerate() {
                out.push((format!("raa/level{k}/phi1/b{layer}"), t));
            }
            for (layer, t) in lvl.phi2.w.iter_mut().enumerate() {
                out.push((format!("raa/level{k}/phi2/w{layer}"), t));
            }
            for (layer, t) in lvl.phi2.b.iter_mut().enumerate() {
                out.push((format!("raa/level{k}/phi2/b{layer}"), t));
            }
            out.push((format!("raa/level{k}/mem_n"), &mut lvl.mem_normal));
            out.push((format!("raa/level{k}/mem_a"), &mut lvl.mem_anomaly));
        }
        out
    }
}

// --------------------------------------------------------------- forward

/// How the gate weight enters F_A = F_T + w·Δ.
#[derive(Clone, Copy, Debug)]
pub enum AdvanceMode<'a> {
    /// Predicted gates and full residuals at every patch.
    Inference,
    /// Ground-truth gate bits from the pseudo-anomaly mask at this level:
    /// normal patches pass through exactly, abnormal ones take the full
    /// residual.
    TrainGt(&'a Mask),
}

/// Tape nodes produced by one level's RAA forward.
pub struct LevelAdvance {
    /// Predicted anomaly weight per patch, [P], values in [0,1].
    pub gate: NodeId,
    /// Full matching weights, [P, 2L] (normal columns then anomaly columns).
    pub match_weights: NodeId,
    /// Residual matrix Δ, [P, C].
    pub delta: NodeId,
    /// Advanced features, [P, C].
    pub f_a: NodeId,
    /// Vanilla features as a tape constant, [P, C].
    pub f_t: NodeId,
}

impl LevelRaa {
    /// Project queries q = phi1(F + p_c). `f_patches` and `pe` are [P, C].
    pub fn project_queries(
        &self,
        tape: &mut Tape,
        f_patches: NodeId,
        pe: NodeId,
        prefix: &str,
        bind: Bind,
    ) -> Result<NodeId> {
        let x = tape.add(f_patches, pe)?;
        self.phi1.forward(tape, x, &format!("{prefix}/phi1"), bind)
    }

    /// Softmax-normalized cosine matching of queries against both banks.
    /// Returns ([P, 2L] weights, [P] summed anomaly weight).
    pub fn match_memories(
        &self,
        tape: &mut Tape,
        queries: NodeId,
        prefix: &str,
        bind: Bind,
    ) -> Result<(NodeId, NodeId)> {
        let mem_n = bind_leaf(tape, &format!("{prefix}/mem_n"), &self.mem_normal, bind)?;
        let mem_a = bind_leaf(tape, &format!("{prefix}/mem_a"), &self.mem_anomaly, bind)?;
        let banks = tape.concat0(mem_n, mem_a)?;
        let sims = tape.cosine_pairs(queries, banks)?;
        let weights = tape.softmax_rows(sims)?;
        let l = self.mem_normal.dims()[0];
        let anomaly_cols = tape.slice_cols(weights, l, 2 * l)?;
        let gate = tape.row_sum(anomaly_cols)?;
        Ok((weights, gate))
    }

    /// Residual Δ = tanh(phi2(F)) ⊙ F for a [P, C] patch matrix.
    pub fn generate_residual(
        &self,
        tape: &mut Tape,
        f_patches: NodeId,
        prefix: &str,
        bind: Bind,
    ) -> Result<NodeId> {
        let raw = self.phi2.forward(tape, f_patches, &format!("{prefix}/phi2"), bind)?;
        let scale = tape.tanh(raw)?;
        tape.mul(scale, f_patches)
    }

    /// Level forward over a precomputed [P, C] patch matrix and matching
    /// position encoding. `gate_override` carries ground-truth bits for the
    /// gate-replaced training path; None uses the predicted gate.
    pub fn advance_patches(
        &self,
        tape: &mut Tape,
        k: usize,
        patches: &Tensor,
        pe: &Tensor,
        gate_override: Option<&[f32]>,
        bind: Bind,
    ) -> Result<LevelAdvance> {
        let prefix = format!("raa/level{k}");
        let f_t = tape.constant(patches.clone())?;
        let pe = tape.constant(pe.clone())?;
        let queries = self.project_queries(tape, f_t, pe, &prefix, bind)?;
        let (match_weights, gate) = self.match_memories(tape, queries, &prefix, bind)?;
        let delta = self.generate_residual(tape, f_t, &prefix, bind)?;
        let applied_gate = match gate_override {
            None => gate,
            Some(bits) => {
                if bits.len() != patches.dims()[0] {
                    return Err(Error::ShapeMismatch {
                        context: format!("advance level {k} ground-truth gate"),
                        expected: format!("{} bits", patches.dims()[0]),
                        got: format!("{}", bits.len()),
                    });
                }
                tape.constant(Tensor::new(vec![bits.len()], bits.to_vec())?)?
            }
        };
        let gated = tape.scale_rows(delta, applied_gate)?;
        let f_a = tape.add(f_t, gated)?;
        Ok(LevelAdvance {
            gate,
            match_weights,
            delta,
            f_a,
            f_t,
        })
    }

    /// Full level forward producing F_A from a C×H×W vanilla feature map.
    pub fn advance(
        &self,
        tape: &mut Tape,
        k: usize,
        f_level: &Tensor,
        mode: AdvanceMode,
        bind: Bind,
    ) -> Result<LevelAdvance> {
        let dims = f_level.dims().to_vec();
        let (c, h, w) = (dims[0], dims[1], dims[2]);
        let patches = features_to_patches(f_level);
        let pe = position_encoding(c, h, w)?;
        let bits;
        let gate_override = match mode {
            AdvanceMode::Inference => None,
            AdvanceMode::TrainGt(mask) => {
                if mask.height() != h || mask.width() != w {
                    return Err(Error::ShapeMismatch {
                        context: format!("advance level {k} ground-truth mask"),
                        expected: format!("{h}x{w}"),
                        got: format!("{}x{}", mask.height(), mask.width()),
                    });
                }
                bits = mask.data().iter().map(|&b| b as f32).collect::<Vec<f32>>();
                Some(bits.as_slice())
            }
        };
        self.advance_patches(tape, k, &patches, &pe, gate_override, bind)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use crate::rng::gaussian;

    fn relu_vec(v: &mut [f32]) {
        for x in v.iter_mut() {
            if *x < 0.0 {
                *x = 0.0;
            }
        }
    }

    #[test]
    fn identity_net_with_zero_pe_passes_features_through() {
        // nonnegative features, identity weights, zero bias: q = F
        let lvl = LevelRaa {
            phi1: Mlp::identity(8),
            phi2: Mlp::init(8, 1, true),
            mem_normal: gaussian(vec![4, 8], 1.0, 2),
            mem_anomaly: gaussian(vec![4, 8], 1.0, 3),
        };
        let mut tape = Tape::new();
        let f = Tensor::new(vec![3, 8], (0..24).map(|i| i as f32 * 0.1).collect()).unwrap();
        let f_id = tape.constant(f.clone()).unwrap();
        let pe = tape.constant(Tensor::zeros(vec![3, 8])).unwrap();
        let q = lvl.project_queries(&mut tape, f_id, pe, "raa/level0", Bind::Frozen).unwrap();
        assert_eq!(tape.value(q).data(), f.data());
    }

    #[test]
    fn equal_features_at_different_positions_get_different_queries() {
        let lvl = LevelRaa {
            phi1: Mlp::identity(8),
            phi2: Mlp::init(8, 1, true),
            mem_normal: gaussian(vec![4, 8], 1.0, 2),
            mem_anomaly: gaussian(vec![4, 8], 1.0, 3),
        };
        let mut tape = Tape::new();
        let row: Vec<f32> = (0..8).map(|i| 0.3 + i as f32 * 0.05).collect();
        let mut f = row.clone();
        f.extend_from_slice(&row);
        let f_id = tape.constant(Tensor::new(vec![2, 8], f).unwrap()).unwrap();
        let pe_full = position_encoding(8, 1, 2).unwrap();
        let pe = tape.constant(pe_full).unwrap();
        let q = lvl.project_queries(&mut tape, f_id, pe, "raa/level0", Bind::Frozen).unwrap();
        let qv = tape.value(q);
        assert_ne!(&qv.data()[..8], &qv.data()[8..]);
    }

    #[test]
    fn projection_matches_straight_line_perceptron() {
        let mlp = Mlp::init(6, 3, false);
        let x = gaussian(vec![4, 6], 1.0, 30);
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone()).unwrap();
        let y = mlp.forward(&mut tape, xid, "p", Bind::Frozen).unwrap();
        // layer-by-layer reference
        let mut h = x.data().to_vec();
        for layer in 0..3 {
            h = kernels::matmul(&h, mlp.w[layer].data(), 4, 6, 6);
            h = kernels::add_row(&h, mlp.b[layer].data(), 4, 6);
            if layer < 2 {
                relu_vec(&mut h);
            }
        }
        for (a, b) in tape.value(y).data().iter().zip(h.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn matching_closed_form_single_item_banks() {
        // s(q,m_n)=1, s(q,m_a)=-1 -> w_n = e/(e+1/e), w_a = 1 - w_n
        let q = Tensor::new(vec![1, 4], vec![0.5, -0.2, 0.8, 0.1]).unwrap();
        let mut neg = q.clone();
        for v in neg.data_mut() {
            *v = -*v;
        }
        let lvl = LevelRaa {
            phi1: Mlp::identity(4),
            phi2: Mlp::init(4, 1, true),
            mem_normal: q.clone(),
            mem_anomaly: neg,
        };
        let mut tape = Tape::new();
        let qid = tape.constant(q).unwrap();
        let (_, gate) = lvl.match_memories(&mut tape, qid, "raa/level0", Bind::Frozen).unwrap();
        let e = std::f64::consts::E;
        let w_n = e / (e + 1.0 / e);
        let got = tape.value(gate).data()[0] as f64;
        assert!((got - (1.0 - w_n)).abs() < 1e-4, "w_a {got}");
        assert!((got - 0.1192).abs() < 1e-3);
    }

    #[test]
    fn identical_banks_give_uniform_weights_and_half_gate() {
        let bank = gaussian(vec![5, 8], 1.0, 77);
        let lvl = LevelRaa {
            phi1: Mlp::identity(8),
            phi2: Mlp::init(8, 1, true),
            mem_normal: bank.clone(),
            mem_anomaly: bank, // permutation (identity) of the normal bank
        };
        let mut tape = Tape::new();
        let q = tape.constant(gaussian(vec![3, 8], 1.0, 78)).unwrap();
        let (w, gate) = lvl.match_memories(&mut tape, q, "raa/level0", Bind::Frozen).unwrap();
        for row in 0..3 {
            let sum: f32 = tape.value(w).data()[row * 10..(row + 1) * 10].iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert!((tape.value(gate).data()[row] - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn partition_of_unity_for_random_queries() {
        let lvl = LevelRaa {
            phi1: Mlp::init(8, 5, false),
            phi2: Mlp::init(8, 6, false),
            mem_normal: gaussian(vec![7, 8], 1.0, 7),
            mem_anomaly: gaussian(vec![7, 8], 1.0, 8),
        };
        let mut tape = Tape::new();
        let q = tape.constant(gaussian(vec![20, 8], 2.0, 9)).unwrap();
        let (w, gate) = lvl.match_memories(&mut tape, q, "raa/level0", Bind::Frozen).unwrap();
        for row in 0..20 {
            let wn: f32 = tape.value(w).data()[row * 14..row * 14 + 7].iter().sum();
            let wa: f32 = tape.value(w).data()[row * 14 + 7..(row + 1) * 14].iter().sum();
            assert!((wn + wa - 1.0).abs() < 1e-6);
            assert!((tape.value(gate).data()[row] - wa).abs() < 1e-6);
            assert!((0.0..=1.0).contains(&tape.value(gate).data()[row]));
        }
    }

    #[test]
    fn residual_is_bounded_by_features() {
        let lvl = LevelRaa {
            phi1: Mlp::init(8, 5, false),
            phi2: Mlp::init(8, 5, false),
            mem_normal: gaussian(vec![4, 8], 1.0, 1),
            mem_anomaly: gaussian(vec![4, 8], 1.0, 2),
        };
        let mut tape = Tape::new();
        let f = gaussian(vec![10, 8], 1.5, 55);
        let fid = tape.constant(f.clone()).unwrap();
        let d = lvl.generate_residual(&mut tape, fid, "raa/level0", Bind::Frozen).unwrap();
        for (dv, fv) in tape.value(d).data().iter().zip(f.data()) {
            assert!(dv.abs() <= fv.abs() + 1e-7);
        }
        // zero features -> zero residual regardless of params
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::zeros(vec![4, 8])).unwrap();
        let d = lvl.generate_residual(&mut tape, z, "raa/level0", Bind::Frozen).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
        // zero phi2 -> zero residual
        let zero_lvl = LevelRaa {
            phi2: Mlp {
                w: vec![Tensor::zeros(vec![8, 8]); 3],
                b: vec![Tensor::zeros(vec![8]); 3],
            },
            ..lvl
        };
        let mut tape = Tape::new();
        let fid = tape.constant(f).unwrap();
        let d = zero_lvl.generate_residual(&mut tape, fid, "raa/level0", Bind::Frozen).unwrap();
        assert!(tape.value(d).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_mode_gate_suppression_is_bit_exact() {
        let lvl = LevelRaa {
            phi1: Mlp::init(16, 5, false),
            phi2: Mlp::init(16, 6, false),
            mem_normal: gaussian(vec![4, 16], 1.0, 1),
            mem_anomaly: gaussian(vec![4, 16], 1.0, 2),
        };
        // nonnegative features, like real relu outputs
        let mut f = gaussian(vec![16, 4, 4], 1.0, 90);
        for v in f.data_mut() {
            *v = v.abs();
        }
        // all-normal mask: F_A == F_T bit-identically
        let mut tape = Tape::new();
        let mask = Mask::zeros(4, 4);
        let out = lvl
            .advance(&mut tape, 0, &f, AdvanceMode::TrainGt(&mask), Bind::Frozen)
            .unwrap();
        let fa = tape.value(out.f_a);
        let ft = tape.value(out.f_t);
        for (a, b) in fa.data().iter().zip(ft.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // mixed mask: normal rows exact, abnormal rows = F_T + delta
        let mut bits = vec![0u8; 16];
        bits[3] = 1;
        bits[11] = 1;
        let mask = Mask::new(4, 4, bits.clone()).unwrap();
        let mut tape = Tape::new();
        let out = lvl
            .advance(&mut tape, 0, &f, AdvanceMode::TrainGt(&mask), Bind::Frozen)
            .unwrap();
        let fa = tape.value(out.f_a).clone();
        let ft = tape.value(out.f_t).clone();
        let delta = tape.value(out.delta).clone();
        for p in 0..16 {
            for c in 0..16 {
                let i = p * 16 + c;
                if bits[p] == 0 {
                    assert_eq!(fa.data()[i].to_bits(), ft.data()[i].to_bits());
                } else {
                    assert!((fa.data()[i] - (ft.data()[i] + delta.data()[i])).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn inference_mode_applies_predicted_gate() {
        let lvl = LevelRaa {
            phi1: Mlp::init(16, 5, false),
            phi2: Mlp::init(16, 6, false),
            mem_normal: gaussian(vec![4, 16], 1.0, 1),
            mem_anomaly: gaussian(vec![4, 16], 1.0, 2),
        };
        let f = gaussian(vec![16, 4, 4], 1.0, 91);
        let mut tape = Tape::new();
        let out = lvl
            .advance(&mut tape, 0, &f, AdvanceMode::Inference, Bind::Frozen)
            .unwrap();
        let fa = tape.value(out.f_a).clone();
        let ft = tape.value(out.f_t).clone();
        let delta = tape.value(out.delta).clone();
        let gate = tape.value(out.gate).clone();
        for p in 0..16 {
            for c in 0..16 {
                let i = p * 16 + c;
                let want = ft.data()[i] + gate.data()[p] * delta.data()[i];
                assert!((fa.data()[i] - want).abs() < 1e-6);
            }
        }
        // full gate means the full residual is applied
        let mut tape = Tape::new();
        let d = tape.constant(delta).unwrap();
        let ones = tape.constant(Tensor::full(vec![16], 1.0)).unwrap();
        let gated = tape.scale_rows(d, ones).unwrap();
        let ftid = tape.constant(ft.clone()).unwrap();
        let fa_full = tape.add(ftid, gated).unwrap();
        let dv = tape.value(d).clone();
        for i in 0..fa_full_len(&ft) {
            assert_eq!(
                tape.value(fa_full).data()[i],
                ft.data()[i] + dv.data()[i]
            );
        }
    }

    fn fa_full_len(t: &Tensor) -> usize {
        t.len()
    }

    #[test]
    fn position_encoding_shape_range_determinism() {
        let pe = position_encoding(16, 8, 8).unwrap();
        assert_eq!(pe.dims(), &[64, 16]);
        assert!(pe.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(pe, position_encoding(16, 8, 8).unwrap());
        assert!(position_encoding(6, 4, 4).is_err());
    }
}
