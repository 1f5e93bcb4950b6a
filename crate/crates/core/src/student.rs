//! One-class bottleneck embedding and the student decoder.
//!
//! The bottleneck downsamples every pyramid level to the deepest
//! resolution with stride-2 conv chains, concatenates channels and fuses
//! them with a 1x1 projection. The decoder mirrors the teacher pyramid in
//! reverse: each block bilinearly upsamples, then applies conv-relu-conv.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::raa::{fetch, Bind};
use crate::rng::{self, Fnv64};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub w: Tensor,
    pub b: Tensor,
}

impl Conv {
    fn init(cin: usize, cout: usize, seed: u64) -> Self {
        let std = (2.0 / (cin * 9) as f32).sqrt();
        Conv {
            w: rng::gaussian(vec![cout, cin, 3, 3], std, seed),
            b: Tensor::zeros(vec![cout]),
        }
    }

    fn apply(&self, tape: &mut Tape, x: NodeId, name: &str, bind: Bind, stride: usize) -> Result<NodeId> {
        let w = bind_leaf(tape, &format!("{name}/w"), &self.w, bind)?;
        let b = bind_leaf(tape, &format!("{name}/b"), &self.b, bind)?;
        tape.conv2d(x, w, b, stride)
    }
}

fn bind_leaf(tape: &mut Tape, name: &str, t: &Tensor, bind: Bind) -> Result<NodeId> {
    match bind {
        Bind::Train => tape.param(name, t),
        Bind::Frozen => tape.constant(t.clone()),
    }
}

/// Stride-2 chains per level plus the 1x1 channel fusion.
#[derive(Clone, Debug, PartialEq)]
pub struct BottleneckParams {
    channels: Vec<usize>,
    chains: Vec<Vec<Conv>>,
    fuse_w: Tensor,
    fuse_b: Tensor,
}

impl BottleneckParams {
    pub fn init(channels: &[usize], seed: u64) -> Self {
        let k = channels.len();
        let mut chains = Vec::with_capacity(k);
        let mut fused_in = 0usize;
        for (i, &c) in channels.iter().enumerate() {
            let mut chain = Vec::new();
            let mut cin = c;
            for step in 0..k - 1 - i {
                let cout = cin * 2;
                chain.push(Conv::init(cin, cout, rng::mix(seed, (0xB0 + i * 8 + step) as u64)));
                cin = cout;
            }
            fused_in += cin;
            chains.push(chain);
        }
        let c_last = channels[k - 1];
        let std = (1.0 / fused_in as f32).sqrt();
        BottleneckParams {
            channels: channels.to_vec(),
            chains,
            fuse_w: rng::gaussian(vec![fused_in, c_last], std, rng::mix(seed, 0xBF)),
            fuse_b: Tensor::zeros(vec![c_last]),
        }
    }

    /// Pyramid nodes (level order, C_k×H_k×W_k) to the fused C_K×H_K×W_K
    /// embedding.
    pub fn forward(&self, tape: &mut Tape, pyramid: &[NodeId], bind: Bind) -> Result<NodeId> {
        let k = self.channels.len();
        if pyramid.len() != k {
            return Err(Error::ShapeMismatch {
                context: "bottleneck".into(),
                expected: format!("{k} levels"),
                got: format!("{}", pyramid.len()),
            });
        }
        for (i, &node) in pyramid.iter().enumerate() {
            let dims = tape.dims(node);
            if dims.len() != 3 || dims[0] != self.channels[i] {
                return Err(Error::ShapeMismatch {
                    context: format!("bottleneck level {i}"),
                    expected: format!("[{}, h, w]", self.channels[i]),
                    got: format!("{dims:?}"),
                });
            }
        }
        let mut downs = Vec::with_capacity(k);
        for (i, &node) in pyramid.iter().enumerate() {
            let mut x = node;
            for (j, conv) in self.chains[i].iter().enumerate() {
                x = conv.apply(tape, x, &format!("bn/down{i}/c{j}"), bind, 2)?;
                x = tape.relu(x)?;
            }
            downs.push(x);
        }
        let mut cat = downs[0];
        for &d in &downs[1..] {
            cat = tape.concat0(cat, d)?;
        }
        // 1x1 fusion as a matmul over the channel axis
        let dims = tape.dims(cat).to_vec();
        let (cin, h, w) = (dims[0], dims[1], dims[2]);
        let flat = tape.reshape(cat, vec![cin, h * w])?;
        let cols = tape.transpose(flat)?;
        let fw = bind_leaf(tape, "bn/fuse/w", &self.fuse_w, bind)?;
        let fb = bind_leaf(tape, "bn/fuse/b", &self.fuse_b, bind)?;
        let proj = tape.matmul(cols, fw)?;
        let proj = tape.add_row(proj, fb)?;
        let back = tape.transpose(proj)?;
        tape.reshape(back, vec![self.channels[self.channels.len() - 1], h, w])
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, chain) in self.chains.iter().enumerate() {
            for (j, conv) in chain.iter().enumerate() {
                out.push((format!("bn/down{i}/c{j}/w"), conv.w.clone()));
                out.push((format!("bn/down{i}/c{j}/b"), conv.b.clone()));
            }
        }
        out.push(("bn/fuse/w".into(), self.fuse_w.clone()));
        out.push(("bn/fuse/b".into(), self.fuse_b.clone()));
        out
    }

    pub fn load(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (i, chain) in self.chains.iter_mut().enumerate() {
            for (j, conv) in chain.iter_mut().enumerate() {
                conv.w = fetch(tensors, &format!("bn/down{i}/c{j}/w"))?;
                conv.b = fetch(tensors, &format!("bn/down{i}/c{j}/b"))?;
            }
        }
        self.fuse_w = fetch(tensors, "bn/fuse/w")?;
        self.fuse_b = fetch(tensors, "bn/fuse/b")?;
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, chain) in self.chains.iter_mut().enumerate() {
            for (j, conv) in chain.iter_mut().enumerate() {
                out.push((format!("bn/down{i}/c{j}/w"), &mut conv.w));
                out.push((format!("bn/down{i}/c{j}/b"), &mut conv.b));
            }
        }
        out.push(("bn/fuse/w".into(), &mut self.fuse_w));
        out.push(("bn/fuse/b".into(), &mut self.fuse_b));
        out
    }
}

/// K upsample-conv blocks emitting teacher-mirroring level shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    channels: Vec<usize>,
    blocks: Vec<(Conv, Conv)>, // index 0 = deepest block (level K-1)
}

impl DecoderParams {
    pub fn init(channels: &[usize], seed: u64) -> Self {
        let k = channels.len();
        let mut blocks = Vec::with_capacity(k);
        for step in 0..k {
            let level = k - 1 - step; // emit deepest first
            let cin = if step == 0 { channels[k - 1] } else { channels[level + 1] };
            let cout = channels[level];
            blocks.push((
                Conv::init(cin, cout, rng::mix(seed, (0xD0 + step * 4) as u64)),
                Conv::init(cout, cout, rng::mix(seed, (0xD1 + step * 4) as u64)),
            ));
        }
        DecoderParams {
            channels: channels.to_vec(),
            blocks,
        }
    }

    /// Decode the embedding into level-ordered features (level 0 first),
    /// mirroring the teacher pyramid sizes derived from the embedding.
    pub fn forward(&self, tape: &mut Tape, embedding: NodeId, bind: Bind) -> Result<Vec<NodeId>> {
        let k = self.channels.len();
        let dims = tape.dims(embedding).to_vec();
        if dims.len() != 3 || dims[0] != self.channels[k - 1] {
            return Err(Error::ShapeMismatch {
                context: "decoder".into(),
                expected: format!("[{}, h, w] embedding", self.channels[k - 1]),
                got: format!("{dims:?}"),
            });
        }
        let (mut h, mut w) = (dims[1], dims[2]);
        let mut x = embedding;
        let mut levels_rev = Vec::with_capacity(k);
        for (step, (c1, c2)) in self.blocks.iter().enumerate() {
            let up = tape.bilinear_upsample(x, h, w)?;
            let y = c1.apply(tape, up, &format!("student/block{}/c1", k - 1 - step), bind, 1)?;
            let y = tape.relu(y)?;
            let y = c2.apply(tape, y, &format!("student/block{}/c2", k - 1 - step), bind, 1)?;
            levels_rev.push(y);
            x = y;
            h *= 2;
            w *= 2;
        }
        levels_rev.reverse();
        Ok(levels_rev)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let k = self.channels.len();
        let mut out = Vec::new();
        for (step, (c1, c2)) in self.blocks.iter().enumerate() {
            let level = k - 1 - step;
            out.push((format!("student/block{level}/c1/w"), c1.w.clone()));
            out.push((format!("student/block{level}/c1/b"), c1.b.clone()));
            out.push((format!("student/block{level}/c2/w"), c2.w.clone()));
            out.push((format!("student/block{level}/c2/b"), c2.b.clone()));
        }
        out
    }

    pub fn load(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let k = self.channels.len();
        for (step, (c1, c2)) in self.blocks.iter_mut().enumerate() {
            let level = k - 1 - step;
            c1.w = fetch(tensors, &format!("student/block{level}/c1/w"))?;
            c1.b = fetch(tensors, &format!("student/block{level}/c1/b"))?;
            c2.w = fetch(tensors, &format!("student/block{level}/c2/w"))?;
            c2.b = fetch(tensors, &format!("student/block{level}/c2/b"))?;
        }
        Ok(())
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let k = self.channels.len();
        let mut out = Vec::new();
        for (step, (c1, c2)) in self.blocks.iter_mut().enumerate() {
            let level = k - 1 - step;
            out.push((format!("student/block{level}/c1/w"), &mut c1.w));
            out.push((format!("student/block{level}/c1/b"), &mut c1.b));
            out.push((format!("student/block{level}/c2/w"), &mut c2.w));
            out.push((format!("student/block{level}/c2/b"), &mut c2.b));
        }
        out
    }
}

pub fn hash_named(tensors: &[(String, Tensor)]) -> u64 {
    let mut h = Fnv64::new();
    for (name, t) in tensors {
        h.update(name.as_bytes());
        rng::hash_tensor(&mut h, t);
    }
    h.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels;
    use crate::rng::gaussian;

    fn pyramid_nodes(tape: &mut Tape, seeds: [u64; 3]) -> Vec<NodeId> {
        let shapes = [vec![16, 8, 8], vec![32, 4, 4], vec![64, 2, 2]];
        shapes
            .iter()
            .zip(seeds)
            .map(|(s, seed)| tape.constant(gaussian(s.clone(), 1.0, seed)).unwrap())
            .collect()
    }

    #[test]
    fn bottleneck_output_matches_deepest_level_dims() {
        let bn = BottleneckParams::init(&[16, 32, 64], 7);
        let mut tape = Tape::new();
        let pyr = pyramid_nodes(&mut tape, [1, 2, 3]);
        let emb = bn.forward(&mut tape, &pyr, Bind::Frozen).unwrap();
        assert_eq!(tape.dims(emb), &[64, 2, 2]);
    }

    #[test]
    fn zero_pyramid_and_zero_bias_gives_zero_embedding() {
        let bn = BottleneckParams::init(&[16, 32, 64], 7);
        let mut tape = Tape::new();
        let pyr: Vec<NodeId> = [vec![16, 8, 8], vec![32, 4, 4], vec![64, 2, 2]]
            .iter()
            .map(|s| tape.constant(Tensor::zeros(s.clone())).unwrap())
            .collect();
        let emb = bn.forward(&mut tape, &pyr, Bind::Frozen).unwrap();
        assert!(tape.value(emb).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_matches_straight_line_reference() {
        // random pyramid, seed 11: reference computed with bare kernels
        let bn = BottleneckParams::init(&[16, 32, 64], 11);
        let l0 = gaussian(vec![16, 8, 8], 1.0, 111);
        let l1 = gaussian(vec![32, 4, 4], 1.0, 112);
        let l2 = gaussian(vec![64, 2, 2], 1.0, 113);
        let mut tape = Tape::new();
        let nodes = vec![
            tape.constant(l0.clone()).unwrap(),
            tape.constant(l1.clone()).unwrap(),
            tape.constant(l2.clone()).unwrap(),
        ];
        let emb = bn.forward(&mut tape, &nodes, Bind::Frozen).unwrap();

        let relu = |v: Vec<f32>| v.into_iter().map(|x: f32| x.max(0.0)).collect::<Vec<_>>();
        let (d0a, _, _) = kernels::conv2d(
            l0.data(),
            bn.chains[0][0].w.data(),
            bn.chains[0][0].b.data(),
            16,
            8,
            8,
            32,
            2,
        );
        let d0a = relu(d0a);
        let (d0b, _, _) = kernels::conv2d(
            &d0a,
            bn.chains[0][1].w.data(),
            bn.chains[0][1].b.data(),
            32,
            4,
            4,
            64,
            2,
        );
        let d0b = relu(d0b);
        let (d1, _, _) = kernels::conv2d(
            l1.data(),
            bn.chains[1][0].w.data(),
            bn.chains[1][0].b.data(),
            32,
            4,
            4,
            64,
            2,
        );
        let d1 = relu(d1);
        let mut cat = d0b;
        cat.extend_from_slice(&d1);
        cat.extend_from_slice(l2.data());
        // 1x1 fuse per pixel
        let hw = 4;
        let cin = 192;
        let mut want = vec![0.0f32; 64 * hw];
        for p in 0..hw {
            for co in 0..64 {
                let mut acc = bn.fuse_b.data()[co];
                for ci in 0..cin {
                    acc += cat[ci * hw + p] * bn.fuse_w.data()[ci * 64 + co];
                }
                want[co * hw + p] = acc;
            }
        }
        for (a, b) in tape.value(emb).data().iter().zip(want.iter()) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn decoder_mirrors_teacher_shapes_and_is_pure() {
        let dec = DecoderParams::init(&[16, 32, 64], 9);
        let mut tape = Tape::new();
        let emb = tape.constant(gaussian(vec![64, 2, 2], 1.0, 5)).unwrap();
        let levels = dec.forward(&mut tape, emb, Bind::Frozen).unwrap();
        assert_eq!(tape.dims(levels[0]), &[16, 8, 8]);
        assert_eq!(tape.dims(levels[1]), &[32, 4, 4]);
        assert_eq!(tape.dims(levels[2]), &[64, 2, 2]);

        let mut tape2 = Tape::new();
        let emb2 = tape2.constant(gaussian(vec![64, 2, 2], 1.0, 5)).unwrap();
        let levels2 = dec.forward(&mut tape2, emb2, Bind::Frozen).unwrap();
        for (a, b) in levels.iter().zip(&levels2) {
            assert_eq!(tape.value(*a), tape2.value(*b));
        }
    }

    #[test]
    fn zero_embedding_zero_bias_decodes_to_zero() {
        let dec = DecoderParams::init(&[16, 32, 64], 9);
        let mut tape = Tape::new();
        let emb = tape.constant(Tensor::zeros(vec![64, 2, 2])).unwrap();
        let levels = dec.forward(&mut tape, emb, Bind::Frozen).unwrap();
        for l in levels {
            assert!(tape.value(l).data().iter().all(|&v| v == 0.0));
        }
    }
}
