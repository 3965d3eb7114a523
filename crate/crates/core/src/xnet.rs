//! The cross-domain network: N dataset-specific analysis front-ends, one
//! shared trunk, N dataset-specific classifier heads.
//!
//! Every domain stream runs nine weighted stages: the three-branch filter
//! bank (counted as one stage), the shared 1x1 layer, four residual-module
//! convolutions, and the three head layers. All spatial mixing happens in
//! the bank; everything after it is 1x1, so the net stays fully
//! convolutional and can run on whole images as well as on P-by-P patches.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::tensor::{read_record, write_record};
use crate::autodiff::{Tape, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::hsdata::DomainSpec;
use crate::mix_seed;

/// Batch norm epsilon.
pub const BN_EPS: f32 = 1e-5;
/// Fraction of the old running statistic kept per update.
pub const BN_KEEP: f64 = 0.9;

/// Default number of filters per layer.
pub const DEFAULT_WIDTH: usize = 128;

const RES_MODULES: usize = 2;

#[derive(Debug, Clone)]
pub struct ConvLayer {
    /// Kernel [co, ci, kh, kw].
    pub kernel: Tensor<f32>,
    pub pad: usize,
}

/// Batch norm affine parameters plus running statistics for eval.
#[derive(Debug, Clone)]
pub struct BnLayer {
    pub gamma: Tensor<f32>,
    pub beta: Tensor<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    /// How many batches have fed the running statistics. A fresh layer
    /// evaluates with the neutral (0, 1) initialization.
    pub updates: u64,
}

impl BnLayer {
    fn new(channels: usize) -> Self {
        BnLayer {
            gamma: Tensor::full(vec![channels], 1.0),
            beta: Tensor::zeros(vec![channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            updates: 0,
        }
    }

    /// Fold one batch's statistics into the running estimates.
    pub fn update(&mut self, mean: &[f32], var: &[f32]) {
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = (BN_KEEP * *r as f64 + (1.0 - BN_KEEP) * b as f64) as f32;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = (BN_KEEP * *r as f64 + (1.0 - BN_KEEP) * b as f64) as f32;
        }
        self.updates += 1;
    }

    fn stats(&self) -> (&[f32], &[f32]) {
        (&self.running_mean, &self.running_var)
    }
}

/// Multi-scale analysis bank: 1x1, 3x3, and 5x5 branches whose outputs are
/// concatenated and jointly normalized.
#[derive(Debug, Clone)]
pub struct FrontEnd {
    pub conv1: ConvLayer,
    pub conv3: ConvLayer,
    pub conv5: ConvLayer,
    pub bn1: BnLayer,
}

/// One residual module: conv+BN+ReLU, conv+BN, add skip, ReLU after the add.
#[derive(Debug, Clone)]
pub struct ResModule {
    pub conv_a: ConvLayer,
    pub bn_a: BnLayer,
    pub conv_b: ConvLayer,
    pub bn_b: BnLayer,
}

/// Layers shared by every domain stream.
#[derive(Debug, Clone)]
pub struct Trunk {
    pub conv2: ConvLayer,
    pub bn2: BnLayer,
    pub res: Vec<ResModule>,
}

/// Dataset-specific classifier: two 1x1 layers and the logit layer, which
/// has no norm and no activation.
#[derive(Debug, Clone)]
pub struct Head {
    pub conv7: ConvLayer,
    pub bn7: BnLayer,
    pub conv8: ConvLayer,
    pub bn8: BnLayer,
    pub conv9: ConvLayer,
}

#[derive(Debug, Clone)]
pub struct CrossDomainNet {
    width: usize,
    specs: Vec<DomainSpec>,
    pub fronts: Vec<FrontEnd>,
    pub trunk: Trunk,
    pub heads: Vec<Head>,
}

/// Which parameters to enumerate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Partition {
    /// Trunk only.
    Shared,
    /// Front-end and head of one domain.
    Domain(usize),
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Identifies one batch norm layer for running-stat updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnId {
    FrontBn1(usize),
    TrunkBn2,
    /// (module index, 0 = first BN, 1 = pre-skip BN)
    TrunkRes(usize, usize),
    HeadBn7(usize),
    HeadBn8(usize),
}

/// Tape handles produced by one domain stream's forward pass.
pub struct StreamGraph {
    /// Full-map logits [M, C_d, P, P].
    pub logits_map: ValueId,
    /// Center-pixel logits [M, C_d].
    pub logits: ValueId,
    /// Trainable leaves in stable order (front, trunk, head); empty in eval.
    pub params: Vec<(String, ValueId)>,
    /// Batch norm nodes in forward order, for running-stat updates.
    pub bn_nodes: Vec<(BnId, ValueId)>,
}

fn gaussian_kernel(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor<f32> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| (rng.sample::<f64, _>(StandardNormal) * std) as f32)
        .collect();
    Tensor::new(shape, data).expect("shape fixed by caller")
}

impl CrossDomainNet {
    /// Build with the default width of 128 filters per layer.
    pub fn build(specs: &[DomainSpec], seed: u64) -> Result<Self> {
        Self::build_with_width(specs, DEFAULT_WIDTH, seed)
    }

    /// Build with a custom filter count. Bank convolutions, the first shared
    /// layer, and the logit layer draw from N(0, 0.01^2); everything else
    /// from N(0, 0.005^2). BN starts at gamma 1, beta 0.
    pub fn build_with_width(specs: &[DomainSpec], width: usize, seed: u64) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Invalid("need at least one domain".into()));
        }
        if width == 0 {
            return Err(Error::Invalid("width must be positive".into()));
        }
        for s in specs {
            s.validate()?;
        }
        for i in 0..specs.len() {
            for j in i + 1..specs.len() {
                if specs[i].name == specs[j].name {
                    return Err(Error::Invalid(format!(
                        "duplicate domain name {:?}",
                        specs[i].name
                    )));
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0));
        let w = width;
        let fronts = specs
            .iter()
            .map(|s| {
                let b = s.bands;
                FrontEnd {
                    conv1: ConvLayer {
                        kernel: gaussian_kernel(&mut rng, vec![w, b, 1, 1], 0.01),
                        pad: 0,
                    },
                    conv3: ConvLayer {
                        kernel: gaussian_kernel(&mut rng, vec![w, b, 3, 3], 0.01),
                        pad: 1,
                    },
                    conv5: ConvLayer {
                        kernel: gaussian_kernel(&mut rng, vec![w, b, 5, 5], 0.01),
                        pad: 2,
                    },
                    bn1: BnLayer::new(3 * w),
                }
            })
            .collect();
        let trunk = Trunk {
            conv2: ConvLayer {
                kernel: gaussian_kernel(&mut rng, vec![w, 3 * w, 1, 1], 0.01),
                pad: 0,
            },
            bn2: BnLayer::new(w),
            res: (0..RES_MODULES)
                .map(|_| ResModule {
                    conv_a: ConvLayer {
                        kernel: gaussian_kernel(&mut rng, vec![w, w, 1, 1], 0.005),
                        pad: 0,
                    },
                    bn_a: BnLayer::new(w),
                    conv_b: ConvLayer {
                        kernel: gaussian_kernel(&mut rng, vec![w, w, 1, 1], 0.005),
                        pad: 0,
                    },
                    bn_b: BnLayer::new(w),
                })
                .collect(),
        };
        let heads = specs
            .iter()
            .map(|s| Head {
                conv7: ConvLayer {
                    kernel: gaussian_kernel(&mut rng, vec![w, w, 1, 1], 0.005),
                    pad: 0,
                },
                bn7: BnLayer::new(w),
                conv8: ConvLayer {
                    kernel: gaussian_kernel(&mut rng, vec![w, w, 1, 1], 0.005),
                    pad: 0,
                },
                bn8: BnLayer::new(w),
                conv9: ConvLayer {
                    kernel: gaussian_kernel(&mut rng, vec![s.classes(), w, 1, 1], 0.01),
                    pad: 0,
                },
            })
            .collect();
        Ok(CrossDomainNet {
            width,
            specs: specs.to_vec(),
            fronts,
            trunk,
            heads,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn domains(&self) -> usize {
        self.specs.len()
    }

    pub fn specs(&self) -> &[DomainSpec] {
        &self.specs
    }

    pub fn domain_index(&self, name: &str) -> Result<usize> {
        self.specs
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::UnknownDomain(name.into()))
    }

    fn check_domain(&self, domain: usize) -> Result<()> {
        if domain >= self.specs.len() {
            return Err(Error::UnknownDomain(format!("#{domain}")));
        }
        Ok(())
    }

    pub fn bn_layer(&self, id: BnId) -> &BnLayer {
        match id {
            BnId::FrontBn1(d) => &self.fronts[d].bn1,
            BnId::TrunkBn2 => &self.trunk.bn2,
            BnId::TrunkRes(m, 0) => &self.trunk.res[m].bn_a,
            BnId::TrunkRes(m, _) => &self.trunk.res[m].bn_b,
            BnId::HeadBn7(d) => &self.heads[d].bn7,
            BnId::HeadBn8(d) => &self.heads[d].bn8,
        }
    }

    pub fn bn_layer_mut(&mut self, id: BnId) -> &mut BnLayer {
        match id {
            BnId::FrontBn1(d) => &mut self.fronts[d].bn1,
            BnId::TrunkBn2 => &mut self.trunk.bn2,
            BnId::TrunkRes(m, 0) => &mut self.trunk.res[m].bn_a,
            BnId::TrunkRes(m, _) => &mut self.trunk.res[m].bn_b,
            BnId::HeadBn7(d) => &mut self.heads[d].bn7,
            BnId::HeadBn8(d) => &mut self.heads[d].bn8,
        }
    }

    /// Batch norm layers of one domain stream in forward order, with their
    /// checkpoint name prefixes.
    pub fn stream_bn_ids(&self, domain: usize) -> Vec<(String, BnId)> {
        let mut out = vec![(format!("front{domain}.bn1"), BnId::FrontBn1(domain))];
        out.push(("trunk.bn2".into(), BnId::TrunkBn2));
        for m in 0..self.trunk.res.len() {
            out.push((format!("trunk.res{m}.bn_a"), BnId::TrunkRes(m, 0)));
            out.push((format!("trunk.res{m}.bn_b"), BnId::TrunkRes(m, 1)));
        }
        out.push((format!("head{domain}.bn7"), BnId::HeadBn7(domain)));
        out.push((format!("head{domain}.bn8"), BnId::HeadBn8(domain)));
        out
    }

    /// Every batch norm layer once, in checkpoint order.
    pub fn all_bn_ids(&self) -> Vec<(String, BnId)> {
        let mut out: Vec<(String, BnId)> = (0..self.domains())
            .map(|d| (format!("front{d}.bn1"), BnId::FrontBn1(d)))
            .collect();
        out.push(("trunk.bn2".into(), BnId::TrunkBn2));
        for m in 0..self.trunk.res.len() {
            out.push((format!("trunk.res{m}.bn_a"), BnId::TrunkRes(m, 0)));
            out.push((format!("trunk.res{m}.bn_b"), BnId::TrunkRes(m, 1)));
        }
        for d in 0..self.domains() {
            out.push((format!("head{d}.bn7"), BnId::HeadBn7(d)));
            out.push((format!("head{d}.bn8"), BnId::HeadBn8(d)));
        }
        out
    }

    /// Parameters in stable order as (name, tensor, decay_exempt); BN affine
    /// parameters are exempt from weight decay.
    pub fn params(&self, partition: Partition) -> Vec<(String, &Tensor<f32>, bool)> {
        let mut out = Vec::new();
        let domains: Vec<usize> = match partition {
            Partition::Shared => Vec::new(),
            Partition::Domain(d) => vec![d],
            Partition::All => (0..self.domains()).collect(),
        };
        for &d in &domains {
            let f = &self.fronts[d];
            out.push((format!("front{d}.conv1.kernel"), &f.conv1.kernel, false));
            out.push((format!("front{d}.conv3.kernel"), &f.conv3.kernel, false));
            out.push((format!("front{d}.conv5.kernel"), &f.conv5.kernel, false));
            out.push((format!("front{d}.bn1.gamma"), &f.bn1.gamma, true));
            out.push((format!("front{d}.bn1.beta"), &f.bn1.beta, true));
        }
        if matches!(partition, Partition::Shared | Partition::All) {
            let t = &self.trunk;
            out.push(("trunk.conv2.kernel".into(), &t.conv2.kernel, false));
            out.push(("trunk.bn2.gamma".into(), &t.bn2.gamma, true));
            out.push(("trunk.bn2.beta".into(), &t.bn2.beta, true));
            for (m, r) in t.res.iter().enumerate() {
                out.push((format!("trunk.res{m}.conv_a.kernel"), &r.conv_a.kernel, false));
                out.push((format!("trunk.res{m}.bn_a.gamma"), &r.bn_a.gamma, true));
                out.push((format!("trunk.res{m}.bn_a.beta"), &r.bn_a.beta, true));
                out.push((format!("trunk.res{m}.conv_b.kernel"), &r.conv_b.kernel, false));
                out.push((format!("trunk.res{m}.bn_b.gamma"), &r.bn_b.gamma, true));
                out.push((format!("trunk.res{m}.bn_b.beta"), &r.bn_b.beta, true));
            }
        }
        for &d in &domains {
            let h = &self.heads[d];
            out.push((format!("head{d}.conv7.kernel"), &h.conv7.kernel, false));
            out.push((format!("head{d}.bn7.gamma"), &h.bn7.gamma, true));
            out.push((format!("head{d}.bn7.beta"), &h.bn7.beta, true));
            out.push((format!("head{d}.conv8.kernel"), &h.conv8.kernel, false));
            out.push((format!("head{d}.bn8.gamma"), &h.bn8.gamma, true));
            out.push((format!("head{d}.bn8.beta"), &h.bn8.beta, true));
            out.push((format!("head{d}.conv9.kernel"), &h.conv9.kernel, false));
        }
        out
    }

    /// Mutable variant of [`params`](Self::params), same order.
    pub fn params_mut(&mut self, partition: Partition) -> Vec<(String, &mut Tensor<f32>, bool)> {
        let mut out: Vec<(String, &mut Tensor<f32>, bool)> = Vec::new();
        let all_domains = self.domains();
        let domains: Vec<usize> = match partition {
            Partition::Shared => Vec::new(),
            Partition::Domain(d) => vec![d],
            Partition::All => (0..all_domains).collect(),
        };
        // split borrows so fronts, trunk, and heads can be walked independently
        let CrossDomainNet {
            fronts,
            trunk,
            heads,
            ..
        } = self;
        let mut front_refs: Vec<Option<&mut FrontEnd>> = fronts.iter_mut().map(Some).collect();
        let mut head_refs: Vec<Option<&mut Head>> = heads.iter_mut().map(Some).collect();
        for &d in &domains {
            let f = front_refs[d].take().expect("domain visited once");
            out.push((format!("front{d}.conv1.kernel"), &mut f.conv1.kernel, false));
            out.push((format!("front{d}.conv3.kernel"), &mut f.conv3.kernel, false));
            out.push((format!("front{d}.conv5.kernel"), &mut f.conv5.kernel, false));
            out.push((format!("front{d}.bn1.gamma"), &mut f.bn1.gamma, true));
            out.push((format!("front{d}.bn1.beta"), &mut f.bn1.beta, true));
        }
        if matches!(partition, Partition::Shared | Partition::All) {
            out.push(("trunk.conv2.kernel".into(), &mut trunk.conv2.kernel, false));
            out.push(("trunk.bn2.gamma".into(), &mut trunk.bn2.gamma, true));
            out.push(("trunk.bn2.beta".into(), &mut trunk.bn2.beta, true));
            for (m, r) in trunk.res.iter_mut().enumerate() {
                out.push((format!("trunk.res{m}.conv_a.kernel"), &mut r.conv_a.kernel, false));
                out.push((format!("trunk.res{m}.bn_a.gamma"), &mut r.bn_a.gamma, true));
                out.push((format!("trunk.res{m}.bn_a.beta"), &mut r.bn_a.beta, true));
                out.push((format!("trunk.res{m}.conv_b.kernel"), &mut r.conv_b.kernel, false));
                out.push((format!("trunk.res{m}.bn_b.gamma"), &mut r.bn_b.gamma, true));
                out.push((format!("trunk.res{m}.bn_b.beta"), &mut r.bn_b.beta, true));
            }
        }
        for &d in &domains {
            let h = head_refs[d].take().expect("domain visited once");
            out.push((format!("head{d}.conv7.kernel"), &mut h.conv7.kernel, false));
            out.push((format!("head{d}.bn7.gamma"), &mut h.bn7.gamma, true));
            out.push((format!("head{d}.bn7.beta"), &mut h.bn7.beta, true));
            out.push((format!("head{d}.conv8.kernel"), &mut h.conv8.kernel, false));
            out.push((format!("head{d}.bn8.gamma"), &mut h.bn8.gamma, true));
            out.push((format!("head{d}.bn8.beta"), &mut h.bn8.beta, true));
            out.push((format!("head{d}.conv9.kernel"), &mut h.conv9.kernel, false));
        }
        out
    }

    pub fn param_names(&self, partition: Partition) -> Vec<String> {
        self.params(partition).into_iter().map(|(n, _, _)| n).collect()
    }

    /// Total element count of a partition.
    pub fn param_count(&self, partition: Partition) -> usize {
        self.params(partition).iter().map(|(_, t, _)| t.numel()).sum()
    }

    fn leaf(
        tape: &mut Tape<f32>,
        mode: Mode,
        params: &mut Vec<(String, ValueId)>,
        name: String,
        tensor: &Tensor<f32>,
    ) -> Result<ValueId> {
        match mode {
            Mode::Train => {
                let mut t = tensor.clone();
                t.enable_grad();
                let id = tape.leaf(t)?;
                params.push((name, id));
                Ok(id)
            }
            Mode::Eval => tape.constant(tensor.clone()),
        }
    }

    fn bn_op(
        &self,
        tape: &mut Tape<f32>,
        mode: Mode,
        params: &mut Vec<(String, ValueId)>,
        bn_nodes: &mut Vec<(BnId, ValueId)>,
        prefix: &str,
        id: BnId,
        x: ValueId,
    ) -> Result<ValueId> {
        let layer = self.bn_layer(id);
        let gamma = Self::leaf(tape, mode, params, format!("{prefix}.gamma"), &layer.gamma)?;
        let beta = Self::leaf(tape, mode, params, format!("{prefix}.beta"), &layer.beta)?;
        let stats = match mode {
            Mode::Train => None,
            Mode::Eval => Some(layer.stats()),
        };
        let out = tape.batchnorm(x, gamma, beta, stats, BN_EPS)?;
        if mode == Mode::Train {
            bn_nodes.push((id, out));
        }
        Ok(out)
    }

    /// Run one domain stream on `batch` [M, B_d, P, P], recording it on
    /// `tape`. In train mode the parameters become trainable leaves and
    /// batch statistics are recorded; in eval mode running statistics are
    /// used and nothing is trainable.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<f32>,
        domain: usize,
        batch: &Tensor<f32>,
        mode: Mode,
    ) -> Result<StreamGraph> {
        self.check_domain(domain)?;
        let spec = &self.specs[domain];
        let shape = batch.shape();
        if shape.len() != 4 || shape[1] != spec.bands {
            return Err(Error::Shape(format!(
                "domain {} expects [M,{},P,P] input, got {shape:?}",
                spec.name, spec.bands
            )));
        }
        let mut params = Vec::new();
        let mut bn_nodes = Vec::new();
        let x = tape.constant(batch.clone())?;

        // stage 1: multi-scale bank
        let f = &self.fronts[domain];
        let k1 = Self::leaf(tape, mode, &mut params, format!("front{domain}.conv1.kernel"), &f.conv1.kernel)?;
        let k3 = Self::leaf(tape, mode, &mut params, format!("front{domain}.conv3.kernel"), &f.conv3.kernel)?;
        let k5 = Self::leaf(tape, mode, &mut params, format!("front{domain}.conv5.kernel"), &f.conv5.kernel)?;
        let b1 = tape.conv2d(x, k1, f.conv1.pad)?;
        let b3 = tape.conv2d(x, k3, f.conv3.pad)?;
        let b5 = tape.conv2d(x, k5, f.conv5.pad)?;
        let cat = tape.concat_channels(&[b1, b3, b5])?;
        let n1 = self.bn_op(
            tape,
            mode,
            &mut params,
            &mut bn_nodes,
            &format!("front{domain}.bn1"),
            BnId::FrontBn1(domain),
            cat,
        )?;
        let mut t = tape.relu(n1)?;

        // stage 2: first shared layer
        let k2 = Self::leaf(tape, mode, &mut params, "trunk.conv2.kernel".into(), &self.trunk.conv2.kernel)?;
        let c2 = tape.conv2d(t, k2, self.trunk.conv2.pad)?;
        let n2 = self.bn_op(tape, mode, &mut params, &mut bn_nodes, "trunk.bn2", BnId::TrunkBn2, c2)?;
        t = tape.relu(n2)?;

        // stages 3-6: shared residual modules
        for (m, r) in self.trunk.res.iter().enumerate() {
            let ka = Self::leaf(tape, mode, &mut params, format!("trunk.res{m}.conv_a.kernel"), &r.conv_a.kernel)?;
            let ca = tape.conv2d(t, ka, r.conv_a.pad)?;
            let na = self.bn_op(
                tape,
                mode,
                &mut params,
                &mut bn_nodes,
                &format!("trunk.res{m}.bn_a"),
                BnId::TrunkRes(m, 0),
                ca,
            )?;
            let aa = tape.relu(na)?;
            let kb = Self::leaf(tape, mode, &mut params, format!("trunk.res{m}.conv_b.kernel"), &r.conv_b.kernel)?;
            let cb = tape.conv2d(aa, kb, r.conv_b.pad)?;
            let nb = self.bn_op(
                tape,
                mode,
                &mut params,
                &mut bn_nodes,
                &format!("trunk.res{m}.bn_b"),
                BnId::TrunkRes(m, 1),
                cb,
            )?;
            let sum = tape.add(nb, t)?;
            t = tape.relu(sum)?;
        }

        // stages 7-9: classifier head
        let h = &self.heads[domain];
        let k7 = Self::leaf(tape, mode, &mut params, format!("head{domain}.conv7.kernel"), &h.conv7.kernel)?;
        let c7 = tape.conv2d(t, k7, h.conv7.pad)?;
        let n7 = self.bn_op(
            tape,
            mode,
            &mut params,
            &mut bn_nodes,
            &format!("head{domain}.bn7"),
            BnId::HeadBn7(domain),
            c7,
        )?;
        t = tape.relu(n7)?;
        let k8 = Self::leaf(tape, mode, &mut params, format!("head{domain}.conv8.kernel"), &h.conv8.kernel)?;
        let c8 = tape.conv2d(t, k8, h.conv8.pad)?;
        let n8 = self.bn_op(
            tape,
            mode,
            &mut params,
            &mut bn_nodes,
            &format!("head{domain}.bn8"),
            BnId::HeadBn8(domain),
            c8,
        )?;
        t = tape.relu(n8)?;
        let k9 = Self::leaf(tape, mode, &mut params, format!("head{domain}.conv9.kernel"), &h.conv9.kernel)?;
        let logits_map = tape.conv2d(t, k9, h.conv9.pad)?;
        let logits = tape.center_pixel(logits_map)?;
        Ok(StreamGraph {
            logits_map,
            logits,
            params,
            bn_nodes,
        })
    }

    /// Center-pixel logits [M, C_d] for a batch; builds a throwaway tape.
    pub fn forward(&self, domain: usize, batch: &Tensor<f32>, mode: Mode) -> Result<Tensor<f32>> {
        let mut tape = Tape::new();
        let g = self.forward_graph(&mut tape, domain, batch, mode)?;
        Ok(tape.value(g.logits)?.clone())
    }

    /// Full-map logits for an arbitrary [M, B_d, H, W] input, eval mode.
    /// The spatial extent is preserved; used for whole-image inference.
    pub fn forward_map(&self, domain: usize, image: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_domain(domain)?;
        let spec = &self.specs[domain];
        let shape = image.shape();
        if shape.len() != 4 || shape[1] != spec.bands {
            return Err(Error::Shape(format!(
                "domain {} expects [M,{},H,W] input, got {shape:?}",
                spec.name, spec.bands
            )));
        }
        let mut tape = Tape::new();
        let mut params = Vec::new();
        let mut bn_nodes = Vec::new();
        let mode = Mode::Eval;
        let x = tape.constant(image.clone())?;
        let f = &self.fronts[domain];
        let k1 = Self::leaf(&mut tape, mode, &mut params, String::new(), &f.conv1.kernel)?;
        let k3 = Self::leaf(&mut tape, mode, &mut params, String::new(), &f.conv3.kernel)?;
        let k5 = Self::leaf(&mut tape, mode, &mut params, String::new(), &f.conv5.kernel)?;
        let b1 = tape.conv2d(x, k1, f.conv1.pad)?;
        let b3 = tape.conv2d(x, k3, f.conv3.pad)?;
        let b5 = tape.conv2d(x, k5, f.conv5.pad)?;
        let cat = tape.concat_channels(&[b1, b3, b5])?;
        let n1 = self.bn_op(&mut tape, mode, &mut params, &mut bn_nodes, "", BnId::FrontBn1(domain), cat)?;
        let mut t = tape.relu(n1)?;
        let k2 = Self::leaf(&mut tape, mode, &mut params, String::new(), &self.trunk.conv2.kernel)?;
        let c2 = tape.conv2d(t, k2, self.trunk.conv2.pad)?;
        let n2 = self.bn_op(&mut tape, mode, &mut params, &mut bn_nodes, "", BnId::TrunkBn2, c2)?;
        t = tape.relu(n2)?;
        for (m, r) in self.trunk.res.iter().enumerate() {
            let ka = Self::leaf(&mut tape, mode, &mut params, String::new(), &r.conv_a.kernel)?;
            let ca = tape.conv2d(t, ka, r.conv_a.pad)?;
            let na = self.bn_op(&mut tape, mode, &mut params, &mut bn_nodes, "", BnId::TrunkRes(m, 0), ca)?;
            let aa = tape.relu(na)?;
            let kb = Self::leaf(&mut tape, mode, &mut params, String::new(), &r.conv_b.kernel)?;
            let cb = tape.conv2d(aa, kb, r.conv_b.pad)?;
            let nb = self.bn_op(&mut tape, mode, &mut params, &mut bn_nodes, "", BnId::TrunkRes(m, 1), cb)?;
            let sum = tape.add(nb, t)?;
            t = tape.relu(sum)?;
        }
        let h = &self.heads[domain];
        let k7 = Self::leaf(&mut tape, mode, &mut params, String::new(), &h.conv7.kernel)?;
        let c7 = tape.conv2d(t, k7, h.conv7.pad)?;
        let n7 = self.bn_op(&mut tape, mode, &mut params, &mut bn_nodes, "", BnId::HeadBn7(domain), c7)?;
        t = tape.relu(n7)?;
        let k8 = Self::leaf(&mut tape, mode, &mut params, String::new(), &h.conv8.kernel)?;
        let c8 = tape.conv2d(t, k8, h.conv8.pad)?;
        let n8 = self.bn_op(&mut tape, mode, &mut params, &mut bn_nodes, "", BnId::HeadBn8(domain), c8)?;
        t = tape.relu(n8)?;
        let k9 = Self::leaf(&mut tape, mode, &mut params, String::new(), &h.conv9.kernel)?;
        let logits_map = tape.conv2d(t, k9, h.conv9.pad)?;
        Ok(tape.value(logits_map)?.clone())
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    width: usize,
    specs: Vec<DomainSpec>,
    /// Update counters per BN layer, in `all_bn_ids` order.
    bn_updates: Vec<u64>,
}

const MAGIC: &[u8; 4] = b"XDNC";
const VERSION: u32 = 1;

pub fn save_checkpoint(net: &CrossDomainNet, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let bn_ids = net.all_bn_ids();
    let meta = CheckpointMeta {
        width: net.width,
        specs: net.specs.clone(),
        bn_updates: bn_ids.iter().map(|&(_, id)| net.bn_layer(id).updates).collect(),
    };
    let meta_bytes = serde_json::to_vec(&meta)?;
    w.write_all(&(meta_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&meta_bytes)?;
    let params = net.params(Partition::All);
    let n_records = params.len() + 2 * bn_ids.len();
    w.write_all(&(n_records as u32).to_le_bytes())?;
    for (name, tensor, _) in &params {
        write_record(&mut w, name, tensor)?;
    }
    for (prefix, id) in &bn_ids {
        let layer = net.bn_layer(*id);
        let c = layer.running_mean.len();
        write_record(
            &mut w,
            &format!("{prefix}.running_mean"),
            &Tensor::new(vec![c], layer.running_mean.clone())?,
        )?;
        write_record(
            &mut w,
            &format!("{prefix}.running_var"),
            &Tensor::new(vec![c], layer.running_var.clone())?,
        )?;
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<CrossDomainNet> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = read_u32(&mut r)? as usize;
    if meta_len > 1 << 24 {
        return Err(Error::Format(format!("checkpoint metadata length {meta_len}")));
    }
    let mut meta_bytes = vec![0u8; meta_len];
    r.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)?;
    let n_records = read_u32(&mut r)? as usize;
    let mut records: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
    for _ in 0..n_records {
        let (name, tensor) = read_record(&mut r)?;
        if records.insert(name.clone(), tensor).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name:?}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after tensor table".into()));
    }

    let mut net = CrossDomainNet::build_with_width(&meta.specs, meta.width, 0)?;
    let bn_ids = net.all_bn_ids();
    if meta.bn_updates.len() != bn_ids.len() {
        return Err(Error::Format(format!(
            "{} BN update counters for {} layers",
            meta.bn_updates.len(),
            bn_ids.len()
        )));
    }
    for (name, tensor, _) in net.params_mut(Partition::All) {
        let rec = records
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name:?}")))?;
        if rec.shape() != tensor.shape() {
            return Err(Error::Shape(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                rec.shape(),
                tensor.shape()
            )));
        }
        *tensor = rec;
    }
    for ((prefix, id), &updates) in bn_ids.iter().zip(&meta.bn_updates) {
        let c = net.bn_layer(*id).running_mean.len();
        for (suffix, which) in [("running_mean", 0), ("running_var", 1)] {
            let name = format!("{prefix}.{suffix}");
            let rec = records
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name:?}")))?;
            if rec.shape() != [c] {
                return Err(Error::Shape(format!(
                    "tensor {name:?} has shape {:?}, expected [{c}]",
                    rec.shape()
                )));
            }
            let layer = net.bn_layer_mut(*id);
            if which == 0 {
                layer.running_mean = rec.data().to_vec();
            } else {
                layer.running_var = rec.data().to_vec();
            }
        }
        net.bn_layer_mut(*id).updates = updates;
    }
    if let Some(name) = records.keys().next() {
        return Err(Error::Format(format!("unexpected tensor {name:?}")));
    }
    Ok(net)
}
