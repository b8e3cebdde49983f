//! Backbone graphs: an explicit layer enumeration over a conv feature
//! extractor, with frozen conv kernels, tunable per-domain BN state, optional
//! depth-wise adaption kernels after selected conv layers, and a neck BN
//! whose output is the retrieval feature.

pub mod arch;

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, Array3, Array4, ArrayView2, ArrayView4};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::bank::snapshot::DomainSnapshot;
use crate::bank::weights::WeightSet;
use crate::bn::{bn_backward, bn_forward_eval, bn_forward_train, BnLayerState, BnTrainCache};
use crate::error::{Error, Result};
use crate::nn::{
    global_avg_pool, global_avg_pool_backward, max_pool, max_pool_backward, relu, relu_backward,
    Conv2d,
};
use crate::sa::{sa_backward, sa_forward_batch, sa_init_identity, SaKernel};

pub use arch::{arch_plan, ArchId, ArchPlan, ConvMeta, LayerKind, LayerSpec, Node, SpatialMeta, Stage};

/// Split of backbone values into frozen (conv kernels) and tunable
/// (BN affine pairs, neck, adaption kernels) sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParameterPartition {
    pub frozen_count: usize,
    pub tunable_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Train,
    Eval,
}

/// Where to insert adaption kernels: every conv layer, whole stages, or an
/// explicit set of conv layer indices from the layer enumeration.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SaPlacement {
    All,
    Stages(BTreeSet<Stage>),
    ConvSpecIndices(BTreeSet<usize>),
}

pub const DEFAULT_SA_KERNEL_SIZE: usize = 5;

#[derive(Clone)]
struct NetState {
    convs: Vec<Conv2d>,
    sa: Vec<Option<SaKernel<f32>>>,
    bns: Vec<BnLayerState>,
    neck: BnLayerState,
}

#[derive(Clone)]
pub struct BackboneGraph {
    plan: ArchPlan,
    state: NetState,
    pristine_bns: Vec<BnLayerState>,
    pristine_neck: BnLayerState,
    sa_placement: BTreeSet<usize>,
}

enum Saved {
    Conv {
        input: Option<Array4<f32>>,
        in_dims: (usize, usize, usize, usize),
    },
    Sa {
        input: Array4<f32>,
    },
    Bn {
        cache: BnTrainCache,
    },
    Relu {
        output: Array4<f32>,
    },
    MaxPool {
        argmax: Vec<u32>,
        in_dims: (usize, usize, usize, usize),
    },
}

/// Activation bookkeeping from one train-mode forward pass.
pub struct Tape {
    nodes: Vec<Saved>,
    gap_in_dims: (usize, usize, usize, usize),
    neck_cache: BnTrainCache,
}

/// Gradients for all tunable tensors, indexed like the graph state. Conv
/// gradients only appear when the caller asked for an unfrozen backward.
pub struct GradSet {
    pub bn: Vec<(Array1<f32>, Array1<f32>)>,
    pub neck: (Array1<f32>, Array1<f32>),
    pub sa: Vec<Option<Array3<f32>>>,
    pub conv: Vec<Option<Array2<f32>>>,
}

/// Build a backbone and partition its values. With a weight source the conv
/// kernels and BN state come from the named arrays; otherwise conv kernels
/// are drawn from a seeded generator. Conv kernels are frozen either way.
pub fn build_and_partition(
    arch_id: &str,
    pretrained: Option<&WeightSet>,
    seed: u64,
) -> Result<(BackboneGraph, ParameterPartition)> {
    let arch: ArchId = arch_id.parse()?;
    let plan = arch_plan(arch);
    let mut convs = Vec::with_capacity(plan.convs.len());
    for (ordinal, meta) in plan.convs.iter().enumerate() {
        let mut conv = Conv2d::new(
            meta.in_channels,
            meta.out_channels,
            meta.kernel,
            meta.stride,
            meta.padding,
        );
        match pretrained {
            Some(ws) => load_conv(&mut conv, ws, meta)?,
            None => init_conv(&mut conv, seed, ordinal),
        }
        convs.push(conv);
    }
    let mut bns: Vec<BnLayerState> = plan
        .bn_channels
        .iter()
        .map(|&c| BnLayerState::new(c))
        .collect();
    let mut neck = BnLayerState::new(plan.feature_dim);
    if let Some(ws) = pretrained {
        for (j, state) in bns.iter_mut().enumerate() {
            load_bn(state, ws, plan.bn_spec_index[j], true)?;
        }
        load_bn(&mut neck, ws, plan.neck_spec_index, false)?;
    }
    let sa = vec![None; plan.convs.len()];
    let graph = BackboneGraph {
        pristine_bns: bns.clone(),
        pristine_neck: neck.clone(),
        state: NetState {
            convs,
            sa,
            bns,
            neck,
        },
        plan,
        sa_placement: BTreeSet::new(),
    };
    let partition = graph.partition();
    Ok((graph, partition))
}

fn init_conv(conv: &mut Conv2d, seed: u64, ordinal: usize) {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(ordinal as u64 + 1));
    let fan_in = conv.in_channels * conv.kernel * conv.kernel;
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    conv.weight.mapv_inplace(|_| rng.random_range(-bound..bound));
}

fn load_conv(conv: &mut Conv2d, ws: &WeightSet, meta: &ConvMeta) -> Result<()> {
    let name = format!("layer{}.weight", meta.spec_index);
    let entry = ws.get(&name)?;
    let expected = vec![meta.out_channels, meta.in_channels, meta.kernel, meta.kernel];
    if entry.shape != expected {
        return Err(Error::ShapeMismatch {
            name,
            expected,
            got: entry.shape.clone(),
        });
    }
    conv.weight = Array2::from_shape_vec(
        (meta.out_channels, meta.in_channels * meta.kernel * meta.kernel),
        entry.data.clone(),
    )
    .expect("validated shape");
    Ok(())
}

fn load_bn(state: &mut BnLayerState, ws: &WeightSet, spec_index: usize, required: bool) -> Result<()> {
    let gamma_name = format!("layer{spec_index}.gamma");
    if !required && !ws.contains(&gamma_name) {
        return Ok(()); // the neck is not part of pre-training; keep defaults
    }
    let fetch = |param: &str| -> Result<Array1<f32>> {
        let name = format!("layer{spec_index}.{param}");
        let entry = ws.get(&name)?;
        if entry.shape != vec![state.channels] {
            return Err(Error::ShapeMismatch {
                name,
                expected: vec![state.channels],
                got: entry.shape.clone(),
            });
        }
        Ok(Array1::from_vec(entry.data.clone()))
    };
    state.gamma = fetch("gamma")?;
    state.beta = fetch("beta")?;
    state.running_mean = fetch("running_mean")?;
    state.running_var = fetch("running_var")?;
    Ok(())
}

impl BackboneGraph {
    pub fn arch(&self) -> ArchId {
        self.plan.arch
    }

    pub fn plan(&self) -> &ArchPlan {
        &self.plan
    }

    pub fn feature_dim(&self) -> usize {
        self.plan.feature_dim
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.plan.specs
    }

    pub fn sa_placement(&self) -> &BTreeSet<usize> {
        &self.sa_placement
    }

    pub fn partition(&self) -> ParameterPartition {
        let frozen_count = self.plan.conv_param_count();
        let sa: usize = self
            .state
            .sa
            .iter()
            .flatten()
            .map(SaKernel::param_count)
            .sum();
        let tunable_count =
            self.plan.bn_affine_count_body() + 2 * self.plan.feature_dim + sa;
        ParameterPartition {
            frozen_count,
            tunable_count,
        }
    }

    /// Insert identity-initialized adaption kernels after the selected conv
    /// layers. Default usage is placement "all" with kernel size 5.
    pub fn insert_sa(mut self, placement: &SaPlacement, kernel_size: usize) -> Result<Self> {
        if kernel_size % 2 == 0 || kernel_size == 0 {
            return Err(Error::EvenKernelSize(kernel_size));
        }
        let selected = selected_conv_ordinals(&self.plan, placement)?;
        for ordinal in selected {
            let channels = self.plan.convs[ordinal].out_channels;
            self.state.sa[ordinal] = Some(sa_init_identity(channels, kernel_size)?);
            self.sa_placement.insert(self.plan.conv_spec_index(ordinal));
        }
        Ok(self)
    }

    pub fn sa_value_count(&self) -> usize {
        self.state
            .sa
            .iter()
            .flatten()
            .map(SaKernel::param_count)
            .sum()
    }

    pub fn bn_states(&self) -> &[BnLayerState] {
        &self.state.bns
    }

    pub fn neck_state(&self) -> &BnLayerState {
        &self.state.neck
    }

    /// Adaption kernels present on this graph, as (conv spec index, kernel).
    pub fn sa_entries(&self) -> Vec<(usize, &SaKernel<f32>)> {
        self.state
            .sa
            .iter()
            .enumerate()
            .filter_map(|(ordinal, k)| {
                k.as_ref()
                    .map(|k| (self.plan.conv_spec_index(ordinal), k))
            })
            .collect()
    }

    pub fn conv_count(&self) -> usize {
        self.state.convs.len()
    }

    pub fn conv_weight(&self, ordinal: usize) -> &Array2<f32> {
        &self.state.convs[ordinal].weight
    }

    /// Overwrite live BN and adaption state from a captured snapshot.
    pub fn apply_snapshot(&mut self, snapshot: &DomainSnapshot) -> Result<()> {
        if snapshot.arch != self.plan.arch {
            return Err(Error::SnapshotMismatch(format!(
                "snapshot arch {} vs graph arch {}",
                snapshot.arch, self.plan.arch
            )));
        }
        let expected_bn = self.plan.bn_count() + 1;
        if snapshot.bn_states.len() != expected_bn {
            return Err(Error::SnapshotMismatch(format!(
                "snapshot has {} BN layers, graph expects {expected_bn}",
                snapshot.bn_states.len()
            )));
        }
        for (j, state) in snapshot.bn_states[..self.plan.bn_count()].iter().enumerate() {
            if state.channels != self.plan.bn_channels[j] {
                return Err(Error::SnapshotMismatch(format!(
                    "BN layer {j} has {} channels, graph expects {}",
                    state.channels, self.plan.bn_channels[j]
                )));
            }
        }
        let neck = snapshot.bn_states.last().expect("length checked");
        if neck.channels != self.plan.feature_dim {
            return Err(Error::SnapshotMismatch(format!(
                "neck has {} channels, graph expects {}",
                neck.channels, self.plan.feature_dim
            )));
        }
        let snap_placement: BTreeSet<usize> =
            snapshot.sa_kernels.iter().map(|(i, _)| *i).collect();
        if snap_placement != self.sa_placement {
            return Err(Error::SnapshotMismatch(format!(
                "snapshot SA placement {snap_placement:?} vs graph {:?}",
                self.sa_placement
            )));
        }
        for (spec_index, kernel) in &snapshot.sa_kernels {
            let ordinal = self
                .plan
                .conv_ordinal_of_spec(*spec_index)
                .ok_or(Error::NotAConvLayer(*spec_index))?;
            if kernel.channels != self.plan.convs[ordinal].out_channels {
                return Err(Error::SnapshotMismatch(format!(
                    "SA kernel at layer {spec_index} has {} channels, conv outputs {}",
                    kernel.channels, self.plan.convs[ordinal].out_channels
                )));
            }
        }

        for (j, state) in snapshot.bn_states[..self.plan.bn_count()].iter().enumerate() {
            self.state.bns[j] = state.clone();
        }
        self.state.neck = neck.clone();
        for (spec_index, kernel) in &snapshot.sa_kernels {
            let ordinal = self.plan.conv_ordinal_of_spec(*spec_index).expect("checked");
            self.state.sa[ordinal] = Some(kernel.clone());
        }
        Ok(())
    }

    /// Return BN to its as-built values and adaption kernels to identity;
    /// the base case when no previous domain exists.
    pub fn reset_adaptation(&mut self) {
        self.state.bns = self.pristine_bns.clone();
        self.state.neck = self.pristine_neck.clone();
        for slot in self.state.sa.iter_mut() {
            if let Some(kernel) = slot {
                *slot = Some(
                    sa_init_identity(kernel.channels, kernel.kernel_size)
                        .expect("validated at insert"),
                );
            }
        }
    }

    fn check_input(&self, x: &ArrayView4<f32>) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if c != 3 {
            return Err(Error::ChannelMismatch {
                expected: 3,
                got: c,
            });
        }
        let (mh, mw) = self.plan.min_input;
        if h < mh || w < mw {
            return Err(Error::InvalidConfig(format!(
                "input {h}x{w} below the architecture minimum {mh}x{mw}"
            )));
        }
        Ok(())
    }

    /// Eval-mode feature extraction: deterministic, state untouched,
    /// features taken after the neck BN.
    pub fn forward_eval(&self, x: &ArrayView4<f32>) -> Result<Array2<f32>> {
        Ok(self.forward_eval_capture(x)?.0)
    }

    /// Eval-mode forward that also returns the final conv-stage activation
    /// (input of the global pool), used for activation heat maps.
    pub fn forward_eval_capture(&self, x: &ArrayView4<f32>) -> Result<(Array2<f32>, Array4<f32>)> {
        self.check_input(x)?;
        let map = self.state.run_eval(&self.plan.nodes, x.to_owned())?;
        let pooled = global_avg_pool(&map.view());
        let (b, d) = pooled.dim();
        let as4 = pooled.into_shape_with_order((b, d, 1, 1)).expect("reshape");
        let neck_out = bn_forward_eval(&self.state.neck, &as4.view())?;
        let features = neck_out.into_shape_with_order((b, d)).expect("reshape");
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("extracted features"));
        }
        Ok((features, map))
    }

    /// Train-mode forward: batch statistics everywhere, running averages
    /// updated, activations taped for the backward pass. Conv inputs are
    /// saved only when conv gradients will be requested.
    pub fn forward_train(
        &mut self,
        x: &ArrayView4<f32>,
        save_conv_inputs: bool,
    ) -> Result<(Array2<f32>, Tape)> {
        self.check_input(x)?;
        let mut saved = Vec::new();
        let map = self.state.run_train(
            &self.plan.nodes,
            x.to_owned(),
            &mut saved,
            save_conv_inputs,
        )?;
        let gap_in_dims = map.dim();
        let pooled = global_avg_pool(&map.view());
        let (b, d) = pooled.dim();
        let as4 = pooled.into_shape_with_order((b, d, 1, 1)).expect("reshape");
        let (neck_out, neck_cache) = bn_forward_train(&mut self.state.neck, &as4.view())?;
        let features = neck_out.into_shape_with_order((b, d)).expect("reshape");
        Ok((
            features,
            Tape {
                nodes: saved,
                gap_in_dims,
                neck_cache,
            },
        ))
    }

    /// Backward pass through the whole graph, consuming the tape.
    pub fn backward(
        &self,
        tape: Tape,
        grad_features: &ArrayView2<f32>,
        want_conv_grads: bool,
    ) -> Result<GradSet> {
        let (b, d) = grad_features.dim();
        let mut grads = GradSet {
            bn: vec![(Array1::zeros(0), Array1::zeros(0)); self.plan.bn_count()],
            neck: (Array1::zeros(0), Array1::zeros(0)),
            sa: vec![None; self.plan.convs.len()],
            conv: vec![None; self.plan.convs.len()],
        };
        let g4 = grad_features
            .to_owned()
            .into_shape_with_order((b, d, 1, 1))
            .expect("reshape");
        let (gx, dgamma, dbeta) = bn_backward(&self.state.neck, &tape.neck_cache, &g4.view());
        grads.neck = (dgamma, dbeta);
        let g2 = gx.into_shape_with_order((b, d)).expect("reshape");
        let g_map = global_avg_pool_backward(&g2.view(), tape.gap_in_dims);
        let mut saved = tape.nodes;
        let _ = self.state.backward_nodes(
            &self.plan.nodes,
            g_map,
            &mut saved,
            &mut grads,
            want_conv_grads,
        )?;
        debug_assert!(saved.is_empty(), "tape not fully consumed");
        Ok(grads)
    }

    /// Push a gradient set through the optimizer. Slot names are stable so
    /// the update order (and therefore the run) is deterministic; conv slots
    /// participate only for the unfrozen baselines.
    pub fn apply_gradients(
        &mut self,
        opt: &mut crate::optim::Adam,
        grads: &GradSet,
        include_conv: bool,
    ) {
        for (j, (dgamma, dbeta)) in grads.bn.iter().enumerate() {
            let state = &mut self.state.bns[j];
            opt.step(
                &format!("bn{j:03}.gamma"),
                state.gamma.as_slice_mut().expect("contiguous"),
                dgamma.as_slice().expect("contiguous"),
            );
            opt.step(
                &format!("bn{j:03}.beta"),
                state.beta.as_slice_mut().expect("contiguous"),
                dbeta.as_slice().expect("contiguous"),
            );
        }
        opt.step(
            "neck.gamma",
            self.state.neck.gamma.as_slice_mut().expect("contiguous"),
            grads.neck.0.as_slice().expect("contiguous"),
        );
        opt.step(
            "neck.beta",
            self.state.neck.beta.as_slice_mut().expect("contiguous"),
            grads.neck.1.as_slice().expect("contiguous"),
        );
        for (i, grad) in grads.sa.iter().enumerate() {
            if let (Some(gw), Some(kernel)) = (grad, self.state.sa[i].as_mut()) {
                opt.step(
                    &format!("sa{i:03}.weight"),
                    kernel.weights.as_slice_mut().expect("contiguous"),
                    gw.as_slice().expect("contiguous"),
                );
            }
        }
        if include_conv {
            for (i, grad) in grads.conv.iter().enumerate() {
                if let Some(gw) = grad {
                    opt.step(
                        &format!("conv{i:03}.weight"),
                        self.state.convs[i].weight.as_slice_mut().expect("contiguous"),
                        gw.as_slice().expect("contiguous"),
                    );
                }
            }
        }
    }

    /// Export everything loadable as a named-array weight set (conv kernels
    /// plus BN state, including the neck).
    pub fn to_weight_set(&self) -> WeightSet {
        let mut ws = WeightSet::new(self.plan.arch.as_str());
        for (ordinal, meta) in self.plan.convs.iter().enumerate() {
            ws.push(
                format!("layer{}.weight", meta.spec_index),
                vec![meta.out_channels, meta.in_channels, meta.kernel, meta.kernel],
                self.state.convs[ordinal].weight.iter().cloned().collect(),
            );
        }
        let push_bn = |ws: &mut WeightSet, spec_index: usize, state: &BnLayerState| {
            let c = state.channels;
            ws.push(format!("layer{spec_index}.gamma"), vec![c], state.gamma.to_vec());
            ws.push(format!("layer{spec_index}.beta"), vec![c], state.beta.to_vec());
            ws.push(
                format!("layer{spec_index}.running_mean"),
                vec![c],
                state.running_mean.to_vec(),
            );
            ws.push(
                format!("layer{spec_index}.running_var"),
                vec![c],
                state.running_var.to_vec(),
            );
        };
        for (j, state) in self.state.bns.iter().enumerate() {
            push_bn(&mut ws, self.plan.bn_spec_index[j], state);
        }
        push_bn(&mut ws, self.plan.neck_spec_index, &self.state.neck);
        ws
    }
}

impl NetState {
    fn run_eval(&self, nodes: &[Node], x: Array4<f32>) -> Result<Array4<f32>> {
        let mut cur = x;
        for node in nodes {
            cur = match node {
                Node::Conv(i) => {
                    let mut y = self.convs[*i].forward(&cur.view());
                    if let Some(kernel) = &self.sa[*i] {
                        y = sa_forward_batch(kernel, &y.view())?;
                    }
                    y
                }
                Node::Bn(j) => bn_forward_eval(&self.bns[*j], &cur.view())?,
                Node::Relu => {
                    let mut y = cur;
                    relu(&mut y);
                    y
                }
                Node::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => max_pool(&cur.view(), *kernel, *stride, *padding).0,
                Node::Residual { body, shortcut } => {
                    let input = cur;
                    let b = self.run_eval(body, input.clone())?;
                    let s = if shortcut.is_empty() {
                        input
                    } else {
                        self.run_eval(shortcut, input)?
                    };
                    b + s
                }
            };
        }
        Ok(cur)
    }

    fn run_train(
        &mut self,
        nodes: &[Node],
        x: Array4<f32>,
        tape: &mut Vec<Saved>,
        save_conv_inputs: bool,
    ) -> Result<Array4<f32>> {
        let mut cur = x;
        for node in nodes {
            cur = match node {
                Node::Conv(i) => {
                    let in_dims = cur.dim();
                    let input = save_conv_inputs.then(|| cur.clone());
                    let mut y = self.convs[*i].forward(&cur.view());
                    tape.push(Saved::Conv { input, in_dims });
                    if let Some(kernel) = &self.sa[*i] {
                        tape.push(Saved::Sa { input: y.clone() });
                        y = sa_forward_batch(kernel, &y.view())?;
                    }
                    y
                }
                Node::Bn(j) => {
                    let (y, cache) = bn_forward_train(&mut self.bns[*j], &cur.view())?;
                    tape.push(Saved::Bn { cache });
                    y
                }
                Node::Relu => {
                    let mut y = cur;
                    relu(&mut y);
                    tape.push(Saved::Relu { output: y.clone() });
                    y
                }
                Node::MaxPool {
                    kernel,
                    stride,
                    padding,
                } => {
                    let in_dims = cur.dim();
                    let (y, argmax) = max_pool(&cur.view(), *kernel, *stride, *padding);
                    tape.push(Saved::MaxPool { argmax, in_dims });
                    y
                }
                Node::Residual { body, shortcut } => {
                    let input = cur;
                    let b = self.run_train(body, input.clone(), tape, save_conv_inputs)?;
                    let s = if shortcut.is_empty() {
                        input
                    } else {
                        self.run_train(shortcut, input, tape, save_conv_inputs)?
                    };
                    b + s
                }
            };
        }
        Ok(cur)
    }

    fn backward_nodes(
        &self,
        nodes: &[Node],
        grad: Array4<f32>,
        tape: &mut Vec<Saved>,
        out: &mut GradSet,
        want_conv_grads: bool,
    ) -> Result<Array4<f32>> {
        let mut g = grad;
        for node in nodes.iter().rev() {
            g = match node {
                Node::Residual { body, shortcut } => {
                    // Forward pushed body saves then shortcut saves, so the
                    // shortcut must unwind first.
                    let gs = if shortcut.is_empty() {
                        g.clone()
                    } else {
                        self.backward_nodes(shortcut, g.clone(), tape, out, want_conv_grads)?
                    };
                    let gb = self.backward_nodes(body, g, tape, out, want_conv_grads)?;
                    gb + gs
                }
                Node::Relu => {
                    let Some(Saved::Relu { output }) = tape.pop() else {
                        unreachable!("tape out of sync at relu");
                    };
                    let mut gg = g;
                    relu_backward(&mut gg, &output);
                    gg
                }
                Node::MaxPool { .. } => {
                    let Some(Saved::MaxPool { argmax, in_dims }) = tape.pop() else {
                        unreachable!("tape out of sync at max pool");
                    };
                    max_pool_backward(&g.view(), &argmax, in_dims)
                }
                Node::Bn(j) => {
                    let Some(Saved::Bn { cache }) = tape.pop() else {
                        unreachable!("tape out of sync at bn");
                    };
                    let (gx, dgamma, dbeta) = bn_backward(&self.bns[*j], &cache, &g.view());
                    out.bn[*j] = (dgamma, dbeta);
                    gx
                }
                Node::Conv(i) => {
                    let mut gg = g;
                    if let Some(kernel) = &self.sa[*i] {
                        let Some(Saved::Sa { input }) = tape.pop() else {
                            unreachable!("tape out of sync at sa");
                        };
                        let (gw, gin) = sa_backward(kernel, &input.view(), &gg.view())?;
                        out.sa[*i] = Some(gw);
                        gg = gin;
                    }
                    let Some(Saved::Conv { input, in_dims }) = tape.pop() else {
                        unreachable!("tape out of sync at conv");
                    };
                    if want_conv_grads {
                        let input = input.expect("conv inputs saved when grads requested");
                        out.conv[*i] =
                            Some(self.convs[*i].backward_weights(&input.view(), &gg.view()));
                    }
                    self.convs[*i].backward_input(&gg.view(), in_dims)
                }
            };
        }
        Ok(g)
    }
}

/// Resolve a placement selection to conv ordinals within a plan.
pub fn selected_conv_ordinals(plan: &ArchPlan, placement: &SaPlacement) -> Result<Vec<usize>> {
    match placement {
        SaPlacement::All => Ok((0..plan.convs.len()).collect()),
        SaPlacement::Stages(stages) => Ok(plan
            .convs
            .iter()
            .enumerate()
            .filter(|(_, c)| stages.contains(&c.stage))
            .map(|(i, _)| i)
            .collect()),
        SaPlacement::ConvSpecIndices(indices) => {
            let mut ordinals = Vec::with_capacity(indices.len());
            for &spec_index in indices {
                let ordinal = plan
                    .conv_ordinal_of_spec(spec_index)
                    .ok_or(Error::NotAConvLayer(spec_index))?;
                ordinals.push(ordinal);
            }
            Ok(ordinals)
        }
    }
}

/// Spec-level entry point: apply a snapshot, then extract features in the
/// requested mode. Train mode updates the live BN running statistics.
pub fn extract_features(
    graph: &mut BackboneGraph,
    images: &ArrayView4<f32>,
    snapshot: &DomainSnapshot,
    mode: ForwardMode,
) -> Result<Array2<f32>> {
    graph.apply_snapshot(snapshot)?;
    match mode {
        ForwardMode::Eval => graph.forward_eval(images),
        ForwardMode::Train => graph.forward_train(images, false).map(|(f, _)| f),
    }
}

/// Convenience for tests and tools: eval features for an applied graph.
pub fn eval_features(graph: &BackboneGraph, images: &ArrayView4<f32>) -> Result<Array2<f32>> {
    graph.forward_eval(images)
}

pub fn features_close(a: &ArrayView2<f32>, b: &ArrayView2<f32>, tol: f32) -> bool {
    a.dim() == b.dim()
        && a.iter()
            .zip(b.iter())
            .all(|(x, y)| (x - y).abs() <= tol)
}
