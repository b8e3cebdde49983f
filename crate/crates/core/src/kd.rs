//! The exemplar + logit-distillation comparison baseline, plus the plain
//! fine-tune baseline. Unlike the adaptive method, these train the whole
//! network (conv kernels included) as one evolving model; the distillation
//! variant replays stored exemplars and distills against a frozen copy of
//! the previous step's model and classifier.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneGraph;
use crate::data::{record_to_u8, stack_batch, u8_to_tensor, DatasetSpec};
use crate::error::{Error, Result};
use crate::nn::softmax_rows;
use crate::optim::{Adam, AdamConfig};
use crate::train::{
    augment, config::lr_at_epoch, derive_seed, id_loss_from_logits, pk_sample_epoch,
    ClassifierHead, EpochStats, TrainConfig,
};

#[derive(Debug, Clone)]
pub struct ExemplarEntry {
    /// Resized 8-bit pixels, (H, W, 3); this is what byte accounting counts.
    pub pixels: Arc<Array3<u8>>,
    /// Cumulative 1-based class label across all steps.
    pub global_class: u32,
    pub orig_identity: u32,
    pub domain_ordinal: u32,
}

#[derive(Debug, Clone)]
pub struct ExemplarBuffer {
    pub entries: Vec<ExemplarEntry>,
    pub ids_per_step: usize,
    pub images_per_id: usize,
}

impl ExemplarBuffer {
    pub fn new(ids_per_step: usize, images_per_id: usize) -> Self {
        ExemplarBuffer {
            entries: Vec::new(),
            ids_per_step,
            images_per_id,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn bytes(&self) -> u64 {
        self.entries
            .iter()
            .map(|e| {
                let (h, w, c) = e.pixels.dim();
                (h * w * c) as u64
            })
            .sum()
    }

    /// Persist as a directory of PNG files plus a manifest of
    /// (path, global class, original identity, domain ordinal).
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("path,global_class,orig_identity,domain\n");
        for (i, entry) in self.entries.iter().enumerate() {
            let (h, w, _) = entry.pixels.dim();
            let mut img = image::RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([
                            entry.pixels[[y, x, 0]],
                            entry.pixels[[y, x, 1]],
                            entry.pixels[[y, x, 2]],
                        ]),
                    );
                }
            }
            let rel = format!("exemplar_{i:05}.png");
            img.save(dir.join(&rel))?;
            manifest.push_str(&format!(
                "{rel},{},{},{}\n",
                entry.global_class, entry.orig_identity, entry.domain_ordinal
            ));
        }
        let path = dir.join("exemplars.csv");
        std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
    }
}

/// Seeded random exemplar selection: min(ids_per_step, n_id) identities,
/// images_per_id images each (fewer only when the identity lacks images).
pub fn select_exemplars(
    dataset: &DatasetSpec,
    input: (usize, usize),
    ids_per_step: usize,
    images_per_id: usize,
    seed: u64,
    global_offset: u32,
    domain_ordinal: u32,
) -> Result<Vec<ExemplarEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: Vec<u32> = (1..=dataset.n_train_ids as u32).collect();
    ids.shuffle(&mut rng);
    ids.truncate(ids_per_step.min(ids.len()));
    ids.sort_unstable();
    let mut out = Vec::new();
    for id in ids {
        let mut indices: Vec<usize> = dataset
            .train
            .iter()
            .enumerate()
            .filter(|(_, r)| r.identity == id)
            .map(|(i, _)| i)
            .collect();
        indices.shuffle(&mut rng);
        indices.truncate(images_per_id.min(indices.len()));
        for idx in indices {
            let record = &dataset.train[idx];
            out.push(ExemplarEntry {
                pixels: Arc::new(record_to_u8(record, input.0, input.1)?),
                global_class: global_offset + id,
                orig_identity: record.orig_identity,
                domain_ordinal,
            });
        }
    }
    Ok(out)
}

/// Distillation loss of Eq-style logit matching: cross-entropy between the
/// teacher's and student's softmax outputs, averaged over the batch.
pub fn kd_loss(teacher_logits: &ArrayView2<f64>, student_logits: &ArrayView2<f64>) -> Result<f64> {
    Ok(kd_loss_grad(teacher_logits, student_logits)?.0)
}

/// Loss plus its gradient w.r.t. the student logits:
/// (softmax(student) - softmax(teacher)) / B.
pub fn kd_loss_grad(
    teacher_logits: &ArrayView2<f64>,
    student_logits: &ArrayView2<f64>,
) -> Result<(f64, Array2<f64>)> {
    if teacher_logits.dim() != student_logits.dim() {
        return Err(Error::LogitShapeMismatch {
            teacher: teacher_logits.dim(),
            student: student_logits.dim(),
        });
    }
    let (b, n) = teacher_logits.dim();
    if b == 0 {
        return Err(Error::EmptyBatch);
    }
    let t = softmax_rows(teacher_logits);
    let s = softmax_rows(student_logits);
    let mut loss = 0.0;
    let mut grad = Array2::<f64>::zeros((b, n));
    for bi in 0..b {
        for j in 0..n {
            let sj = s[[bi, j]].max(f64::MIN_POSITIVE);
            loss -= t[[bi, j]] * sj.ln();
            grad[[bi, j]] = (s[[bi, j]] - t[[bi, j]]) / b as f64;
        }
    }
    Ok((loss / b as f64, grad))
}

/// Grow an old head to cover a new domain's classes: old rows are copied,
/// each new class row is the L2-normalized mean feature of its training
/// images under the current graph.
pub fn expand_classifier(
    old_head: &ArrayView2<f32>,
    new_dataset: &DatasetSpec,
    graph: &BackboneGraph,
    input: (usize, usize),
    batch: usize,
) -> Result<Array2<f32>> {
    let (n_old, d) = old_head.dim();
    debug_assert_eq!(d, graph.feature_dim());
    let n_new = new_dataset.n_train_ids;
    let mut head = Array2::<f32>::zeros((n_old + n_new, d));
    head.slice_mut(ndarray::s![..n_old, ..]).assign(old_head);

    let tensors = crate::train::prepare_tensors(new_dataset, input.0, input.1)?;
    let labels = new_dataset.train_labels();
    let mut features = Array2::<f32>::zeros((tensors.len(), d));
    let mut start = 0usize;
    while start < tensors.len() {
        let end = (start + batch.max(1)).min(tensors.len());
        let x = stack_batch(&tensors[start..end]);
        let f = graph.forward_eval(&x.view())?;
        features.slice_mut(ndarray::s![start..end, ..]).assign(&f);
        start = end;
    }
    for class in 1..=n_new as u32 {
        let rows: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if rows.is_empty() {
            return Err(Error::EmptyClass(class));
        }
        let mut mean = ndarray::Array1::<f32>::zeros(d);
        for &row in &rows {
            mean += &features.index_axis(Axis(0), row);
        }
        mean.mapv_inplace(|v| v / rows.len() as f32);
        let normalized = crate::nn::l2_normalized(&mean)
            .ok_or(Error::ZeroNormVector(class as usize))?;
        head.index_axis_mut(Axis(0), n_old + class as usize - 1)
            .assign(&normalized);
    }
    Ok(head)
}

/// Frozen copy of the previous step's feature extractor and classifier.
#[derive(Clone)]
pub struct FrozenTeacher {
    pub graph: BackboneGraph,
    pub head: Array2<f32>,
}

pub struct BaselineState {
    pub buffer: ExemplarBuffer,
    pub teacher: Option<FrozenTeacher>,
    pub head: Option<Array2<f32>>,
    pub global_classes: u32,
    pub step: u32,
}

impl BaselineState {
    pub fn new(ids_per_step: usize, images_per_id: usize) -> Self {
        BaselineState {
            buffer: ExemplarBuffer::new(ids_per_step, images_per_id),
            teacher: None,
            head: None,
            global_classes: 0,
            step: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KdOptions {
    pub lambda: f64,
    pub use_new_samples: bool,
    pub old_classes_only: bool,
    pub exemplars_per_batch: usize,
    pub replay: bool,
    pub distill: bool,
    pub cumulative_head: bool,
}

impl KdOptions {
    pub fn kd(cfg: &TrainConfig) -> Self {
        KdOptions {
            lambda: cfg.kd_lambda,
            use_new_samples: cfg.kd_use_new_samples,
            old_classes_only: cfg.kd_old_classes_only,
            exemplars_per_batch: (cfg.batch_size / 2).max(1),
            replay: true,
            distill: true,
            cumulative_head: true,
        }
    }

    pub fn finetune() -> Self {
        KdOptions {
            lambda: 0.0,
            use_new_samples: false,
            old_classes_only: false,
            exemplars_per_batch: 0,
            replay: false,
            distill: false,
            cumulative_head: false,
        }
    }
}

/// One step of the distillation baseline (Fig. 1(b)-style paradigm): the
/// full model is unfrozen, exemplars are mixed into every batch, and the
/// distillation term is computed on the replayed rows against the frozen
/// teacher. With an empty buffer and no teacher this reduces to plain
/// fine-tuning.
pub fn train_domain_kd(
    graph: &mut BackboneGraph,
    dataset: &DatasetSpec,
    cfg: &TrainConfig,
    is_first_domain: bool,
    state: &mut BaselineState,
    opts: &KdOptions,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::EmptyTrainSet(dataset.name.clone()));
    }
    let input = (cfg.input_height, cfg.input_width);
    let tensors = crate::train::prepare_tensors(dataset, input.0, input.1)?;
    let labels = dataset.train_labels();
    let n_new = dataset.n_train_ids;
    let d = graph.feature_dim();
    let offset = if opts.cumulative_head {
        state.global_classes
    } else {
        0
    };

    // Teacher logits need a head covering the student's class range; the
    // expanded variant copies the old rows and inserts new-class centers.
    let (mut head_weight, teacher_kd_head): (Array2<f32>, Option<Array2<f32>>) =
        match (&state.head, opts.cumulative_head) {
            (Some(old_head), true) => {
                let expanded =
                    expand_classifier(&old_head.view(), dataset, graph, input, cfg.batch_size)?;
                let teacher_head = if opts.old_classes_only {
                    state.teacher.as_ref().map(|t| t.head.clone())
                } else {
                    Some(expanded.clone())
                };
                (expanded, teacher_head)
            }
            _ => (
                ClassifierHead::new(n_new, d, derive_seed(cfg.seed, "kd-head", state.step as u64))
                    .weight,
                None,
            ),
        };

    let mut opt = Adam::new(AdamConfig {
        weight_decay: cfg.weight_decay as f32,
        ..AdamConfig::default()
    });
    let mut rng_sampler = ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        "kd-sampler",
        state.step as u64,
    ));
    let mut rng_aug =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "kd-augment", state.step as u64));
    let mut rng_replay =
        ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "kd-replay", state.step as u64));

    let mut epochs = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let lr = lr_at_epoch(epoch, cfg, is_first_domain);
        opt.set_lr(lr as f32);
        let batches =
            pk_sample_epoch(&labels, cfg.batch_size, cfg.instances_per_id, &mut rng_sampler);
        let mut loss_acc = 0.0;
        let mut acc_acc = 0.0;
        let mut seen = 0usize;
        for (bi, batch) in batches.iter().enumerate() {
            let mut views: Vec<Array3<f32>> = batch
                .iter()
                .map(|&i| {
                    if cfg.augment.any() {
                        augment(&tensors[i], &cfg.augment, &mut rng_aug)
                    } else {
                        tensors[i].clone()
                    }
                })
                .collect();
            let mut batch_labels: Vec<u32> =
                batch.iter().map(|&i| offset + labels[i]).collect();
            let new_rows = views.len();

            let mut exemplar_rows: Vec<usize> = Vec::new();
            if opts.replay && !state.buffer.is_empty() && opts.exemplars_per_batch > 0 {
                let take = opts.exemplars_per_batch.min(state.buffer.len());
                let mut order: Vec<usize> = (0..state.buffer.len()).collect();
                order.shuffle(&mut rng_replay);
                for &ei in order.iter().take(take) {
                    let entry = &state.buffer.entries[ei];
                    let tensor = u8_to_tensor(&entry.pixels);
                    let tensor = if cfg.augment.any() {
                        augment(&tensor, &cfg.augment, &mut rng_aug)
                    } else {
                        tensor
                    };
                    exemplar_rows.push(views.len());
                    views.push(tensor);
                    batch_labels.push(entry.global_class);
                }
            }

            let x = stack_batch(&views);
            let (features, tape) = graph.forward_train(&x.view(), true)?;
            let head = ClassifierHead::from_weight(head_weight.clone());
            let logits = head.logits(&features.view());
            let id_result =
                id_loss_from_logits(&logits.view(), &batch_labels, cfg.label_smoothing)?;
            let mut grad_logits = id_result.grad_logits;
            let mut total_loss = id_result.loss;

            let mut kd_rows = exemplar_rows.clone();
            if opts.use_new_samples {
                kd_rows.extend(0..new_rows);
            }
            if opts.distill && !kd_rows.is_empty() {
                if let (Some(teacher), Some(t_head)) = (&state.teacher, &teacher_kd_head) {
                    let sub = stack_rows4(&x, &kd_rows);
                    let t_features = teacher.graph.forward_eval(&sub.view())?;
                    let t_logits = t_features.dot(&t_head.t()).mapv(|v| v as f64);
                    let n_kd_classes = t_head.dim().0;
                    let mut s_logits = Array2::<f64>::zeros((kd_rows.len(), n_kd_classes));
                    for (r, &row) in kd_rows.iter().enumerate() {
                        for j in 0..n_kd_classes {
                            s_logits[[r, j]] = logits[[row, j]] as f64;
                        }
                    }
                    let (kd_l, kd_g) = kd_loss_grad(&t_logits.view(), &s_logits.view())?;
                    total_loss += opts.lambda * kd_l;
                    for (r, &row) in kd_rows.iter().enumerate() {
                        for j in 0..n_kd_classes {
                            grad_logits[[row, j]] += (opts.lambda * kd_g[[r, j]]) as f32;
                        }
                    }
                }
            }

            if !total_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    loss: total_loss,
                });
            }

            let grad_w = grad_logits.t().dot(&features);
            let grad_features = grad_logits.dot(&head_weight);
            let grads = graph.backward(tape, &grad_features.view(), true)?;
            graph.apply_gradients(&mut opt, &grads, true);
            opt.step(
                "classifier.weight",
                head_weight.as_slice_mut().expect("contiguous"),
                grad_w.as_slice().expect("contiguous"),
            );

            loss_acc += total_loss * views.len() as f64;
            acc_acc += id_result.accuracy * views.len() as f64;
            seen += views.len();
        }
        let denom = seen.max(1) as f64;
        epochs.push(EpochStats {
            epoch,
            lr,
            loss: loss_acc / denom,
            accuracy: acc_acc / denom,
        });
    }

    if opts.replay {
        let additions = select_exemplars(
            dataset,
            input,
            state.buffer.ids_per_step,
            state.buffer.images_per_id,
            derive_seed(cfg.seed, "exemplars", state.step as u64),
            offset,
            state.step + 1,
        )?;
        state.buffer.entries.extend(additions);
    }
    if opts.cumulative_head {
        state.teacher = Some(FrozenTeacher {
            graph: graph.clone(),
            head: head_weight.clone(),
        });
        state.head = Some(head_weight);
        state.global_classes += n_new as u32;
    }
    state.step += 1;
    Ok(epochs)
}

fn stack_rows4(
    x: &ndarray::Array4<f32>,
    rows: &[usize],
) -> ndarray::Array4<f32> {
    let (_, c, h, w) = x.dim();
    let mut out = ndarray::Array4::zeros((rows.len(), c, h, w));
    for (r, &row) in rows.iter().enumerate() {
        out.index_axis_mut(Axis(0), r)
            .assign(&x.index_axis(Axis(0), row));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn kd_loss_of_uniform_is_log_n() {
        let logits = Array2::<f64>::zeros((2, 4));
        let l = kd_loss(&logits.view(), &logits.view()).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kd_self_loss_is_mean_entropy() {
        let logits = array![[0.3, -1.2, 2.0], [0.0, 0.5, -0.5]];
        let l = kd_loss(&logits.view(), &logits.view()).unwrap();
        let h = crate::nn::mean_softmax_entropy(&logits.view());
        assert!((l - h).abs() < 1e-6);
    }

    #[test]
    fn kd_hand_example() {
        // teacher (0,0), student (ln 3, 0): -(0.5 ln 0.75 + 0.5 ln 0.25)
        let teacher = array![[0.0, 0.0]];
        let student = array![[3.0f64.ln(), 0.0]];
        let l = kd_loss(&teacher.view(), &student.view()).unwrap();
        assert!((l - 0.8370).abs() < 1e-4, "got {l}");
    }

    #[test]
    fn kd_gibbs_inequality() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let t = Array2::from_shape_fn((3, 6), |_| rng.random_range(-3.0..3.0));
            let s = Array2::from_shape_fn((3, 6), |_| rng.random_range(-3.0..3.0));
            let cross = kd_loss(&t.view(), &s.view()).unwrap();
            let floor = crate::nn::mean_softmax_entropy(&t.view());
            assert!(cross >= floor - 1e-9);
        }
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let t = Array2::from_shape_fn((2, 5), |_| rng.random_range(-2.0..2.0));
        let s = Array2::from_shape_fn((2, 5), |_| rng.random_range(-2.0..2.0));
        let (_, grad) = kd_loss_grad(&t.view(), &s.view()).unwrap();
        let h = 1e-6;
        for bi in 0..2 {
            for j in 0..5 {
                let mut plus = s.clone();
                plus[[bi, j]] += h;
                let mut minus = s.clone();
                minus[[bi, j]] -= h;
                let fd = (kd_loss(&t.view(), &plus.view()).unwrap()
                    - kd_loss(&t.view(), &minus.view()).unwrap())
                    / (2.0 * h);
                assert!(
                    (grad[[bi, j]] - fd).abs() / fd.abs().max(1e-8) < 1e-4,
                    "grad {} vs fd {fd}",
                    grad[[bi, j]]
                );
            }
        }
    }

    #[test]
    fn kd_shape_mismatch_rejected() {
        let t = Array2::<f64>::zeros((1, 3));
        let s = Array2::<f64>::zeros((1, 4));
        assert!(matches!(
            kd_loss(&t.view(), &s.view()),
            Err(Error::LogitShapeMismatch { .. })
        ));
    }
}
