//! Post-hoc stage one: curriculum meta-learning for whole-volume
//! diagnosis. A student classifier is meta-trained over five related
//! binary tasks; a Thompson-sampling teacher picks which tasks fill each
//! meta-batch; the meta-trained weights then initialize fine-tuning on
//! the screening task itself.

pub mod curriculum;

use rand::seq::index::sample as index_sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{roc_auc, ScoredCase};
use crate::nn::{
    backward, class_probabilities, forward_train, sgd_step, softmax_cross_entropy, Network,
    ParameterSet,
};
use crate::phantom::{BreastSample, ScanLabel};
use crate::scalar::Scalar;
use crate::tensor::Array;
use crate::volume::batch_input;

use curriculum::CurriculumState;

/// The five auxiliary diagnosis tasks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskId {
    /// Findings vs no findings.
    K1,
    /// Malignant findings vs no findings.
    K2,
    /// Benign findings vs no findings.
    K3,
    /// Malignant findings vs benign findings.
    K4,
    /// Malignant findings vs no malignant findings (breast screening).
    K5,
}

impl TaskId {
    pub const ALL: [TaskId; 5] = [TaskId::K1, TaskId::K2, TaskId::K3, TaskId::K4, TaskId::K5];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::K1 => "K1",
            TaskId::K2 => "K2",
            TaskId::K3 => "K3",
            TaskId::K4 => "K4",
            TaskId::K5 => "K5",
        }
    }

    /// Task membership of a scan label: `Some(true)` for the positive
    /// pool, `Some(false)` for the negative pool, `None` when excluded.
    pub fn membership(self, label: ScanLabel) -> Option<bool> {
        use ScanLabel::*;
        match self {
            TaskId::K1 => match label {
                NoLesion => Some(false),
                Benign | Malignant => Some(true),
            },
            TaskId::K2 => match label {
                NoLesion => Some(false),
                Benign => None,
                Malignant => Some(true),
            },
            TaskId::K3 => match label {
                NoLesion => Some(false),
                Benign => Some(true),
                Malignant => None,
            },
            TaskId::K4 => match label {
                NoLesion => None,
                Benign => Some(false),
                Malignant => Some(true),
            },
            TaskId::K5 => match label {
                NoLesion | Benign => Some(false),
                Malignant => Some(true),
            },
        }
    }
}

/// The screening binarization: malignant scans are positive.
pub fn screening_label(label: ScanLabel) -> usize {
    usize::from(label == ScanLabel::Malignant)
}

/// One task with its positive/negative sample pools (indices into the
/// training slice the tasks were built from).
#[derive(Clone, Debug)]
pub struct TaskDef {
    pub id: TaskId,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Builds all five task pools over the given scan labels, requiring at
/// least `min_per_class` samples on each side of every task.
pub fn build_tasks(labels: &[ScanLabel], min_per_class: usize) -> Result<Vec<TaskDef>> {
    let mut tasks = Vec::with_capacity(TaskId::ALL.len());
    for id in TaskId::ALL {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (i, &label) in labels.iter().enumerate() {
            match id.membership(label) {
                Some(true) => positives.push(i),
                Some(false) => negatives.push(i),
                None => {}
            }
        }
        if positives.len() < min_per_class || negatives.len() < min_per_class {
            return Err(Error::Dataset(format!(
                "task {} needs at least {min_per_class} samples per class, got {} positive / {} negative",
                id.name(),
                positives.len(),
                negatives.len()
            )));
        }
        tasks.push(TaskDef { id, positives, negatives });
    }
    Ok(tasks)
}

/// Sample indices and binary labels of one episode: disjoint balanced
/// adaptation and validation halves.
#[derive(Clone, Debug)]
pub struct Episode {
    pub task: TaskId,
    pub tr: Vec<usize>,
    pub tr_labels: Vec<usize>,
    pub val: Vec<usize>,
    pub val_labels: Vec<usize>,
}

/// Draws `n_tr` adaptation and `n_val` validation samples (half positive,
/// half negative, without replacement) from a task's pools.
pub fn sample_episode<R: Rng>(
    task: &TaskDef,
    n_tr: usize,
    n_val: usize,
    rng: &mut R,
) -> Result<Episode> {
    if n_tr % 2 != 0 || n_val % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "episode sizes must be even to balance classes, got {n_tr}/{n_val}"
        )));
    }
    let half = (n_tr + n_val) / 2;
    if task.positives.len() < half || task.negatives.len() < half {
        return Err(Error::Dataset(format!(
            "task {} pools ({} positive / {} negative) cannot fill an episode of {half} per class",
            task.id.name(),
            task.positives.len(),
            task.negatives.len()
        )));
    }
    let pos: Vec<usize> =
        index_sample(rng, task.positives.len(), half).iter().map(|i| task.positives[i]).collect();
    let neg: Vec<usize> =
        index_sample(rng, task.negatives.len(), half).iter().map(|i| task.negatives[i]).collect();
    let (tp, tn) = (n_tr / 2, n_tr / 2);
    let mut tr = pos[..tp].to_vec();
    tr.extend_from_slice(&neg[..tn]);
    let mut tr_labels = vec![1; tp];
    tr_labels.extend(std::iter::repeat(0).take(tn));
    let mut val = pos[tp..].to_vec();
    val.extend_from_slice(&neg[tn..]);
    let mut val_labels = vec![1; half - tp];
    val_labels.extend(std::iter::repeat(0).take(half - tn));
    Ok(Episode { task: task.id, tr, tr_labels, val, val_labels })
}

/// Inner/outer loop hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaHyper {
    /// Inner (adaptation) learning rate α.
    pub alpha: f64,
    /// Number of plain gradient-descent adaptation steps.
    pub inner_steps: usize,
    /// Outer (meta) learning rate β.
    pub beta: f64,
    /// Treat the validation gradient at θ′ as the meta-gradient instead
    /// of differentiating through the adaptation steps.
    pub first_order: bool,
    /// Average the per-task meta-gradients; when false they are summed.
    pub average: bool,
}

impl Default for MetaHyper {
    fn default() -> Self {
        MetaHyper { alpha: 0.01, inner_steps: 5, beta: 0.001, first_order: false, average: true }
    }
}

/// Batched inputs and labels of one episode.
pub struct EpisodeTensors<T> {
    pub tr_x: Array<T>,
    pub tr_y: Vec<usize>,
    pub val_x: Array<T>,
    pub val_y: Vec<usize>,
}

/// Adaptation result: the adapted parameters (running statistics
/// included) plus the visited trainable iterates θ_0..θ_{S−1} needed to
/// differentiate through the update path.
pub struct Adapted<T> {
    pub params: ParameterSet<T>,
    pub trajectory: Vec<Vec<T>>,
}

/// Cross-entropy loss and flattened trainable gradient at `theta`,
/// evaluated in training mode on a scratch copy of `base`.
fn loss_and_grad<T: Scalar>(
    net: &Network<T>,
    names: &[String],
    base: &ParameterSet<T>,
    theta: &[T],
    x: &Array<T>,
    y: &[usize],
) -> Result<(T, Vec<T>)> {
    let mut params = base.clone();
    params.assign_flat(names, theta)?;
    params.set_train(true);
    params.zero_grads();
    let pass = forward_train(&net.spec, &mut params, x)?;
    let (loss, dlogits) = softmax_cross_entropy(pass.output(), y)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("adaptation loss".into()));
    }
    backward(&net.spec, &mut params, &pass, &dlogits)?;
    let grad = params.flatten_grads(names)?;
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adaptation gradient".into()));
    }
    Ok((loss, grad))
}

/// Adapts a copy of the network's parameters to an episode with plain
/// gradient descent. The network itself is never modified.
pub fn adapt<T: Scalar>(
    net: &Network<T>,
    x: &Array<T>,
    y: &[usize],
    alpha: f64,
    steps: usize,
) -> Result<Adapted<T>> {
    if alpha <= 0.0 {
        return Err(Error::InvalidArgument(format!("adaptation rate must be positive, got {alpha}")));
    }
    let names = net.params.trainable_names();
    let mut params = net.params.clone();
    params.set_train(true);
    let mut theta = params.flatten(&names)?;
    let mut trajectory = Vec::with_capacity(steps);
    let a = T::of64(alpha);
    for _ in 0..steps {
        // Gradient at the current iterate; running statistics advance on
        // the working copy as a side effect of the training-mode pass.
        params.assign_flat(&names, &theta)?;
        params.zero_grads();
        let pass = forward_train(&net.spec, &mut params, x)?;
        let (loss, dlogits) = softmax_cross_entropy(pass.output(), y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite("adaptation loss".into()));
        }
        backward(&net.spec, &mut params, &pass, &dlogits)?;
        let grad = params.flatten_grads(&names)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("adaptation gradient".into()));
        }
        trajectory.push(theta.clone());
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t = *t - a * *g;
        }
    }
    params.assign_flat(&names, &theta)?;
    params.clear_grads();
    Ok(Adapted { params, trajectory })
}

/// Hessian-vector product of the episode training loss at `theta`,
/// computed with central differences of the gradient along `v`.
fn hessian_vector_product<T: Scalar>(
    net: &Network<T>,
    names: &[String],
    base: &ParameterSet<T>,
    theta: &[T],
    x: &Array<T>,
    y: &[usize],
    v: &[T],
) -> Result<Vec<T>> {
    let vnorm = v.iter().fold(T::zero(), |s, &a| s + a * a).sqrt();
    if vnorm == T::zero() {
        return Ok(vec![T::zero(); v.len()]);
    }
    let tnorm = theta.iter().fold(T::zero(), |s, &a| s + a * a).sqrt();
    let h = T::epsilon().cbrt() * (T::one() + tnorm);
    let scale = h / vnorm;
    let plus: Vec<T> = theta.iter().zip(v).map(|(&t, &u)| t + scale * u).collect();
    let minus: Vec<T> = theta.iter().zip(v).map(|(&t, &u)| t - scale * u).collect();
    let (_, gp) = loss_and_grad(net, names, base, &plus, x, y)?;
    let (_, gm) = loss_and_grad(net, names, base, &minus, x, y)?;
    let inv = vnorm / (h + h);
    Ok(gp.iter().zip(&gm).map(|(&a, &b)| (a - b) * inv).collect())
}

/// Meta-gradient of one episode's validation loss with respect to the
/// pre-adaptation parameters. The second-order path propagates the
/// validation gradient backwards through every adaptation step via
/// `v ← v − α·H(θ_k)·v`; the first-order shortcut returns the validation
/// gradient at θ′ unchanged.
pub fn episode_meta_gradient<T: Scalar>(
    net: &Network<T>,
    tensors: &EpisodeTensors<T>,
    adapted: &Adapted<T>,
    hyper: &MetaHyper,
) -> Result<Vec<T>> {
    let names = net.params.trainable_names();
    let theta_prime = adapted.params.flatten(&names)?;
    let (_, mut v) = loss_and_grad(
        net,
        &names,
        &adapted.params,
        &theta_prime,
        &tensors.val_x,
        &tensors.val_y,
    )?;
    if hyper.first_order {
        return Ok(v);
    }
    let alpha = T::of64(hyper.alpha);
    for theta_k in adapted.trajectory.iter().rev() {
        let hv = hessian_vector_product(
            net,
            &names,
            &adapted.params,
            theta_k,
            &tensors.tr_x,
            &tensors.tr_y,
            &v,
        )?;
        for (vi, hvi) in v.iter_mut().zip(&hv) {
            *vi = *vi - alpha * *hvi;
        }
    }
    Ok(v)
}

/// One outer step: θ ← θ − β · mean_j (meta-gradient of episode j), the
/// mean becoming a sum when `hyper.average` is off. Running statistics
/// are replaced by the element-wise mean of the adapted copies. Returns
/// the applied (averaged) meta-gradient.
pub fn meta_update<T: Scalar>(
    net: &mut Network<T>,
    episodes: &[(&EpisodeTensors<T>, &Adapted<T>)],
    hyper: &MetaHyper,
) -> Result<Vec<T>> {
    if episodes.is_empty() {
        return Err(Error::InvalidArgument("meta-update needs at least one episode".into()));
    }
    let names = net.params.trainable_names();
    let mut total: Option<Vec<T>> = None;
    for (tensors, adapted) in episodes {
        let g = episode_meta_gradient(net, tensors, adapted, hyper)?;
        match &mut total {
            Some(t) => {
                for (ti, gi) in t.iter_mut().zip(&g) {
                    *ti = *ti + *gi;
                }
            }
            None => total = Some(g),
        }
    }
    let mut total = total.unwrap();
    if hyper.average {
        let inv = T::of64(1.0 / episodes.len() as f64);
        for t in &mut total {
            *t = *t * inv;
        }
    }
    if total.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("meta-gradient".into()));
    }
    let beta = T::of64(hyper.beta);
    let mut theta = net.params.flatten(&names)?;
    for (t, g) in theta.iter_mut().zip(&total) {
        *t = *t - beta * *g;
    }
    net.params.assign_flat(&names, &theta)?;
    average_buffers(&mut net.params, episodes.iter().map(|(_, a)| &a.params))?;
    net.clear_pass();
    Ok(total)
}

/// Replaces every running-statistic buffer with the mean of the adapted
/// copies, so normalization statistics track the meta-training data.
fn average_buffers<'a, T: Scalar + 'a>(
    params: &mut ParameterSet<T>,
    adapted: impl Iterator<Item = &'a ParameterSet<T>>,
) -> Result<()> {
    let buffers: Vec<String> = params
        .names()
        .filter(|n| ParameterSet::<T>::is_buffer(n))
        .map(str::to_string)
        .collect();
    if buffers.is_empty() {
        return Ok(());
    }
    let mut sums: Vec<Vec<T>> = Vec::new();
    let mut count = 0usize;
    for a in adapted {
        for (i, name) in buffers.iter().enumerate() {
            let src = a.get(name)?;
            if count == 0 {
                sums.push(src.values().to_vec());
            } else {
                for (s, &v) in sums[i].iter_mut().zip(src.values()) {
                    *s = *s + v;
                }
            }
        }
        count += 1;
    }
    let inv = T::of64(1.0 / count.max(1) as f64);
    for (name, sum) in buffers.iter().zip(sums) {
        let dst = params.get_mut(name)?;
        for (d, s) in dst.values_mut().iter_mut().zip(sum) {
            *d = s * inv;
        }
    }
    Ok(())
}

/// Meta-training schedule.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaTrainConfig {
    pub hyper: MetaHyper,
    /// Meta-iteration budget M.
    pub meta_iterations: usize,
    /// Tasks per meta-batch |K_t|.
    pub task_batch: usize,
    /// Adaptation samples per episode N^tr.
    pub n_tr: usize,
    /// Validation samples per episode N^val.
    pub n_val: usize,
    /// Reward buffer capacity B.
    pub buffer: usize,
    pub seed: u64,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        MetaTrainConfig {
            hyper: MetaHyper::default(),
            meta_iterations: 300,
            task_batch: 5,
            n_tr: 4,
            n_val: 4,
            buffer: 40,
            seed: 0,
        }
    }
}

/// One row of the meta-training log: a single task-episode.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskEpisodeLog {
    pub iteration: usize,
    pub task: TaskId,
    pub auc_before: f64,
    pub auc_after: f64,
    pub reward: f64,
}

/// AUC of positive-class scores on an episode subset, computed on a
/// training-mode scratch copy so running statistics stay untouched.
fn episode_auc<T: Scalar>(
    net: &Network<T>,
    params: &ParameterSet<T>,
    x: &Array<T>,
    y: &[usize],
) -> Result<f64> {
    let mut scratch = params.clone();
    scratch.set_train(true);
    let pass = forward_train(&net.spec, &mut scratch, x)?;
    let probs = class_probabilities(pass.output())?;
    let cases: Vec<ScoredCase> = probs
        .values()
        .chunks(2)
        .zip(y)
        .enumerate()
        .map(|(i, (c, &label))| ScoredCase::new(format!("e{i}"), c[1].as64(), label == 1))
        .collect();
    roc_auc(&cases)
}

fn episode_tensors(samples: &[BreastSample], episode: &Episode) -> Result<EpisodeTensors<f32>> {
    let tr: Vec<&crate::volume::Volume> = episode.tr.iter().map(|&i| &samples[i].volume).collect();
    let val: Vec<&crate::volume::Volume> =
        episode.val.iter().map(|&i| &samples[i].volume).collect();
    Ok(EpisodeTensors {
        tr_x: batch_input(&tr)?,
        tr_y: episode.tr_labels.clone(),
        val_x: batch_input(&val)?,
        val_y: episode.val_labels.clone(),
    })
}

/// Runs the full teacher-student loop in place on `net` and returns one
/// log row per task-episode (exactly M·|K_t| rows).
pub fn meta_train(
    net: &mut Network<f32>,
    samples: &[BreastSample],
    cfg: &MetaTrainConfig,
) -> Result<Vec<TaskEpisodeLog>> {
    let labels: Vec<ScanLabel> = samples.iter().map(|s| s.label).collect();
    let per_class = (cfg.n_tr + cfg.n_val) / 2;
    let tasks = build_tasks(&labels, per_class)?;
    let mut curriculum = CurriculumState::new(tasks.len(), cfg.buffer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.meta_iterations * cfg.task_batch);

    for iteration in 0..cfg.meta_iterations {
        let slots = curriculum.sample_slots(cfg.task_batch, &mut rng);
        let mut batch: Vec<(EpisodeTensors<f32>, Adapted<f32>)> = Vec::new();
        for &slot in &slots {
            let episode = sample_episode(&tasks[slot], cfg.n_tr, cfg.n_val, &mut rng)?;
            let tensors = episode_tensors(samples, &episode)?;
            let auc_before = episode_auc(net, &net.params, &tensors.val_x, &tensors.val_y)?;
            match adapt(net, &tensors.tr_x, &tensors.tr_y, cfg.hyper.alpha, cfg.hyper.inner_steps)
            {
                Ok(adapted) => {
                    let auc_after =
                        episode_auc(net, &adapted.params, &tensors.val_x, &tensors.val_y)?;
                    let reward = curriculum.buffer_mut(slot).observe(auc_after - auc_before);
                    log.push(TaskEpisodeLog {
                        iteration,
                        task: tasks[slot].id,
                        auc_before,
                        auc_after,
                        reward,
                    });
                    batch.push((tensors, adapted));
                }
                Err(Error::NonFinite(what)) => {
                    log::warn!(
                        "iteration {iteration}: task {} episode aborted ({what}); reward 0",
                        tasks[slot].id.name()
                    );
                    curriculum.buffer_mut(slot).push_reward(0.0);
                    log.push(TaskEpisodeLog {
                        iteration,
                        task: tasks[slot].id,
                        auc_before,
                        auc_after: f64::NAN,
                        reward: 0.0,
                    });
                }
                Err(e) => return Err(e),
            }
        }
        if batch.is_empty() {
            continue;
        }
        let episodes: Vec<(&EpisodeTensors<f32>, &Adapted<f32>)> =
            batch.iter().map(|(t, a)| (t, a)).collect();
        match meta_update(net, &episodes, &cfg.hyper) {
            Ok(_) => {}
            Err(Error::NonFinite(what)) => {
                log::warn!("iteration {iteration}: meta-update skipped ({what})");
            }
            Err(e) => return Err(e),
        }
    }
    Ok(log)
}

/// Refreshes batch-norm running statistics with training-mode passes over
/// `samples`, shuffled into minibatches. Meta-training leaves the buffers
/// tracking the last few tiny episode batches, which skews every
/// evaluation-mode forward pass until the statistics are re-estimated on
/// the data the network will actually score.
pub fn recalibrate_buffers(
    net: &mut Network<f32>,
    samples: &[&BreastSample],
    batch: usize,
    passes: usize,
    seed: u64,
) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Dataset("buffer recalibration needs samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.set_train(true);
    for _ in 0..passes {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(batch.max(2)) {
            let vols: Vec<&crate::volume::Volume> =
                chunk.iter().map(|&i| &samples[i].volume).collect();
            let x = batch_input(&vols)?;
            net.forward(&x)?;
        }
    }
    net.set_train(false);
    net.clear_pass();
    Ok(())
}

/// Fine-tuning schedule for the screening task.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch: usize,
    /// SGD learning rate.
    pub lr: f64,
    pub seed: u64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig { epochs: 10, batch: 8, lr: 0.01, seed: 0 }
    }
}

/// Per-epoch fine-tuning trace; `epoch_val_auc[0]` is the initialization
/// itself (the epoch-0 candidate).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FineTuneReport {
    pub epoch_val_auc: Vec<f64>,
    pub best_val_auc: f64,
    pub best_epoch: usize,
}

/// Validation AUC of screening scores in evaluation mode.
pub fn screening_auc(net: &Network<f32>, samples: &[&BreastSample]) -> Result<f64> {
    let mut cases = Vec::with_capacity(samples.len());
    for s in samples {
        cases.push(ScoredCase::new(
            format!("{}-{}", s.patient.0, s.side.as_str()),
            diagnose(net, &s.volume)?,
            screening_label(s.label) == 1,
        ));
    }
    roc_auc(&cases)
}

/// Trains `net` on the screening task with minibatch SGD, keeping the
/// parameters of the epoch with the best validation AUC (the untouched
/// initialization competes as epoch 0).
pub fn fine_tune(
    net: &mut Network<f32>,
    train: &[&BreastSample],
    val: &[&BreastSample],
    cfg: &FineTuneConfig,
) -> Result<FineTuneReport> {
    if train.is_empty() {
        return Err(Error::Dataset("fine-tuning needs a non-empty training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let initial = screening_auc(net, val)?;
    let mut epoch_val_auc = vec![initial];
    let mut best = (initial, 0usize, net.params.clone());

    for epoch in 1..=cfg.epochs {
        net.set_train(true);
        let mut order: Vec<usize> = (0..train.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for chunk in order.chunks(cfg.batch.max(1)) {
            let vols: Vec<&crate::volume::Volume> =
                chunk.iter().map(|&i| &train[i].volume).collect();
            let labels: Vec<usize> =
                chunk.iter().map(|&i| screening_label(train[i].label)).collect();
            let x = batch_input(&vols)?;
            net.zero_grads();
            let pass = net.forward(&x)?;
            let (_, dlogits) = softmax_cross_entropy(pass.output(), &labels)?;
            net.backward(&dlogits)?;
            sgd_step(&mut net.params, cfg.lr, |_| true)?;
        }
        net.set_train(false);
        let auc = screening_auc(net, val)?;
        epoch_val_auc.push(auc);
        if auc > best.0 {
            best = (auc, epoch, net.params.clone());
        }
        log::info!("fine-tune epoch {epoch}: val auc {auc:.4}");
    }

    net.params.copy_values_from(&best.2)?;
    net.set_train(false);
    net.clear_pass();
    Ok(FineTuneReport { epoch_val_auc, best_val_auc: best.0, best_epoch: best.1 })
}

/// Probability of malignancy for one whole volume (breast confidence).
pub fn diagnose(net: &Network<f32>, volume: &crate::volume::Volume) -> Result<f64> {
    let pass = net.evaluate(&volume.to_input())?;
    let probs = class_probabilities(pass.output())?;
    Ok(f64::from(probs.values()[1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SpecBuilder;
    use crate::phantom::{generate_dataset, PhantomConfig};

    fn linear_net(inputs: usize, seed: u64) -> Network<f64> {
        let (mut b, x) = SpecBuilder::new(vec![inputs]);
        let fc = b.linear(x, "fc", 2);
        let spec = b.finish(fc);
        Network::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn toy_tensors(seed: u64, inputs: usize, n: usize) -> EpisodeTensors<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let draw = |rng: &mut ChaCha8Rng, n: usize| {
            Array::from_vec(
                &[n, inputs],
                (0..n * inputs).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap()
        };
        let labels = |n: usize| (0..n).map(|i| i % 2).collect::<Vec<_>>();
        EpisodeTensors {
            tr_x: draw(&mut rng, n),
            tr_y: labels(n),
            val_x: draw(&mut rng, n),
            val_y: labels(n),
        }
    }

    #[test]
    fn task_membership_matches_the_definitions() {
        use ScanLabel::*;
        let rows = [
            (NoLesion, [Some(false), Some(false), Some(false), None, Some(false)]),
            (Benign, [Some(true), None, Some(true), Some(false), Some(false)]),
            (Malignant, [Some(true), Some(true), None, Some(true), Some(true)]),
        ];
        for (label, expect) in rows {
            for (id, want) in TaskId::ALL.into_iter().zip(expect) {
                assert_eq!(id.membership(label), want, "{} on {label:?}", id.name());
            }
        }
    }

    #[test]
    fn build_tasks_reports_shortfalls_with_counts() {
        let labels = vec![ScanLabel::Malignant, ScanLabel::NoLesion, ScanLabel::NoLesion];
        let err = build_tasks(&labels, 2).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1 positive"), "unexpected message: {msg}");
    }

    #[test]
    fn episodes_are_balanced_and_disjoint() {
        let labels: Vec<ScanLabel> = (0..24)
            .map(|i| match i % 3 {
                0 => ScanLabel::NoLesion,
                1 => ScanLabel::Benign,
                _ => ScanLabel::Malignant,
            })
            .collect();
        let tasks = build_tasks(&labels, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e = sample_episode(&tasks[1], 4, 4, &mut rng).unwrap();
        assert_eq!(e.tr_labels, vec![1, 1, 0, 0]);
        assert_eq!(e.val_labels, vec![1, 1, 0, 0]);
        assert!(e.tr.iter().all(|i| !e.val.contains(i)), "tr and val overlap");
    }

    #[test]
    fn adapt_with_zero_steps_is_the_identity_and_never_mutates() {
        let net = linear_net(3, 1);
        let t = toy_tensors(2, 3, 4);
        let names = net.params.trainable_names();
        let before = net.params.flatten(&names).unwrap();
        let adapted = adapt(&net, &t.tr_x, &t.tr_y, 0.01, 0).unwrap();
        assert_eq!(adapted.params.flatten(&names).unwrap(), before);

        let a1 = adapt(&net, &t.tr_x, &t.tr_y, 0.1, 3).unwrap();
        let a2 = adapt(&net, &t.val_x, &t.val_y, 0.1, 3).unwrap();
        assert_eq!(net.params.flatten(&names).unwrap(), before, "adapt mutated its input");
        assert_ne!(
            a1.params.flatten(&names).unwrap(),
            a2.params.flatten(&names).unwrap(),
            "different episodes should adapt differently"
        );
    }

    #[test]
    fn one_adaptation_step_matches_the_closed_form_logistic_update() {
        // Single-feature two-logit model: for sample (x, y) the gradient of
        // the cross-entropy is (p_k − [k = y])·x for weights and
        // (p_k − [k = y]) for biases, averaged over the batch.
        let net = linear_net(1, 3);
        let xs = [0.7, -1.2, 0.4];
        let ys = [1usize, 0, 1];
        let x = Array::from_vec(&[3, 1], xs.to_vec()).unwrap();
        let alpha = 0.05;

        let names = net.params.trainable_names();
        let w = net.params.get("fc.weight").unwrap().values().to_vec();
        let b = net.params.get("fc.bias").unwrap().values().to_vec();
        let mut gw = [0.0f64; 2];
        let mut gb = [0.0f64; 2];
        for (&xi, &yi) in xs.iter().zip(&ys) {
            let z = [w[0] * xi + b[0], w[1] * xi + b[1]];
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            let sum = e[0] + e[1];
            for k in 0..2 {
                let p = e[k] / sum;
                let d = p - if yi == k { 1.0 } else { 0.0 };
                gw[k] += d * xi / 3.0;
                gb[k] += d / 3.0;
            }
        }
        let adapted = adapt(&net, &x, &ys, alpha, 1).unwrap();
        let got = adapted.params.flatten(&names).unwrap();
        // Trainable names sort as fc.bias before fc.weight.
        let want = [b[0] - alpha * gb[0], b[1] - alpha * gb[1], w[0] - alpha * gw[0], w[1] - alpha * gw[1]];
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "adapted {g} vs closed form {w}");
        }
    }

    #[test]
    fn zero_validation_gradient_leaves_parameters_unchanged() {
        // With zero weights the two logits tie for every input, so a
        // label-balanced validation pair on one shared input has an exactly
        // cancelling gradient.
        let mut net = linear_net(1, 4);
        for name in ["fc.weight", "fc.bias"] {
            for v in net.params.get_mut(name).unwrap().values_mut() {
                *v = 0.0;
            }
        }
        let x = Array::from_vec(&[2, 1], vec![0.3, 0.3]).unwrap();
        let t = EpisodeTensors {
            tr_x: x.clone(),
            tr_y: vec![1, 0],
            val_x: x,
            val_y: vec![1, 0],
        };
        let hyper = MetaHyper { inner_steps: 0, ..MetaHyper::default() };
        let adapted = adapt(&net, &t.tr_x, &t.tr_y, hyper.alpha, 0).unwrap();
        let names = net.params.trainable_names();
        let before = net.params.flatten(&names).unwrap();
        let g = meta_update(&mut net, &[(&t, &adapted)], &hyper).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-12), "gradient should cancel: {g:?}");
        let after = net.params.flatten(&names).unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - b).abs() < 1e-12, "θ moved from {b} to {a}");
        }
    }

    #[test]
    fn opposite_meta_gradients_cancel_in_the_average() {
        let mut net = linear_net(1, 5);
        for name in ["fc.weight", "fc.bias"] {
            for v in net.params.get_mut(name).unwrap().values_mut() {
                *v = 0.0;
            }
        }
        let x = Array::from_vec(&[1, 1], vec![0.9]).unwrap();
        let e1 = EpisodeTensors { tr_x: x.clone(), tr_y: vec![1], val_x: x.clone(), val_y: vec![1] };
        let e2 = EpisodeTensors { tr_x: x.clone(), tr_y: vec![0], val_x: x, val_y: vec![0] };
        let hyper = MetaHyper { inner_steps: 0, ..MetaHyper::default() };
        let a1 = adapt(&net, &e1.tr_x, &e1.tr_y, hyper.alpha, 0).unwrap();
        let a2 = adapt(&net, &e2.tr_x, &e2.tr_y, hyper.alpha, 0).unwrap();
        let names = net.params.trainable_names();
        let before = net.params.flatten(&names).unwrap();
        let g = meta_update(&mut net, &[(&e1, &a1), (&e2, &a2)], &hyper).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-12), "expected cancellation: {g:?}");
        let after = net.params.flatten(&names).unwrap();
        for (a, b) in after.iter().zip(&before) {
            assert!((a - b).abs() < 1e-12, "θ moved from {b} to {a}");
        }
    }

    #[test]
    fn second_order_meta_gradient_matches_finite_differences_of_the_pipeline() {
        let net = linear_net(2, 6);
        let t = toy_tensors(8, 2, 4);
        let hyper = MetaHyper { alpha: 0.05, inner_steps: 2, ..MetaHyper::default() };
        let adapted = adapt(&net, &t.tr_x, &t.tr_y, hyper.alpha, hyper.inner_steps).unwrap();
        let got = episode_meta_gradient(&net, &t, &adapted, &hyper).unwrap();

        // Central finite differences of θ → L_val(adapt(θ)).
        let names = net.params.trainable_names();
        let theta = net.params.flatten(&names).unwrap();
        let h = 1e-5;
        let pipeline_loss = |theta: &[f64]| -> f64 {
            let mut probe = Network::from_parts(net.spec.clone(), net.params.clone());
            probe.params.assign_flat(&names, theta).unwrap();
            let a = adapt(&probe, &t.tr_x, &t.tr_y, hyper.alpha, hyper.inner_steps).unwrap();
            let mut p = a.params;
            p.set_train(true);
            let pass = forward_train(&probe.spec, &mut p, &t.val_x).unwrap();
            let (loss, _) = softmax_cross_entropy(pass.output(), &t.val_y).unwrap();
            loss
        };
        for i in 0..theta.len() {
            let mut plus = theta.clone();
            plus[i] += h;
            let mut minus = theta.clone();
            minus[i] -= h;
            let fd = (pipeline_loss(&plus) - pipeline_loss(&minus)) / (2.0 * h);
            let denom = fd.abs().max(got[i].abs()).max(1e-8);
            assert!(
                (fd - got[i]).abs() / denom < 1e-3,
                "coordinate {i}: analytic {} vs finite difference {fd}",
                got[i]
            );
        }
    }

    #[test]
    fn first_and_second_order_agree_as_alpha_vanishes() {
        let net = linear_net(2, 9);
        let t = toy_tensors(10, 2, 4);
        let base = MetaHyper { alpha: 1e-6, inner_steps: 5, ..MetaHyper::default() };
        let adapted = adapt(&net, &t.tr_x, &t.tr_y, base.alpha, base.inner_steps).unwrap();
        let so = episode_meta_gradient(&net, &t, &adapted, &base).unwrap();
        let fo = episode_meta_gradient(
            &net,
            &t,
            &adapted,
            &MetaHyper { first_order: true, ..base },
        )
        .unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = so.iter().zip(&fo).map(|(a, b)| a - b).collect();
        assert!(
            norm(&diff) / norm(&so).max(1e-12) < 1e-2,
            "first/second order disagree at tiny alpha"
        );
    }

    fn screening_net(seed: u64) -> Network<f32> {
        let cfg = PhantomConfig::easy();
        let (mut b, x) = SpecBuilder::new(vec![
            1,
            cfg.extents[2],
            cfg.extents[1],
            cfg.extents[0],
        ]);
        let c = b.conv(x, "stem", 2, [3, 3, 3], [2, 2, 2], [1, 1, 1]);
        let r = b.relu(c);
        let g = b.global_avg_pool(r);
        let f = b.flatten(g);
        let fc = b.linear(f, "fc", 2);
        let spec = b.finish(fc);
        Network::init(spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn mixed_samples(n_patients: u32) -> Vec<BreastSample> {
        let mut cfg = PhantomConfig::easy();
        cfg.lesion_count_weights = [0.4, 0.3, 0.3];
        generate_dataset(11, n_patients, &cfg)
    }

    #[test]
    fn meta_train_logs_every_episode_and_is_deterministic() {
        let samples = mixed_samples(20);
        let cfg = MetaTrainConfig {
            meta_iterations: 2,
            task_batch: 2,
            hyper: MetaHyper { inner_steps: 1, first_order: true, ..MetaHyper::default() },
            ..MetaTrainConfig::default()
        };
        let mut a = screening_net(1);
        let log_a = meta_train(&mut a, &samples, &cfg).unwrap();
        assert_eq!(log_a.len(), cfg.meta_iterations * cfg.task_batch);
        assert!(log_a.iter().all(|r| r.auc_before.is_finite() && r.auc_after.is_finite()));

        let mut b = screening_net(1);
        let log_b = meta_train(&mut b, &samples, &cfg).unwrap();
        let names = a.params.trainable_names();
        assert_eq!(
            a.params.flatten(&names).unwrap(),
            b.params.flatten(&names).unwrap(),
            "meta-training must be deterministic per seed"
        );
        assert_eq!(log_a.len(), log_b.len());

        let mut untouched = screening_net(1);
        let zero = MetaTrainConfig { meta_iterations: 0, ..cfg };
        meta_train(&mut untouched, &samples, &zero).unwrap();
        let fresh = screening_net(1);
        assert_eq!(
            untouched.params.flatten(&names).unwrap(),
            fresh.params.flatten(&names).unwrap()
        );
    }

    #[test]
    fn fine_tuning_keeps_the_best_candidate_and_diagnoses_in_range() {
        let samples = mixed_samples(12);
        let (train, val): (Vec<_>, Vec<_>) = {
            let mut train = Vec::new();
            let mut val = Vec::new();
            for s in &samples {
                if s.patient.0 % 3 == 0 {
                    val.push(s);
                } else {
                    train.push(s);
                }
            }
            (train, val)
        };
        let mut net = screening_net(2);
        let initial = screening_auc(&net, &val).unwrap();
        let cfg = FineTuneConfig { epochs: 2, batch: 4, lr: 0.05, seed: 3 };
        let report = fine_tune(&mut net, &train, &val, &cfg).unwrap();
        assert_eq!(report.epoch_val_auc.len(), cfg.epochs + 1);
        assert_eq!(report.epoch_val_auc[0], initial);
        assert!(report.best_val_auc >= initial, "model selection lost to its own epoch 0");
        assert!((screening_auc(&net, &val).unwrap() - report.best_val_auc).abs() < 1e-12);

        for s in &val {
            let p = diagnose(&net, &s.volume).unwrap();
            assert!((0.0..=1.0).contains(&p));
            assert_eq!(p, diagnose(&net, &s.volume).unwrap());
        }
    }
}
