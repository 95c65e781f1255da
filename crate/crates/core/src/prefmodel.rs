//! Siamese preference scorer trained from pairwise labels.
//!
//! An image is average-pooled to 28×28 and fed to two branches: a frozen,
//! seeded linear projection to 256 features and a trainable perceptron
//! (784 → hidden → tanh → 256). The concatenated 512 features go through a
//! 7-way softmax head. Both images of a pair are scored by the same weights
//! and `P(a ≻ b) = σ(scale · (s_a − s_b))` on the target emotion's channel.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{enumerate_ids, ItemId, PairSet, Preprocessed};
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::face::IMAGE_SIZE;
use crate::imageio::sha256_hex;
use crate::ranking::{shuffled, Ranking};

pub const POOL: usize = 8;
pub const INPUT_SIDE: usize = IMAGE_SIZE / POOL;
pub const INPUT_DIM: usize = INPUT_SIDE * INPUT_SIDE;
pub const FROZEN_DIM: usize = 256;
pub const TRAIN_DIM: usize = 256;
pub const FEATURE_DIM: usize = FROZEN_DIM + TRAIN_DIM;
pub const CLASSES: usize = 7;
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Epochs without validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub hidden: usize,
    pub sigmoid_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            weight_decay: 1e-5,
            momentum: 0.9,
            epochs: 300,
            batch_size: 32,
            patience: 30,
            seed: 0,
            hidden: 64,
            sigmoid_scale: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.sigmoid_scale].iter().all(|v| *v > 0.0 && v.is_finite());
        let nonneg = self.weight_decay >= 0.0 && (0.0..1.0).contains(&self.momentum);
        if !positive || !nonneg || self.epochs == 0 || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::InvalidInput(format!("bad training config {self:?}")));
        }
        Ok(())
    }
}

/// Trainable tensors. Biases are single-column matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub w1: DMatrix<f64>,
    pub b1: DMatrix<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DMatrix<f64>,
    pub head_w: DMatrix<f64>,
    pub head_b: DMatrix<f64>,
}

impl Params {
    fn zeros(hidden: usize) -> Self {
        Self {
            w1: DMatrix::zeros(hidden, INPUT_DIM),
            b1: DMatrix::zeros(hidden, 1),
            w2: DMatrix::zeros(TRAIN_DIM, hidden),
            b2: DMatrix::zeros(TRAIN_DIM, 1),
            head_w: DMatrix::zeros(CLASSES, FEATURE_DIM),
            head_b: DMatrix::zeros(CLASSES, 1),
        }
    }

    pub fn tensors(&self) -> [&DMatrix<f64>; 6] {
        [&self.w1, &self.b1, &self.w2, &self.b2, &self.head_w, &self.head_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut DMatrix<f64>; 6] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2, &mut self.head_w, &mut self.head_b]
    }

    pub const NAMES: [&'static str; 6] = ["w1", "b1", "w2", "b2", "head_w", "head_b"];
    const IS_WEIGHT: [bool; 6] = [true, false, true, false, true, false];
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// Always zero: the frozen branch is excluded from training.
    pub frozen: DMatrix<f64>,
    pub params: Params,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceModel {
    pub target: Emotion,
    pub sigmoid_scale: f64,
    pub seed: u64,
    pub frozen: DMatrix<f64>,
    pub params: Params,
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> DMatrix<f64> {
    // column-major fill order keeps this independent of nalgebra internals
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect();
    DMatrix::from_vec(rows, cols, data)
}

fn tensor_bytes(m: &DMatrix<f64>) -> Vec<u8> {
    m.as_slice().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    for mut col in m.column_iter_mut() {
        col += b.column(0);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `−[y ln ŷ + (1−y) ln(1−ŷ)]` with `ŷ` clamped to `[ε, 1−ε]`.
pub fn bce_loss(y: f64, y_hat: f64) -> f64 {
    let p = y_hat.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// 8×8 average pooling of a one-channel 224×224 preprocessed image.
pub fn pool_input(img: &Preprocessed) -> Result<Vec<f64>> {
    if img.channels != 1 || img.side != IMAGE_SIZE || img.data.len() != IMAGE_SIZE * IMAGE_SIZE {
        return Err(Error::InvalidInput(format!(
            "expected 1×{IMAGE_SIZE}×{IMAGE_SIZE}, got {}×{}×{} ({} values)",
            img.channels,
            img.side,
            img.side,
            img.data.len()
        )));
    }
    let mut out = vec![0.0; INPUT_DIM];
    for y in 0..IMAGE_SIZE {
        let row = &img.data[y * IMAGE_SIZE..(y + 1) * IMAGE_SIZE];
        let dst = &mut out[(y / POOL) * INPUT_SIDE..(y / POOL + 1) * INPUT_SIDE];
        for (x, v) in row.iter().enumerate() {
            dst[x / POOL] += v;
        }
    }
    let norm = 1.0 / (POOL * POOL) as f64;
    out.iter_mut().for_each(|v| *v *= norm);
    Ok(out)
}

/// Pooled model inputs keyed by item id, one column per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBank {
    ids: Vec<ItemId>,
    index: HashMap<ItemId, usize>,
    pooled: DMatrix<f64>,
}

impl ImageBank {
    pub fn new(images: &[(ItemId, &Preprocessed)]) -> Result<Self> {
        let mut cols = Vec::with_capacity(images.len() * INPUT_DIM);
        let mut ids = Vec::with_capacity(images.len());
        let mut index = HashMap::with_capacity(images.len());
        for (id, img) in images {
            if index.insert(*id, ids.len()).is_some() {
                return Err(Error::InvalidItems(format!("duplicate image id {id}")));
            }
            ids.push(*id);
            cols.extend(pool_input(img)?);
        }
        Ok(Self { pooled: DMatrix::from_vec(INPUT_DIM, ids.len(), cols), ids, index })
    }

    pub fn ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// A binary preference: `y = 1` means `left` is preferred.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Label {
    pub left: ItemId,
    pub right: ItemId,
    pub y: u8,
}

/// Labelled pairs over the images they reference.
#[derive(Debug, Clone, PartialEq)]
pub struct PairData {
    ids: Vec<ItemId>,
    pooled: DMatrix<f64>,
    pairs: Vec<(usize, usize, f64)>,
}

impl PairData {
    pub fn new(bank: &ImageBank, labels: &[Label]) -> Result<Self> {
        let used: BTreeSet<ItemId> = labels.iter().flat_map(|l| [l.left, l.right]).collect();
        let ids: Vec<ItemId> = used.into_iter().collect();
        let local: HashMap<ItemId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        let cols = ids
            .iter()
            .map(|id| bank.index.get(id).copied().ok_or_else(|| Error::InvalidItems(format!("no image for id {id}"))))
            .collect::<Result<Vec<_>>>()?;
        let pairs = labels
            .iter()
            .map(|l| {
                if l.left == l.right || l.y > 1 {
                    return Err(Error::InvalidInput(format!("bad label {l:?}")));
                }
                Ok((local[&l.left], local[&l.right], l.y as f64))
            })
            .collect::<Result<_>>()?;
        Ok(Self { pooled: bank.pooled.select_columns(&cols), ids, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn image_ids(&self) -> &[ItemId] {
        &self.ids
    }

    pub fn labels(&self) -> Vec<Label> {
        self.pairs
            .iter()
            .map(|&(a, b, y)| Label { left: self.ids[a], right: self.ids[b], y: y as u8 })
            .collect()
    }
}

struct Forward {
    hidden: DMatrix<f64>,
    features: DMatrix<f64>,
    probs: DMatrix<f64>,
}

impl PreferenceModel {
    pub fn new(target: Emotion, hidden: usize, sigmoid_scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let frozen = gaussian(&mut rng, FROZEN_DIM, INPUT_DIM, (1.0 / INPUT_DIM as f64).sqrt());
        let mut params = Params::zeros(hidden);
        params.w1 = gaussian(&mut rng, hidden, INPUT_DIM, (1.0 / INPUT_DIM as f64).sqrt());
        params.w2 = gaussian(&mut rng, TRAIN_DIM, hidden, (1.0 / hidden as f64).sqrt());
        params.head_w = gaussian(&mut rng, CLASSES, FEATURE_DIM, (1.0 / FEATURE_DIM as f64).sqrt());
        Self { target, sigmoid_scale, seed, frozen, params }
    }

    pub fn from_config(target: Emotion, cfg: &TrainConfig) -> Self {
        Self::new(target, cfg.hidden, cfg.sigmoid_scale, cfg.seed)
    }

    pub fn hidden(&self) -> usize {
        self.params.w1.nrows()
    }

    pub fn frozen_checksum(&self) -> String {
        sha256_hex(&tensor_bytes(&self.frozen))
    }

    fn frozen_features(&self, pooled: &DMatrix<f64>) -> DMatrix<f64> {
        &self.frozen * pooled
    }

    fn forward(&self, pooled: &DMatrix<f64>, frozen: &DMatrix<f64>) -> Forward {
        let p = &self.params;
        let mut z1 = &p.w1 * pooled;
        add_bias(&mut z1, &p.b1);
        let hidden = z1.map(f64::tanh);
        let mut t = &p.w2 * &hidden;
        add_bias(&mut t, &p.b2);
        let mut features = DMatrix::zeros(FEATURE_DIM, pooled.ncols());
        features.rows_mut(0, FROZEN_DIM).copy_from(frozen);
        features.rows_mut(FROZEN_DIM, TRAIN_DIM).copy_from(&t);
        let mut probs = &p.head_w * &features;
        add_bias(&mut probs, &p.head_b);
        for mut col in probs.column_iter_mut() {
            let max = col.max();
            col.apply(|v| *v = (*v - max).exp());
            let sum = col.sum();
            col /= sum;
        }
        Forward { hidden, features, probs }
    }

    fn target_scores(&self, pooled: &DMatrix<f64>) -> Vec<f64> {
        let fwd = self.forward(pooled, &self.frozen_features(pooled));
        fwd.probs.row(self.target.index()).iter().copied().collect()
    }

    /// Softmax over the seven emotion channels.
    pub fn score(&self, img: &Preprocessed) -> Result<[f64; CLASSES]> {
        let pooled = DMatrix::from_vec(INPUT_DIM, 1, pool_input(img)?);
        let fwd = self.forward(&pooled, &self.frozen_features(&pooled));
        let mut out = [0.0; CLASSES];
        out.copy_from_slice(fwd.probs.column(0).as_slice());
        Ok(out)
    }

    pub fn target_score(&self, img: &Preprocessed) -> Result<f64> {
        Ok(self.score(img)?[self.target.index()])
    }

    /// `σ(scale · (s_a − s_b))` on the target channel.
    pub fn pair_probability(&self, a: &Preprocessed, b: &Preprocessed) -> Result<f64> {
        Ok(sigmoid(self.sigmoid_scale * (self.target_score(a)? - self.target_score(b)?)))
    }

    fn pair_probs(&self, data: &PairData) -> Vec<f64> {
        let s = self.target_scores(&data.pooled);
        data.pairs.iter().map(|&(a, b, _)| sigmoid(self.sigmoid_scale * (s[a] - s[b]))).collect()
    }

    /// Target-channel scores of the images referenced by `data`, in `image_ids` order.
    pub fn scores_for(&self, data: &PairData) -> Vec<f64> {
        self.target_scores(&data.pooled)
    }

    pub fn mean_bce(&self, data: &PairData) -> Result<f64> {
        self.mean_bce_with_frozen(data, &self.frozen_features_of(data))
    }

    /// Frozen-branch features of `data`'s images; they only depend on the
    /// frozen weights, so callers perturbing trainable weights can reuse them.
    pub fn frozen_features_of(&self, data: &PairData) -> DMatrix<f64> {
        self.frozen_features(&data.pooled)
    }

    pub fn mean_bce_with_frozen(&self, data: &PairData, frozen: &DMatrix<f64>) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let fwd = self.forward(&data.pooled, frozen);
        let s = fwd.probs.row(self.target.index());
        let total: f64 = data
            .pairs
            .iter()
            .map(|&(a, b, y)| bce_loss(y, sigmoid(self.sigmoid_scale * (s[a] - s[b]))))
            .sum();
        Ok(total / data.len() as f64)
    }

    /// Fraction of pairs where `ŷ > 0.5` agrees with `y = 1`; exactly 0.5 is wrong.
    pub fn evaluate_accuracy(&self, data: &PairData) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let probs = self.pair_probs(data);
        let correct = probs
            .iter()
            .zip(&data.pairs)
            .filter(|(p, &(_, _, y))| if y == 1.0 { **p > 0.5 } else { **p < 0.5 })
            .count();
        Ok(correct as f64 / data.len() as f64)
    }

    /// Exact gradient of the mean BCE over `data` with respect to the
    /// trainable tensors.
    pub fn gradients(&self, data: &PairData) -> Result<Gradients> {
        if data.is_empty() {
            return Err(Error::NoData);
        }
        let frozen = self.frozen_features(&data.pooled);
        let all: Vec<usize> = (0..data.len()).collect();
        Ok(Gradients {
            frozen: DMatrix::zeros(FROZEN_DIM, INPUT_DIM),
            params: self.batch_gradients(&data.pooled, &frozen, &data.pairs, &all).1,
        })
    }

    /// Loss and gradient over `batch` (indices into `pairs`), touching only
    /// the images the batch references.
    fn batch_gradients(
        &self,
        pooled: &DMatrix<f64>,
        frozen: &DMatrix<f64>,
        pairs: &[(usize, usize, f64)],
        batch: &[usize],
    ) -> (f64, Params) {
        let mut local = HashMap::new();
        let mut cols = Vec::new();
        for &k in batch {
            for img in [pairs[k].0, pairs[k].1] {
                local.entry(img).or_insert_with(|| {
                    cols.push(img);
                    cols.len() - 1
                });
            }
        }
        let (p_in, f_in) = if cols.len() == pooled.ncols() && cols.iter().enumerate().all(|(i, &c)| i == c) {
            (pooled.clone(), frozen.clone())
        } else {
            (pooled.select_columns(&cols), frozen.select_columns(&cols))
        };
        let fwd = self.forward(&p_in, &f_in);
        let t = self.target.index();
        let n = batch.len() as f64;

        let mut loss = 0.0;
        let mut g_score = vec![0.0; cols.len()];
        for &k in batch {
            let (a, b, y) = pairs[k];
            let (la, lb) = (local[&a], local[&b]);
            let y_hat = sigmoid(self.sigmoid_scale * (fwd.probs[(t, la)] - fwd.probs[(t, lb)]));
            loss += bce_loss(y, y_hat);
            // the clamp is flat outside [ε, 1−ε]
            if (BCE_EPS..=1.0 - BCE_EPS).contains(&y_hat) {
                let g = self.sigmoid_scale * (y_hat - y) / n;
                g_score[la] += g;
                g_score[lb] -= g;
            }
        }

        let m = cols.len();
        let mut g_logits = DMatrix::zeros(CLASSES, m);
        for c in 0..m {
            let st = fwd.probs[(t, c)];
            for k in 0..CLASSES {
                let delta = if k == t { 1.0 } else { 0.0 };
                g_logits[(k, c)] = g_score[c] * st * (delta - fwd.probs[(k, c)]);
            }
        }
        let p = &self.params;
        let mut g = Params::zeros(self.hidden());
        g.head_w = &g_logits * fwd.features.transpose();
        g.head_b = DMatrix::from_iterator(CLASSES, 1, g_logits.row_iter().map(|r| r.sum()));
        let g_t = p.head_w.columns(FROZEN_DIM, TRAIN_DIM).transpose() * &g_logits;
        g.w2 = &g_t * fwd.hidden.transpose();
        g.b2 = DMatrix::from_iterator(TRAIN_DIM, 1, g_t.row_iter().map(|r| r.sum()));
        let mut g_z1 = p.w2.transpose() * &g_t;
        g_z1.zip_apply(&fwd.hidden, |g, h| *g *= 1.0 - h * h);
        g.w1 = &g_z1 * p_in.transpose();
        g.b1 = DMatrix::from_iterator(self.hidden(), 1, g_z1.row_iter().map(|r| r.sum()));
        (loss / n, g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: PreferenceModel,
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were returned (last epoch without validation).
    pub best_epoch: usize,
}

/// Minibatch SGD with momentum and decoupled weight decay on the trainable
/// weight matrices. With `validation`, returns the weights of the epoch with
/// the lowest validation loss and stops after `patience` epochs without
/// improvement.
pub fn train(target: Emotion, data: &PairData, validation: Option<&PairData>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_from(PreferenceModel::from_config(target, cfg), data, validation, cfg)
}

pub fn train_from(
    mut model: PreferenceModel,
    data: &PairData,
    validation: Option<&PairData>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::NoData);
    }
    cfg.validate()?;
    let frozen = model.frozen_features(&data.pooled);
    let mut velocity = Params::zeros(model.hidden());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5452_4149_4e00);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Params)> = None;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (_, grad) = model.batch_gradients(&data.pooled, &frozen, &data.pairs, batch);
            for (i, ((w, v), g)) in model
                .params
                .tensors_mut()
                .into_iter()
                .zip(velocity.tensors_mut())
                .zip(grad.tensors())
                .enumerate()
            {
                if Params::IS_WEIGHT[i] {
                    *w *= 1.0 - cfg.learning_rate * cfg.weight_decay;
                }
                *v *= cfg.momentum;
                *v += g;
                w.zip_apply(&*v, |w, v| *w -= cfg.learning_rate * v);
            }
        }
        let train_loss = model.mean_bce(data)?;
        let validation_loss = validation.filter(|v| !v.is_empty()).map(|v| model.mean_bce(v)).transpose()?;
        epochs.push(EpochLog { epoch, train_loss, validation_loss });
        if let Some(vl) = validation_loss {
            if best.as_ref().is_none_or(|(b, _, _)| vl < *b) {
                best = Some((vl, epoch, model.params.clone()));
            } else if epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
                break;
            }
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => epochs.len() - 1,
    };
    Ok(TrainOutcome { model, epochs, best_epoch })
}

/// Majority-vote labels for `pairs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<Label>,
    /// Pairs with equal votes, or no votes at all.
    pub dropped: Vec<(ItemId, ItemId)>,
}

/// Each ranking votes for the item it places first; an annotator whose
/// ranking lacks either item abstains.
pub fn build_labels(rankings: &[Ranking], pairs: &PairSet) -> Result<LabelSet> {
    if rankings.is_empty() {
        return Err(Error::NoData);
    }
    let positions: Vec<_> = rankings.iter().map(Ranking::positions).collect();
    let mut out = LabelSet { labels: Vec::with_capacity(pairs.len()), dropped: Vec::new() };
    for &(l, r) in &pairs.pairs {
        let mut balance = 0i64;
        for pos in &positions {
            if let (Some(pl), Some(pr)) = (pos.get(&l), pos.get(&r)) {
                balance += if pl < pr { 1 } else { -1 };
            }
        }
        match balance.cmp(&0) {
            std::cmp::Ordering::Greater => out.labels.push(Label { left: l, right: r, y: 1 }),
            std::cmp::Ordering::Less => out.labels.push(Label { left: l, right: r, y: 0 }),
            std::cmp::Ordering::Equal => out.dropped.push((l, r)),
        }
    }
    Ok(out)
}

/// Seeded image-level partition into `k` validation folds of near-equal size.
pub fn kfold_split(ids: &[ItemId], k: usize, seed: u64) -> Result<Vec<Vec<ItemId>>> {
    if k < 2 || ids.len() < k {
        return Err(Error::InvalidSplit(format!("{} images cannot form {k} folds", ids.len())));
    }
    let arr = shuffled(ids, seed);
    Ok((0..k)
        .map(|f| {
            let mut fold = arr[f * arr.len() / k..(f + 1) * arr.len() / k].to_vec();
            fold.sort_unstable();
            fold
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub validation_ids: Vec<ItemId>,
    pub train_pairs: usize,
    pub validation_pairs: usize,
    pub dropped_pairs: usize,
    pub accuracy: f64,
    pub best_epoch: usize,
    pub epochs: Vec<EpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub target: Emotion,
    pub folds: Vec<FoldReport>,
    pub mean_accuracy: f64,
}

/// K-fold cross-validation split at the image level: pairs are formed within
/// the training images and within the validation images, never across.
pub fn kfold_cv(target: Emotion, bank: &ImageBank, rankings: &[Ranking], k: usize, cfg: &TrainConfig) -> Result<CvReport> {
    let folds = kfold_split(bank.ids(), k, cfg.seed)?;
    let mut reports = Vec::with_capacity(k);
    for (f, val_ids) in folds.iter().enumerate() {
        let val_set: BTreeSet<ItemId> = val_ids.iter().copied().collect();
        let train_ids: Vec<ItemId> = bank.ids().iter().copied().filter(|id| !val_set.contains(id)).collect();
        let train_labels = build_labels(rankings, &enumerate_ids(&train_ids))?;
        let val_labels = build_labels(rankings, &enumerate_ids(val_ids))?;
        let train_data = PairData::new(bank, &train_labels.labels)?;
        let val_data = PairData::new(bank, &val_labels.labels)?;
        let fold_cfg = TrainConfig { seed: cfg.seed.wrapping_add(f as u64 + 1), ..*cfg };
        let outcome = train(target, &train_data, Some(&val_data), &fold_cfg)?;
        reports.push(FoldReport {
            fold: f,
            validation_ids: val_ids.clone(),
            train_pairs: train_data.len(),
            validation_pairs: val_data.len(),
            dropped_pairs: train_labels.dropped.len() + val_labels.dropped.len(),
            accuracy: outcome.model.evaluate_accuracy(&val_data)?,
            best_epoch: outcome.best_epoch,
            epochs: outcome.epochs,
        });
    }
    let mean_accuracy = reports.iter().map(|r| r.accuracy).sum::<f64>() / reports.len() as f64;
    Ok(CvReport { target, folds: reports, mean_accuracy })
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    seed: u64,
    target: Emotion,
    sigmoid_scale: f64,
    dims: Dims,
    frozen_checksum: String,
    /// Hex of little-endian f64, column-major.
    tensors: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize, PartialEq)]
struct Dims {
    pool: usize,
    input: usize,
    frozen: usize,
    hidden: usize,
    trainable_out: usize,
    classes: usize,
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    rows: usize,
    cols: usize,
    data: String,
}

const CHECKPOINT_FORMAT: &str = "prefrank-model/1";

fn store(name: &str, m: &DMatrix<f64>) -> StoredTensor {
    StoredTensor { name: name.into(), rows: m.nrows(), cols: m.ncols(), data: hex::encode(tensor_bytes(m)) }
}

fn restore(t: &StoredTensor, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let bytes = hex::decode(&t.data).map_err(|e| Error::format("checkpoint", e))?;
    if (t.rows, t.cols) != (rows, cols) || bytes.len() != rows * cols * 8 {
        return Err(Error::format("checkpoint", format!("tensor {} has the wrong shape", t.name)));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(DMatrix::from_vec(rows, cols, values))
}

impl PreferenceModel {
    pub fn to_json(&self) -> Result<String> {
        let mut tensors = vec![store("frozen", &self.frozen)];
        for (name, m) in Params::NAMES.iter().zip(self.params.tensors()) {
            tensors.push(store(name, m));
        }
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            seed: self.seed,
            target: self.target,
            sigmoid_scale: self.sigmoid_scale,
            dims: self.dims(),
            frozen_checksum: self.frozen_checksum(),
            tensors,
        };
        Ok(serde_json::to_string(&ckpt)?)
    }

    fn dims(&self) -> Dims {
        Dims {
            pool: POOL,
            input: INPUT_DIM,
            frozen: FROZEN_DIM,
            hidden: self.hidden(),
            trainable_out: TRAIN_DIM,
            classes: CLASSES,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::format("checkpoint", format!("unknown format {}", ckpt.format)));
        }
        let h = ckpt.dims.hidden;
        let expected = Dims { hidden: h, ..Self::new(ckpt.target, 1, 1.0, 0).dims() };
        if ckpt.dims != expected || ckpt.tensors.len() != 7 {
            return Err(Error::format("checkpoint", "unsupported dimensions"));
        }
        let shapes = [
            (FROZEN_DIM, INPUT_DIM),
            (h, INPUT_DIM),
            (h, 1),
            (TRAIN_DIM, h),
            (TRAIN_DIM, 1),
            (CLASSES, FEATURE_DIM),
            (CLASSES, 1),
        ];
        let mut ts = ckpt.tensors.iter().zip(shapes).map(|(t, (r, c))| restore(t, r, c));
        let frozen = ts.next().expect("7 tensors")?;
        let mut params = Params::zeros(h);
        for slot in params.tensors_mut() {
            *slot = ts.next().expect("7 tensors")?;
        }
        let model = Self { target: ckpt.target, sigmoid_scale: ckpt.sigmoid_scale, seed: ckpt.seed, frozen, params };
        if model.frozen_checksum() != ckpt.frozen_checksum {
            return Err(Error::format("checkpoint", "frozen weights do not match their checksum"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_image(v: f64) -> Preprocessed {
        Preprocessed { channels: 1, side: IMAGE_SIZE, data: vec![v; IMAGE_SIZE * IMAGE_SIZE] }
    }

    #[test]
    fn uniform_and_biased_softmax() {
        let mut m = PreferenceModel::new(Emotion::Anger, 4, 1.0, 1);
        m.params.head_w.fill(0.0);
        let s = m.score(&constant_image(0.3)).unwrap();
        assert!(s.iter().all(|v| (v - 1.0 / 7.0).abs() < 1e-12));
        m.params.head_b[(0, 0)] = 1.0;
        let s = m.score(&constant_image(0.3)).unwrap();
        let e = std::f64::consts::E;
        assert!((s[0] - e / (e + 6.0)).abs() < 1e-12);
        assert!((s[0] - 0.311_791).abs() < 1e-6);
    }

    #[test]
    fn bce_values() {
        assert!((bce_loss(1.0, 0.5) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(bce_loss(1.0, 1.0) < 1.1e-7);
        assert!((bce_loss(0.0, 0.9) - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sigmoid_of_unit_difference() {
        assert!((sigmoid(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(-3.0) + sigmoid(3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn wrong_shape_is_rejected() {
        let m = PreferenceModel::new(Emotion::Fear, 4, 1.0, 1);
        let three = Preprocessed { channels: 3, side: IMAGE_SIZE, data: vec![0.0; 3 * IMAGE_SIZE * IMAGE_SIZE] };
        assert!(matches!(m.score(&three), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn pooling_averages_blocks() {
        let mut img = constant_image(0.0);
        for y in 0..POOL {
            for x in 0..POOL {
                img.data[y * IMAGE_SIZE + x] = if (x + y) % 2 == 0 { 1.0 } else { 0.0 };
            }
        }
        img.data[IMAGE_SIZE * IMAGE_SIZE - 1] = 0.64;
        let p = pool_input(&img).unwrap();
        assert_eq!(p[0], 0.5);
        assert_eq!(p[1], 0.0);
        assert!((p[INPUT_DIM - 1] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn votes() {
        let r = |v: Vec<ItemId>| Ranking::new(v).unwrap();
        let (a, b, c) = (0, 1, 2);
        let rankings = [r(vec![a, b, c]), r(vec![a, c, b]), r(vec![c, a, b])];
        let set = build_labels(&rankings, &PairSet { pairs: vec![(b, c)] }).unwrap();
        assert_eq!(set.labels, vec![Label { left: b, right: c, y: 0 }]);
        let tie = build_labels(&rankings[..2], &PairSet { pairs: vec![(b, c), (a, b)] }).unwrap();
        assert_eq!(tie.dropped, vec![(b, c)]);
        assert_eq!(tie.labels, vec![Label { left: a, right: b, y: 1 }]);
        let partial = [r(vec![a, b]), r(vec![c, b, a])];
        let abstain = build_labels(&partial, &PairSet { pairs: vec![(a, c)] }).unwrap();
        assert_eq!(abstain.labels, vec![Label { left: a, right: c, y: 0 }]);
    }

    #[test]
    fn fold_sizes() {
        let ids: Vec<ItemId> = (0..100).collect();
        let folds = kfold_split(&ids, 5, 3).unwrap();
        let mut all: Vec<ItemId> = folds.iter().flatten().copied().collect();
        all.sort_unstable();
        assert_eq!(all, ids);
        for f in &folds {
            assert_eq!(f.len(), 20);
            assert_eq!(enumerate_ids(f).len(), 190);
            let rest: Vec<ItemId> = ids.iter().copied().filter(|i| !f.contains(i)).collect();
            assert_eq!(enumerate_ids(&rest).len(), 3160);
        }
        assert!(matches!(kfold_split(&ids[..4], 5, 0), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = PreferenceModel::new(Emotion::Surprise, 3, 2.5, 9);
        let back = PreferenceModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let mut tampered: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        tampered["frozen_checksum"] = "00".into();
        assert!(PreferenceModel::from_json(&tampered.to_string()).is_err());
    }
}
