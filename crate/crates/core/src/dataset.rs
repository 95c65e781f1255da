//! Candidate pools, diversity selection, pair enumeration and model input
//! preprocessing.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bayesopt::{self, sobol, BoConfig};
use crate::emotion::Emotion;
use crate::error::{Error, Result};
use crate::face::{ActuatorVector, FaceImage, FaceSim, IMAGE_SIZE};
use crate::imageio;

pub type ItemId = u32;

/// `Σ aᵢbᵢ / (‖a‖‖b‖)`.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolEntry {
    pub id: ItemId,
    pub actuators: ActuatorVector,
    pub image: FaceImage,
}

/// Rendered candidates. Ids are unique; a freshly generated pool has dense
/// ids `0..n`, a selected subset keeps the ids of its source pool.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidatePool {
    entries: Vec<PoolEntry>,
}

impl CandidatePool {
    pub fn new(mut entries: Vec<PoolEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.id);
        if let Some(w) = entries.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidItems(format!("duplicate id {}", w[0].id)));
        }
        Ok(Self { entries })
    }

    /// Renders `actuators` with dense ids in input order.
    pub fn render(sim: &FaceSim, actuators: Vec<ActuatorVector>) -> Result<Self> {
        let entries = actuators
            .into_iter()
            .enumerate()
            .map(|(i, a)| Ok(PoolEntry { id: i as ItemId, image: sim.render(&a)?, actuators: a }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<ItemId> {
        self.entries.iter().map(|e| e.id).collect()
    }

    pub fn get(&self, id: ItemId) -> Option<&PoolEntry> {
        self.entries.binary_search_by_key(&id, |e| e.id).ok().map(|i| &self.entries[i])
    }

    pub fn is_dense(&self) -> bool {
        self.entries.iter().enumerate().all(|(i, e)| e.id as usize == i)
    }
}

/// Greedy farthest-point selection under `d = 1 − cosine similarity`.
///
/// Seeds with the most distant pair, then repeatedly adds the candidate whose
/// minimum distance to the selection is largest. Ties go to the lowest id.
/// Returns the subset sorted by id.
pub fn select_diverse(pool: &CandidatePool, k: usize) -> Result<CandidatePool> {
    if k < 2 || pool.len() < k {
        return Err(Error::InsufficientPool { available: pool.len(), requested: k });
    }
    if pool.len() == k {
        return Ok(pool.clone());
    }
    let normed: Vec<Vec<f64>> = pool
        .entries
        .iter()
        .map(|e| {
            let norm = e.image.pixels().iter().map(|p| p * p).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::DegenerateVector);
            }
            Ok(e.image.pixels().iter().map(|p| p / norm).collect())
        })
        .collect::<Result<_>>()?;
    let dist = |i: usize, j: usize| 1.0 - normed[i].iter().zip(&normed[j]).map(|(a, b)| a * b).sum::<f64>();

    let n = pool.len();
    let mut best_pair = (f64::MIN, 0, 1);
    let mut cache = vec![f64::INFINITY; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = dist(i, j);
            if d > best_pair.0 {
                best_pair = (d, i, j);
            }
        }
    }
    let mut chosen = vec![best_pair.1, best_pair.2];
    let mut taken = vec![false; n];
    for &c in &chosen {
        taken[c] = true;
    }
    for (i, slot) in cache.iter_mut().enumerate() {
        if !taken[i] {
            *slot = dist(i, best_pair.1).min(dist(i, best_pair.2));
        }
    }
    while chosen.len() < k {
        let next = (0..n)
            .filter(|&i| !taken[i])
            .fold(None, |best: Option<usize>, i| match best {
                Some(b) if cache[b] >= cache[i] => Some(b),
                _ => Some(i),
            })
            .expect("pool larger than k");
        taken[next] = true;
        chosen.push(next);
        for i in 0..n {
            if !taken[i] {
                cache[i] = cache[i].min(dist(i, next));
            }
        }
    }
    CandidatePool::new(chosen.into_iter().map(|i| pool.entries[i].clone()).collect())
}

/// All unordered pairs with `left < right`, lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PairSet {
    pub pairs: Vec<(ItemId, ItemId)>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("left_id,right_id\n");
        for (l, r) in &self.pairs {
            out.push_str(&format!("{l},{r}\n"));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next().map(str::trim) != Some("left_id,right_id") {
            return Err(Error::format("pairs.csv", "missing header left_id,right_id"));
        }
        let mut pairs = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (l, r) = line.split_once(',').ok_or_else(|| Error::format("pairs.csv", line))?;
            let parse = |s: &str| s.trim().parse::<ItemId>().map_err(|e| Error::format("pairs.csv", e));
            pairs.push((parse(l)?, parse(r)?));
        }
        Ok(Self { pairs })
    }
}

pub fn enumerate_ids(ids: &[ItemId]) -> PairSet {
    let mut sorted = ids.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut pairs = Vec::with_capacity(sorted.len() * sorted.len().saturating_sub(1) / 2);
    for (i, &a) in sorted.iter().enumerate() {
        for &b in &sorted[i + 1..] {
            pairs.push((a, b));
        }
    }
    PairSet { pairs }
}

pub fn enumerate_pairs(subset: &CandidatePool) -> PairSet {
    enumerate_ids(&subset.ids())
}

/// Model-ready image: channel-major values in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub channels: usize,
    pub side: usize,
    pub data: Vec<f64>,
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &FaceImage, out_w: usize, out_h: usize) -> Vec<f64> {
    let (w, h) = (img.width(), img.height());
    if (w, h) == (out_w, out_h) {
        return img.pixels().to_vec();
    }
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let src = |dst: usize, scale: f64, len: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(out_w * out_h);
    for y in 0..out_h {
        let (y0, y1, fy) = src(y, sy, h);
        for x in 0..out_w {
            let (x0, x1, fx) = src(x, sx, w);
            let top = img.get(x0, y0) * (1.0 - fx) + img.get(x1, y0) * fx;
            let bottom = img.get(x0, y1) * (1.0 - fx) + img.get(x1, y1) * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

/// Resize to 224×224, normalize with mean 0.5 and std 0.5, replicate the
/// gray channel `channels` times.
pub fn preprocess_channels(raw: &FaceImage, channels: usize) -> Result<Preprocessed> {
    if raw.pixels().is_empty() || channels == 0 {
        return Err(Error::InvalidImage("empty image".into()));
    }
    let gray: Vec<f64> = resize_bilinear(raw, IMAGE_SIZE, IMAGE_SIZE).into_iter().map(|x| (x - 0.5) / 0.5).collect();
    let mut data = Vec::with_capacity(gray.len() * channels);
    for _ in 0..channels {
        data.extend_from_slice(&gray);
    }
    Ok(Preprocessed { channels, side: IMAGE_SIZE, data })
}

pub fn preprocess(raw: &FaceImage) -> Result<Preprocessed> {
    preprocess_channels(raw, 1)
}

/// How the raw candidate pool is assembled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoolConfig {
    pub count: usize,
    pub seed: u64,
    /// Share of the pool taken from optimizer visits; the rest is Sobol filler.
    pub bo_fraction: f64,
    /// Evaluations per emotion when harvesting optimizer visits.
    pub bo_budget: usize,
}

impl Default for PoolConfig {
    fn default() -> Self {
        Self { count: 500, seed: 0, bo_fraction: 0.5, bo_budget: 60 }
    }
}

/// Harvests actuator vectors visited while maximizing each target emotion's
/// latent intensity (round-robin over emotions, visit order), then fills the
/// remainder with scrambled Sobol points.
pub fn generate_pool_actuators(sim: &FaceSim, cfg: &PoolConfig) -> Result<Vec<ActuatorVector>> {
    let dim = sim.dof();
    let harvest = ((cfg.count as f64) * cfg.bo_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut visits: Vec<Vec<Vec<f64>>> = Vec::new();
    if harvest > 0 {
        let per_emotion = harvest.div_ceil(Emotion::TARGETS.len());
        let budget = cfg.bo_budget.max(per_emotion);
        for (k, e) in Emotion::TARGETS.into_iter().enumerate() {
            let bo = BoConfig {
                budget,
                init: 10.min(budget),
                seed: cfg.seed.wrapping_add(k as u64 * 7919),
                ..Default::default()
            };
            let (_, trace) = bayesopt::optimize(
                |x| ActuatorVector::new(x.to_vec()).and_then(|v| sim.latent_intensity(&v, e)).unwrap_or(f64::NAN),
                dim,
                &bo,
            )?;
            // latest visits are the ones closest to the target expression
            let mut xs: Vec<Vec<f64>> = trace.iterations.into_iter().map(|it| it.actuators).collect();
            xs.reverse();
            visits.push(xs);
        }
    }
    let mut out = Vec::with_capacity(cfg.count);
    let mut round = 0;
    while out.len() < harvest {
        for v in &visits {
            if out.len() < harvest {
                if let Some(x) = v.get(round) {
                    out.push(x.clone());
                }
            }
        }
        round += 1;
    }
    for x in sobol::points(cfg.count - out.len(), dim, cfg.seed ^ 0xf111) {
        out.push(x);
    }
    out.into_iter().map(ActuatorVector::new).collect()
}

pub fn generate_pool(sim: &FaceSim, cfg: &PoolConfig) -> Result<CandidatePool> {
    CandidatePool::render(sim, generate_pool_actuators(sim, cfg)?)
}

/// One line of `pool.jsonl` / `subset.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub id: ItemId,
    pub actuators: Vec<f64>,
    pub image_path: String,
    pub sha256: String,
}

pub fn image_rel_path(id: ItemId) -> String {
    format!("pool/{id:04}.png")
}

/// Writes `pool/{id:04}.png` under `dir` and returns the manifest records.
pub fn write_pool_images(dir: &Path, pool: &CandidatePool) -> Result<Vec<PoolRecord>> {
    pool.entries
        .iter()
        .map(|e| {
            let rel = image_rel_path(e.id);
            let bytes = imageio::write_image(&dir.join(&rel), &e.image)?;
            Ok(PoolRecord {
                id: e.id,
                actuators: e.actuators.values().to_vec(),
                image_path: rel,
                sha256: imageio::sha256_hex(&bytes),
            })
        })
        .collect()
}

pub fn write_records(path: &Path, records: &[PoolRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<PoolRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

/// Resolves an image path relative to the manifest's directory.
pub fn resolve_image(manifest: &Path, record: &PoolRecord) -> PathBuf {
    let base = manifest.parent().unwrap_or_else(|| Path::new("."));
    base.join(&record.image_path)
}

/// Loads a pool manifest, verifying every image against its recorded hash.
/// The stored image is decoded (8-bit quantized), not re-rendered.
pub fn load_pool(manifest: &Path) -> Result<(CandidatePool, Vec<PoolRecord>)> {
    let records = read_records(manifest)?;
    let mut seen = HashSet::new();
    let mut entries = Vec::with_capacity(records.len());
    for r in &records {
        if !seen.insert(r.id) {
            return Err(Error::InvalidItems(format!("duplicate id {} in {}", r.id, manifest.display())));
        }
        let path = resolve_image(manifest, r);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let digest = imageio::sha256_hex(&bytes);
        if digest != r.sha256 {
            return Err(Error::format(
                "pool image",
                format!("{} hash {digest} does not match manifest {}", path.display(), r.sha256),
            ));
        }
        let image = if path.extension().and_then(|e| e.to_str()) == Some("pgm") {
            imageio::decode_pgm(&bytes)?
        } else {
            imageio::decode_png(&bytes)?
        };
        entries.push(PoolEntry { id: r.id, actuators: ActuatorVector::new(r.actuators.clone())?, image });
    }
    Ok((CandidatePool::new(entries)?, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool_from_vectors(vs: &[Vec<f64>]) -> CandidatePool {
        CandidatePool::new(
            vs.iter()
                .enumerate()
                .map(|(i, v)| PoolEntry {
                    id: i as ItemId,
                    actuators: ActuatorVector::neutral(1),
                    image: FaceImage::new(v.len(), 1, v.clone()).unwrap(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let want = 32.0 / (14f64.sqrt() * 77f64.sqrt());
        assert!((cosine_similarity(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.974632).abs() < 1e-6);
        assert!(matches!(cosine_similarity(&[0.0, 0.0], &[1.0, 1.0]), Err(Error::DegenerateVector)));
        assert!(matches!(cosine_similarity(&[1.0], &[1.0, 1.0]), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn selecting_whole_pool_is_identity() {
        let vs: Vec<Vec<f64>> = (0..4).map(|i| vec![1.0, i as f64 / 4.0, 0.2]).collect();
        let pool = pool_from_vectors(&vs);
        assert_eq!(select_diverse(&pool, 4).unwrap(), pool);
        assert!(matches!(select_diverse(&pool, 5), Err(Error::InsufficientPool { .. })));
    }

    #[test]
    fn duplicates_are_avoided() {
        let mut vs = vec![vec![1.0, 0.0, 0.0]; 4];
        vs.push(vec![0.0, 1.0, 0.0]);
        vs.push(vec![0.0, 0.0, 1.0]);
        vs.push(vec![0.5, 0.5, 0.0]);
        let pool = pool_from_vectors(&vs);
        let picked = select_diverse(&pool, 4).unwrap();
        let dup_count = picked.ids().iter().filter(|&&id| id < 4).count();
        assert_eq!(dup_count, 1);
    }

    #[test]
    fn three_of_five_matches_exhaustive_max_min() {
        let vs = vec![
            vec![1.0, 0.1, 0.0, 0.2],
            vec![0.9, 0.3, 0.1, 0.0],
            vec![0.0, 1.0, 0.2, 0.1],
            vec![0.1, 0.2, 1.0, 0.3],
            vec![0.4, 0.4, 0.4, 0.9],
        ];
        let pool = pool_from_vectors(&vs);
        let d = |i: usize, j: usize| 1.0 - cosine_similarity(&vs[i], &vs[j]).unwrap();
        let mut best = (f64::MIN, vec![]);
        for a in 0..5 {
            for b in a + 1..5 {
                for c in b + 1..5 {
                    let m = d(a, b).min(d(a, c)).min(d(b, c));
                    if m > best.0 {
                        best = (m, vec![a as ItemId, b as ItemId, c as ItemId]);
                    }
                }
            }
        }
        assert_eq!(select_diverse(&pool, 3).unwrap().ids(), best.1);
    }

    #[test]
    fn pair_counts() {
        for (k, n) in [(2usize, 1usize), (10, 45), (100, 4950)] {
            let ids: Vec<ItemId> = (0..k as ItemId).map(|i| i * 3 + 1).collect();
            let ps = enumerate_ids(&ids);
            assert_eq!(ps.len(), n);
            assert!(ps.pairs.iter().all(|(l, r)| l < r));
            assert!(ps.pairs.windows(2).all(|w| w[0] < w[1]));
        }
        let ps = enumerate_ids(&[5, 2, 9]);
        assert_eq!(PairSet::from_csv(&ps.to_csv()).unwrap(), ps);
    }

    #[test]
    fn preprocess_endpoints() {
        let half = FaceImage::new(IMAGE_SIZE, IMAGE_SIZE, vec![0.5; IMAGE_SIZE * IMAGE_SIZE]).unwrap();
        assert!(preprocess(&half).unwrap().data.iter().all(|&v| v == 0.0));
        let mut px = vec![0.0; IMAGE_SIZE * IMAGE_SIZE];
        px[0] = 1.0;
        let out = preprocess(&FaceImage::new(IMAGE_SIZE, IMAGE_SIZE, px).unwrap()).unwrap();
        assert_eq!(out.data[0], 1.0);
        assert_eq!(out.data[1], -1.0);
        let three = preprocess_channels(&half, 3).unwrap();
        assert_eq!(three.data.len(), 3 * IMAGE_SIZE * IMAGE_SIZE);
    }

    #[test]
    fn downsampling_matches_box_average() {
        // 448 -> 224 with half-pixel centres samples exactly between source
        // pixels 2i and 2i+1, i.e. a 2x2 box mean.
        let big = 448;
        let cell = |x: usize, y: usize| if (x / 3 + y / 3) % 2 == 0 { 1.0 } else { 0.0 };
        let px: Vec<f64> = (0..big * big).map(|i| cell(i % big, i / big)).collect();
        let img = FaceImage::new(big, big, px).unwrap();
        let out = preprocess(&img).unwrap();
        let oracle = |x: usize, y: usize| {
            let m = (cell(2 * x, 2 * y) + cell(2 * x + 1, 2 * y) + cell(2 * x, 2 * y + 1) + cell(2 * x + 1, 2 * y + 1)) / 4.0;
            (m - 0.5) / 0.5
        };
        for (x, y) in [(0, 0), (223, 0), (0, 223), (223, 223), (1, 1), (100, 57)] {
            assert!((out.data[y * IMAGE_SIZE + x] - oracle(x, y)).abs() < 1e-12, "({x},{y})");
        }
    }

    #[test]
    fn pool_round_trips_through_disk() {
        let sim = FaceSim::default();
        let cfg = PoolConfig { count: 8, seed: 3, bo_fraction: 0.5, bo_budget: 12 };
        let pool = generate_pool(&sim, &cfg).unwrap();
        assert_eq!(pool.len(), 8);
        assert!(pool.is_dense());
        let dir = tempfile::tempdir().unwrap();
        let records = write_pool_images(dir.path(), &pool).unwrap();
        let manifest = dir.path().join("pool.jsonl");
        write_records(&manifest, &records).unwrap();
        let (loaded, again) = load_pool(&manifest).unwrap();
        assert_eq!(again, records);
        assert_eq!(loaded.ids(), pool.ids());
        for (a, b) in loaded.entries().iter().zip(pool.entries()) {
            assert_eq!(a.actuators, b.actuators);
            assert_eq!(a.image.to_u8(), b.image.to_u8());
        }
        fs::write(dir.path().join("pool/0003.png"), b"tampered").unwrap();
        assert!(load_pool(&manifest).is_err());
    }

    #[test]
    fn pool_generation_is_deterministic() {
        let sim = FaceSim::default();
        let cfg = PoolConfig { count: 14, seed: 5, bo_fraction: 0.5, bo_budget: 12 };
        assert_eq!(generate_pool_actuators(&sim, &cfg).unwrap(), generate_pool_actuators(&sim, &cfg).unwrap());
        let single = PoolConfig { count: 1, ..cfg };
        assert_eq!(generate_pool_actuators(&sim, &single).unwrap().len(), 1);
    }
}
