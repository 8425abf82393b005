//! Evaluation: Fréchet distance over encoder features, a k-nearest-neighbour
//! quality score and reference similarity of the edited region.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{cosine, EncoderParams};
use crate::data::{distort_mask, AnnotatedImage, EditMask};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::par;
use crate::sampler::{edit_image, EditModel, GuidanceConfig};

/// Maps images to feature vectors. The frozen encoder is the one used in
/// practice; tests plug in hand-made extractors.
pub trait FeatureExtractor: Sync {
    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>>;
}

impl FeatureExtractor for EncoderParams {
    fn features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let d = self.config.embed_dim;
        Ok(self
            .embed_all(images)?
            .into_iter()
            .map(|t| t.data()[..d].to_vec())
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub features: Vec<Vec<f64>>,
    pub tag: String,
}

impl FeatureSet {
    pub fn new(features: Vec<Vec<f64>>, tag: impl Into<String>) -> Result<Self> {
        let dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != dim || f.iter().any(|v| !v.is_finite())) {
            return Err(Error::Parameter("features must be finite rows of equal length".into()));
        }
        Ok(FeatureSet {
            features,
            tag: tag.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let (n, d) = (self.len(), self.dim());
        let x = DMatrix::from_fn(n, d, |i, j| self.features[i][j]);
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        (mean, cov)
    }
}

/// Features for every image, in input order.
pub fn extract_features(extractor: &dyn FeatureExtractor, images: &[Image], tag: &str) -> Result<FeatureSet> {
    if images.is_empty() {
        return Err(Error::Parameter("no images to extract features from".into()));
    }
    let chunks: Vec<&[Image]> = images.chunks(32).collect();
    let rows: Vec<Vec<Vec<f64>>> = par::map(&chunks, |c| {
        let refs: Vec<&Image> = c.iter().collect();
        extractor.features(&refs)
    })
    .into_iter()
    .collect::<Result<_>>()?;
    FeatureSet::new(rows.into_iter().flatten().collect(), tag)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidResult {
    pub value: f64,
    /// The raw value came out negative from round-off and was clamped to 0.
    pub clamped: bool,
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets. The trace of
/// the cross term comes from the eigenvalues of `sqrt(Sa) Sb sqrt(Sa)`,
/// clamped at 0.
pub fn fid_detailed(a: &FeatureSet, b: &FeatureSet) -> Result<FidResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Parameter(format!(
            "FID needs at least 2 samples per set, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("feature dims {} vs {}", a.dim(), b.dim())));
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let root_a = symmetric_sqrt(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = inner.symmetric_eigen().eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let raw = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !raw.is_finite() {
        return Err(Error::Numeric(format!("FID evaluated to {raw}")));
    }
    Ok(FidResult {
        value: raw.max(0.0),
        clamped: raw < 0.0,
    })
}

pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64> {
    fid_detailed(a, b).map(|r| r.value)
}

/// `-(mean distance to the k nearest rows of real)`.
pub fn knn_score(real: &FeatureSet, feature: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > real.len() {
        return Err(Error::Parameter(format!("k = {k} with {} real features", real.len())));
    }
    if feature.len() != real.dim() {
        return Err(Error::Shape(format!("feature dim {} vs {}", feature.len(), real.dim())));
    }
    let mut d: Vec<f64> = real
        .features
        .iter()
        .map(|r| r.iter().zip(feature).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    Ok(-d[..k].iter().sum::<f64>() / k as f64)
}

pub fn quality_score(extractor: &dyn FeatureExtractor, real: &FeatureSet, image: &Image, k: usize) -> Result<f64> {
    let f = extractor.features(&[image])?.remove(0);
    knn_score(real, &f, k)
}

/// Cosine similarity between the features of the mask's bounding crop of
/// `edited` and of `reference`.
pub fn similarity_score(extractor: &dyn FeatureExtractor, edited: &Image, mask: &EditMask, reference: &Image) -> Result<f64> {
    let bbox = mask
        .bounding_rect()
        .ok_or_else(|| Error::Parameter("similarity needs a non-empty mask".into()))?;
    if (mask.height(), mask.width()) != (edited.height(), edited.width()) {
        return Err(Error::Shape("mask size differs from the edited image".into()));
    }
    let crop = edited.crop(bbox.x, bbox.y, bbox.w, bbox.h);
    let f = extractor.features(&[&crop, reference])?;
    Ok(cosine(&f[0], &f[1]))
}

/// One benchmark case: `(source, mask, reference)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EditCase {
    pub source: Image,
    pub mask: EditMask,
    pub reference: Image,
}

/// Pairs each source box with an object cropped from a different image, so
/// the reference never shows what was under the mask.
pub fn toy_edit_cases(
    dataset: &[AnnotatedImage],
    n: usize,
    reference_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<EditCase>> {
    let usable: Vec<&AnnotatedImage> = dataset.iter().filter(|a| !a.boxes.is_empty()).collect();
    if usable.len() < 2 {
        return Err(Error::Parameter("need at least two annotated images to build cases".into()));
    }
    (0..n)
        .map(|_| {
            let i = rng.random_range(0..usable.len());
            let j = (i + rng.random_range(1..usable.len())) % usable.len();
            let src = usable[i];
            let bbox = src.boxes[rng.random_range(0..src.boxes.len())];
            let other = usable[j];
            let rb = other.boxes[rng.random_range(0..other.boxes.len())];
            let reference = other.image.crop(rb.x, rb.y, rb.w, rb.h).resize(reference_size, reference_size);
            let size = (src.image.height(), src.image.width());
            Ok(EditCase {
                source: src.image.clone(),
                mask: distort_mask(&bbox, size, rng)?,
                reference,
            })
        })
        .collect()
}

const CASES_FILE: &str = "cases.json";

#[derive(Serialize, Deserialize)]
struct CaseRecord {
    source: String,
    mask: String,
    reference: String,
}

/// Writes cases as PNG triples plus `cases.json`.
pub fn save_cases(dir: &Path, cases: &[EditCase]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let mut records = Vec::new();
    for (i, c) in cases.iter().enumerate() {
        let rec = CaseRecord {
            source: format!("{i:04}_source.png"),
            mask: format!("{i:04}_mask.png"),
            reference: format!("{i:04}_reference.png"),
        };
        c.source.save(&dir.join(&rec.source))?;
        let mask_path = dir.join(&rec.mask);
        fs::write(&mask_path, c.mask.to_png()).map_err(|e| Error::io(&mask_path, e))?;
        c.reference.save(&dir.join(&rec.reference))?;
        written.extend([&rec.source, &rec.mask, &rec.reference].map(|f| dir.join(f)));
        records.push(rec);
    }
    let path = dir.join(CASES_FILE);
    fs::write(&path, serde_json::to_string_pretty(&records).expect("records serialize")).map_err(|e| Error::io(&path, e))?;
    written.push(path);
    Ok(written)
}

pub fn load_cases(dir: &Path) -> Result<Vec<EditCase>> {
    let path = dir.join(CASES_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let records: Vec<CaseRecord> =
        serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?;
    records
        .into_iter()
        .map(|r| {
            let mask_path = dir.join(&r.mask);
            let bytes = fs::read(&mask_path).map_err(|e| Error::io(&mask_path, e))?;
            Ok(EditCase {
                source: Image::load(&dir.join(&r.source))?,
                mask: EditMask::from_png(&bytes)?,
                reference: Image::load(&dir.join(&r.reference))?,
            })
        })
        .collect()
}

/// Benchmark summary; fields follow the FID / QS / similarity column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fid: f64,
    pub quality_score: f64,
    pub similarity_score: f64,
    pub n_images: usize,
    pub fid_clamped: bool,
    pub partial: bool,
    pub failures: Vec<String>,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "fid={:.6}\nquality_score={:.6}\nsimilarity_score={:.6}\nn_images={}\npartial={}\n",
            self.fid, self.quality_score, self.similarity_score, self.n_images, self.partial
        );
        for f in &self.failures {
            s.push_str(&format!("failure={f}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Writes `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join("report.txt");
        let json = dir.join("report.json");
        fs::write(&txt, self.to_text()).map_err(|e| Error::io(&txt, e))?;
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))?;
        Ok(vec![txt, json])
    }
}

/// Default neighbour count of the quality score.
pub const QUALITY_K: usize = 5;

/// Scores a list of already edited images against their cases.
pub fn score_edits(
    extractor: &dyn FeatureExtractor,
    edits: &[(usize, Image)],
    cases: &[EditCase],
    real_pool: &[Image],
    failures: Vec<String>,
) -> Result<MetricsReport> {
    if edits.is_empty() {
        return Err(Error::Numeric(format!("every case failed: {}", failures.join("; "))));
    }
    let real = extract_features(extractor, real_pool, "real")?;
    let images: Vec<Image> = edits.iter().map(|(_, e)| e.clone()).collect();
    let generated = extract_features(extractor, &images, "edits")?;
    let fid = if generated.len() >= 2 {
        fid_detailed(&generated, &real)?
    } else {
        FidResult {
            value: f64::NAN,
            clamped: false,
        }
    };
    let k = QUALITY_K.min(real.len());
    let mut q = 0.0;
    for f in &generated.features {
        q += knn_score(&real, f, k)?;
    }
    let mut sim = 0.0;
    for (i, e) in edits {
        sim += similarity_score(extractor, e, &cases[*i].mask, &cases[*i].reference)?;
    }
    let n = edits.len() as f64;
    Ok(MetricsReport {
        fid: fid.value,
        quality_score: q / n,
        similarity_score: sim / n,
        n_images: edits.len(),
        fid_clamped: fid.clamped,
        partial: !failures.is_empty(),
        failures,
    })
}

/// Runs every case through the sampler (seed `g.seed + index`) and returns the edits,
/// plus one message per failed case.
pub fn run_cases(model: &EditModel, cases: &[EditCase], g: &GuidanceConfig) -> (Vec<(usize, Image)>, Vec<String>) {
    let results = par::map_range(cases.len(), |i| {
        let gi = GuidanceConfig {
            seed: g.seed.wrapping_add(i as u64),
            ..*g
        };
        let c = &cases[i];
        edit_image(model, &c.source, &c.mask, &c.reference, &gi)
    });
    let mut edits = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(img) => edits.push((i, img)),
            Err(e) => failures.push(format!("case {i}: {e}")),
        }
    }
    (edits, failures)
}

pub fn evaluate_benchmark(
    model: &EditModel,
    cases: &[EditCase],
    g: &GuidanceConfig,
    real_pool: &[Image],
) -> Result<MetricsReport> {
    if cases.is_empty() || real_pool.is_empty() {
        return Err(Error::Parameter("benchmark needs cases and a real pool".into()));
    }
    let (edits, failures) = run_cases(model, cases, g);
    score_edits(&model.encoder, &edits, cases, real_pool, failures)
}

/// Deterministic case list for a seed.
pub fn seeded_cases(dataset: &[AnnotatedImage], n: usize, reference_size: usize, seed: u64) -> Result<Vec<EditCase>> {
    toy_edit_cases(dataset, n, reference_size, &mut ChaCha8Rng::seed_from_u64(seed))
}
