//! Synthetic slides with planted signal, the binary bag format, CSV bag import
//! and the dataset manifest.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::codec::{len_u32, put_u32, Reader};
use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::graph::PatchBag;
use crate::rng;

const BAG_MAGIC: &[u8; 8] = b"JIGMIL01";
const BAG_HEADER: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    /// Both classes carry the same number of signal patches; positives
    /// cluster them in a disc, negatives scatter them.
    Spatial,
    /// Only positives carry signal patches.
    Presence,
}

impl std::str::FromStr for SynthTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(SynthTask::Spatial),
            "presence" => Ok(SynthTask::Presence),
            other => Err(Error::Config(format!(
                "task must be `spatial` or `presence`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub n_slides: usize,
    pub patches_per_slide: usize,
    pub d1: usize,
    pub signal_fraction: f64,
    pub cluster_radius: f64,
    /// Added to feature 0 of signal patches.
    pub feature_shift: f64,
    /// Scales the centroid added to features 1 and 2.
    pub position_drift: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            task: SynthTask::Spatial,
            n_slides: 120,
            patches_per_slide: 150,
            d1: 16,
            signal_fraction: 0.2,
            cluster_radius: 0.15,
            feature_shift: 1.0,
            position_drift: 0.5,
            seed: 42,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_slides < 2 {
            return bad(format!("need at least 2 slides, got {}", self.n_slides));
        }
        if self.patches_per_slide == 0 {
            return bad("patches per slide must be at least 1".into());
        }
        if self.d1 < 3 {
            return bad(format!("feature width must be at least 3, got {}", self.d1));
        }
        if !(self.signal_fraction > 0.0 && self.signal_fraction < 1.0) {
            return bad(format!(
                "signal fraction {} not in (0,1)",
                self.signal_fraction
            ));
        }
        if self.task == SynthTask::Spatial
            && !(self.cluster_radius > 0.0 && self.cluster_radius < 0.5)
        {
            return bad(format!(
                "cluster radius {} not in (0, 0.5)",
                self.cluster_radius
            ));
        }
        if !self.feature_shift.is_finite() {
            return bad("feature shift must be finite".into());
        }
        if !(self.position_drift >= 0.0 && self.position_drift.is_finite()) {
            return bad(format!(
                "position drift {} must be finite and ≥ 0",
                self.position_drift
            ));
        }
        Ok(())
    }

    /// Signal patches per slide carrying them.
    pub fn signal_count(&self) -> usize {
        ((self.signal_fraction * self.patches_per_slide as f64).round() as usize)
            .clamp(1, self.patches_per_slide)
    }
}

/// Generated slides with the ground truth used to plant the signal.
#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub manifest: Manifest,
    pub bags: Vec<PatchBag>,
    /// Per slide, whether each patch is a signal patch.
    pub signal: Vec<Vec<bool>>,
    /// Per slide, the disc centre when signal patches were clustered.
    pub cluster_centers: Vec<Option<[f64; 2]>>,
}

/// Labels alternate 0, 1, 0, …; every slide is its own patient. Values are
/// rounded through `f32` so the in-memory bags equal what the file format
/// stores.
pub fn generate_synthetic_dataset(spec: &SynthSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let n = spec.patches_per_slide;
    let n_signal = spec.signal_count();
    let mut out = SyntheticDataset {
        manifest: Manifest {
            d1: spec.d1,
            slides: Vec::with_capacity(spec.n_slides),
        },
        bags: Vec::with_capacity(spec.n_slides),
        signal: Vec::with_capacity(spec.n_slides),
        cluster_centers: Vec::with_capacity(spec.n_slides),
    };
    for i in 0..spec.n_slides {
        let mut r = rng::stream(spec.seed, &[rng::tag::SYNTH, i as u64]);
        let label = (i % 2) as u8;
        let mut centroids: Vec<[f64; 2]> = (0..n).map(|_| [r.random(), r.random()]).collect();
        let signal_here = match spec.task {
            SynthTask::Spatial => n_signal,
            SynthTask::Presence if label == 1 => n_signal,
            SynthTask::Presence => 0,
        };
        let mut center = None;
        if spec.task == SynthTask::Spatial && label == 1 {
            let rad = spec.cluster_radius;
            let c = [
                r.random_range(rad..1.0 - rad),
                r.random_range(rad..1.0 - rad),
            ];
            for p in centroids.iter_mut().take(signal_here) {
                let rho = rad * r.random::<f64>().sqrt();
                let theta = r.random_range(0.0..std::f64::consts::TAU);
                *p = [c[0] + rho * theta.cos(), c[1] + rho * theta.sin()];
            }
            center = Some(c);
        }
        let mut rows: Vec<([f64; 2], bool, Vec<f64>)> = centroids
            .into_iter()
            .enumerate()
            .map(|(j, c)| {
                let is_signal = j < signal_here;
                let mut f: Vec<f64> = (0..spec.d1).map(|_| r.sample(StandardNormal)).collect();
                if is_signal {
                    f[0] += spec.feature_shift;
                }
                f[1] += spec.position_drift * c[0];
                f[2] += spec.position_drift * c[1];
                let c = [round32(c[0]), round32(c[1])];
                f.iter_mut().for_each(|v| *v = round32(*v));
                (c, is_signal, f)
            })
            .collect();
        // Top-down, left-to-right, so row order says nothing about patch type.
        rows.sort_by(|a, b| a.0[1].total_cmp(&b.0[1]).then(a.0[0].total_cmp(&b.0[0])));
        let slide_id = format!("slide_{i:04}");
        let patient_id = format!("patient_{i:04}");
        let mut data = Vec::with_capacity(n * spec.d1);
        for row in &rows {
            data.extend_from_slice(&row.2);
        }
        out.bags.push(PatchBag {
            slide_id: slide_id.clone(),
            patient_id: patient_id.clone(),
            label,
            centroids: rows.iter().map(|r| r.0).collect(),
            features: Tensor::from_vec(n, spec.d1, data)?,
        });
        out.signal.push(rows.iter().map(|r| r.1).collect());
        out.cluster_centers.push(center);
        out.manifest.slides.push(ManifestEntry {
            path: format!("bags/{slide_id}.bin"),
            slide_id,
            patient_id,
            label,
        });
    }
    Ok(out)
}

fn round32(v: f64) -> f64 {
    f64::from(v as f32)
}

/// Writes `manifest.json` and the bag files it references under `dir`.
pub fn write_dataset(
    dir: impl AsRef<Path>,
    manifest: &Manifest,
    bags: &[PatchBag],
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    if manifest.slides.len() != bags.len() {
        return Err(Error::Contract(format!(
            "{} manifest entries for {} bags",
            manifest.slides.len(),
            bags.len()
        )));
    }
    for (entry, bag) in manifest.slides.iter().zip(bags) {
        let path = dir.join(&entry.path);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_bag(&path, bag)?;
    }
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Serializes centroids and features; ids and labels live in the manifest.
pub fn encode_bag(bag: &PatchBag) -> Result<Vec<u8>> {
    let (n, d1) = (bag.len(), bag.dim());
    if n == 0 {
        return Err(Error::Data("bag has no patches".into()));
    }
    if bag.features.rows() != n {
        return Err(Error::dim("encode_bag", (n, 2), bag.features.shape()));
    }
    let mut out = Vec::with_capacity(BAG_HEADER + n * (2 + d1) * 4);
    out.extend_from_slice(BAG_MAGIC);
    put_u32(&mut out, len_u32(n, "patch count")?);
    put_u32(&mut out, len_u32(d1, "feature width")?);
    for (j, c) in bag.centroids.iter().enumerate() {
        for &v in c.iter().chain(bag.features.row(j)) {
            if !v.is_finite() {
                return Err(Error::Data(format!("non-finite value in patch {j}")));
            }
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a bag file. `expected_d1` is the manifest's feature width.
pub fn decode_bag(bytes: &[u8], expected_d1: Option<usize>) -> Result<(Vec<[f64; 2]>, Tensor)> {
    let mut r = Reader::new(bytes);
    r.magic(BAG_MAGIC)?;
    let n = r.u32("patch count")? as usize;
    if n == 0 {
        return Err(Error::Data("bag header declares 0 patches".into()));
    }
    let d_at = r.offset();
    let d1 = r.u32("feature width")? as usize;
    if let Some(want) = expected_d1 {
        if d1 != want {
            return Err(Error::Format {
                offset: d_at,
                msg: format!("feature width {d1} differs from manifest d1 {want}"),
            });
        }
    }
    let width = d1
        .checked_add(2)
        .and_then(|w| w.checked_mul(4))
        .ok_or_else(|| Error::Format {
            offset: d_at,
            msg: format!("feature width {d1} too large"),
        })?;
    r.expect_remaining(n, width, "patch records")?;
    let mut centroids = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * d1);
    for _ in 0..n {
        let at = r.offset();
        let cx = r.f32("centroid")?;
        let cy = r.f32("centroid")?;
        centroids.push([f64::from(cx), f64::from(cy)]);
        for _ in 0..d1 {
            data.push(f64::from(r.f32("feature")?));
        }
        let row = &data[data.len() - d1..];
        if !cx.is_finite() || !cy.is_finite() || row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format {
                offset: at,
                msg: "non-finite value in patch record".into(),
            });
        }
    }
    r.finish()?;
    Ok((centroids, Tensor::from_vec(n, d1, data)?))
}

pub fn write_bag(path: impl AsRef<Path>, bag: &PatchBag) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_bag(bag)?).map_err(|e| Error::io(path, e))
}

pub fn read_bag(
    path: impl AsRef<Path>,
    expected_d1: Option<usize>,
) -> Result<(Vec<[f64; 2]>, Tensor)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_bag(&bytes, expected_d1)
}

/// Parses `patch_id,cx,cy,f0,…` text. Rows keep file order.
pub fn parse_csv_bag(text: &[u8], expected_d1: Option<usize>) -> Result<(Vec<[f64; 2]>, Tensor)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text);
    let header = reader
        .headers()
        .map_err(|e| Error::Format {
            offset: 0,
            msg: format!("CSV header: {e}"),
        })?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() < 3 || cols[..3] != ["patch_id", "cx", "cy"] {
        return Err(Error::Format {
            offset: 0,
            msg: "CSV header must start with patch_id,cx,cy".into(),
        });
    }
    let d1 = cols.len() - 3;
    if let Some(want) = expected_d1 {
        if d1 != want {
            return Err(Error::Format {
                offset: 0,
                msg: format!("CSV has {d1} feature columns, manifest d1 is {want}"),
            });
        }
    }
    let mut centroids = Vec::new();
    let mut data = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format {
            offset: e.position().map_or(0, |p| p.byte() as usize),
            msg: format!("CSV: {e}"),
        })?;
        let at = record.position().map_or(0, |p| p.byte() as usize);
        let mut values = Vec::with_capacity(2 + d1);
        for (c, field) in record.iter().enumerate().skip(1) {
            let v: f64 = field.trim().parse().map_err(|_| Error::Format {
                offset: at,
                msg: format!("column {} value `{field}` is not a number", cols[c]),
            })?;
            if !v.is_finite() {
                return Err(Error::Format {
                    offset: at,
                    msg: format!("column {} is not finite", cols[c]),
                });
            }
            values.push(v);
        }
        centroids.push([values[0], values[1]]);
        data.extend_from_slice(&values[2..]);
    }
    if centroids.is_empty() {
        return Err(Error::Data("CSV bag has no patches".into()));
    }
    let n = centroids.len();
    Ok((centroids, Tensor::from_vec(n, d1, data)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slide_id: String,
    pub patient_id: String,
    pub label: u8,
    /// Relative paths resolve against the manifest's directory. A `.csv`
    /// extension selects the CSV importer.
    pub path: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub d1: usize,
    pub slides: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let m: Manifest = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("manifest key `{path}`: {}", e.into_inner()))
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d1 == 0 {
            return Err(Error::Config(
                "manifest key `d1`: must be at least 1".into(),
            ));
        }
        let mut seen = HashSet::new();
        for (i, s) in self.slides.iter().enumerate() {
            if s.label > 1 {
                return Err(Error::Config(format!(
                    "manifest key `slides[{i}].label`: {} not in {{0,1}}",
                    s.label
                )));
            }
            if s.slide_id.is_empty() {
                return Err(Error::Config(format!(
                    "manifest key `slides[{i}].slide_id`: empty"
                )));
            }
            if !seen.insert(s.slide_id.as_str()) {
                return Err(Error::Config(format!(
                    "manifest key `slides[{i}].slide_id`: duplicate `{}`",
                    s.slide_id
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Reads a manifest and every bag it lists.
pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<(Manifest, Vec<PatchBag>)> {
    let manifest_path = manifest_path.as_ref();
    let manifest = Manifest::read(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let bags = manifest
        .slides
        .iter()
        .map(|entry| {
            let path = base.join(&entry.path);
            let (centroids, features) = if entry.path.ends_with(".csv") {
                let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
                parse_csv_bag(&bytes, Some(manifest.d1))
            } else {
                read_bag(&path, Some(manifest.d1))
            }
            .map_err(|e| match e {
                Error::Format { offset, msg } => Error::Format {
                    offset,
                    msg: format!("{}: {msg}", path.display()),
                },
                other => other,
            })?;
            let bag = PatchBag {
                slide_id: entry.slide_id.clone(),
                patient_id: entry.patient_id.clone(),
                label: entry.label,
                centroids,
                features,
            };
            bag.validate()?;
            Ok(bag)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, bags))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: SynthTask) -> SynthSpec {
        SynthSpec {
            task,
            n_slides: 20,
            patches_per_slide: 60,
            d1: 4,
            seed: 9,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn presence_signal_only_in_positives() {
        let d = generate_synthetic_dataset(&small(SynthTask::Presence)).unwrap();
        for (bag, sig) in d.bags.iter().zip(&d.signal) {
            let count = sig.iter().filter(|&&s| s).count();
            assert_eq!(count, if bag.label == 1 { 12 } else { 0 });
        }
    }

    #[test]
    fn spatial_signal_counts_match_and_cluster() {
        let spec = small(SynthTask::Spatial);
        let d = generate_synthetic_dataset(&spec).unwrap();
        let mut labels = [0, 0];
        for ((bag, sig), center) in d.bags.iter().zip(&d.signal).zip(&d.cluster_centers) {
            labels[bag.label as usize] += 1;
            assert_eq!(sig.iter().filter(|&&s| s).count(), 12);
            assert_eq!(center.is_some(), bag.label == 1);
            if let Some(c) = center {
                for (p, &s) in bag.centroids.iter().zip(sig) {
                    if s {
                        let d = ((p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2)).sqrt();
                        assert!(d <= spec.cluster_radius + 1e-6, "{d}");
                    }
                }
            }
        }
        assert_eq!(labels, [10, 10]);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_synthetic_dataset(&small(SynthTask::Spatial)).unwrap();
        let b = generate_synthetic_dataset(&small(SynthTask::Spatial)).unwrap();
        assert_eq!(a.bags, b.bags);
        let c = generate_synthetic_dataset(&SynthSpec {
            seed: 10,
            ..small(SynthTask::Spatial)
        })
        .unwrap();
        assert_ne!(a.bags, c.bags);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            SynthSpec {
                n_slides: 1,
                ..SynthSpec::default()
            },
            SynthSpec {
                d1: 2,
                ..SynthSpec::default()
            },
            SynthSpec {
                cluster_radius: 0.5,
                ..SynthSpec::default()
            },
            SynthSpec {
                signal_fraction: 1.0,
                ..SynthSpec::default()
            },
            SynthSpec {
                position_drift: -1.0,
                ..SynthSpec::default()
            },
        ] {
            assert!(matches!(
                generate_synthetic_dataset(&spec),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn bag_round_trip_and_errors() {
        let d = generate_synthetic_dataset(&small(SynthTask::Presence)).unwrap();
        let bag = &d.bags[3];
        let bytes = encode_bag(bag).unwrap();
        let (c, f) = decode_bag(&bytes, Some(4)).unwrap();
        assert_eq!(c, bag.centroids);
        assert_eq!(f, bag.features);

        let mut bad = bytes.clone();
        bad[..8].copy_from_slice(b"XXXXXXXX");
        assert!(matches!(
            decode_bag(&bad, None),
            Err(Error::Format { offset: 0, .. })
        ));

        assert!(matches!(
            decode_bag(&bytes, Some(5)),
            Err(Error::Format { offset: 12, .. })
        ));
        assert!(matches!(
            decode_bag(&bytes[..bytes.len() - 3], None),
            Err(Error::Format { offset: 16, .. })
        ));

        let mut empty = bytes[..16].to_vec();
        empty[8..12].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(decode_bag(&empty, None), Err(Error::Data(_))));
    }

    #[test]
    fn csv_import() {
        let text = b"patch_id,cx,cy,f0,f1\np0,0.5,0.25,1.0,-2.0\np1,0.0,1.0,3.5,0\n";
        let (c, f) = parse_csv_bag(text, Some(2)).unwrap();
        assert_eq!(c, vec![[0.5, 0.25], [0.0, 1.0]]);
        assert_eq!(f.data(), &[1.0, -2.0, 3.5, 0.0]);
        assert!(matches!(
            parse_csv_bag(text, Some(3)),
            Err(Error::Format { .. })
        ));
        assert!(matches!(
            parse_csv_bag(b"id,x,y,f0\n", None),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(matches!(
            parse_csv_bag(b"patch_id,cx,cy,f0\np0,0.1,0.2,abc\n", None),
            Err(Error::Format { offset: 18, .. })
        ));
        assert!(matches!(
            parse_csv_bag(b"patch_id,cx,cy,f0\n", None),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn manifest_checks() {
        let ok = r#"{"d1": 4, "slides": [{"slide_id": "a", "patient_id": "p", "label": 1, "path": "a.bin"}]}"#;
        assert_eq!(Manifest::parse(ok).unwrap().slides.len(), 1);
        let dup = r#"{"d1": 4, "slides": [
            {"slide_id": "a", "patient_id": "p", "label": 1, "path": "a.bin"},
            {"slide_id": "a", "patient_id": "q", "label": 0, "path": "b.bin"}]}"#;
        let label = r#"{"d1": 4, "slides": [{"slide_id": "a", "patient_id": "p", "label": 2, "path": "a.bin"}]}"#;
        let missing = r#"{"slides": []}"#;
        let unknown = r#"{"d1": 4, "slides": [], "extra": 1}"#;
        for (text, key) in [
            (dup, "slide_id"),
            (label, "label"),
            (missing, "d1"),
            (unknown, "extra"),
        ] {
            match Manifest::parse(text) {
                Err(Error::Config(msg)) => assert!(msg.contains(key), "{msg}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn dataset_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let d = generate_synthetic_dataset(&small(SynthTask::Spatial)).unwrap();
        let path = write_dataset(dir.path(), &d.manifest, &d.bags).unwrap();
        let (m, bags) = load_dataset(&path).unwrap();
        assert_eq!(m, d.manifest);
        assert_eq!(bags, d.bags);
    }
}
