//! Dataset splits on disk: 16-bit P5 graymaps plus a manifest.
//!
//! ```text
//! <dir>/manifest.txt
//! <dir>/<split>/<id>.image.pgm   (intensity * 65535)
//! <dir>/<split>/<id>.label.pgm   (class index)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::losses::LabelMap;
use crate::seeds::derive_seed;
use crate::synth::{gen_scene, ShapeSceneConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Test,
    /// Label maps reserved for denoiser training, disjoint from the others.
    Denoiser,
}

impl Split {
    pub const ALL: [Split; 5] = [Split::Labeled, Split::Unlabeled, Split::Val, Split::Test, Split::Denoiser];

    pub fn name(self) -> &'static str {
        match self {
            Split::Labeled => "labeled",
            Split::Unlabeled => "unlabeled",
            Split::Val => "val",
            Split::Test => "test",
            Split::Denoiser => "denoiser",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown split {s:?}")))
    }

    fn has_image(self) -> bool {
        self != Split::Denoiser
    }

    fn has_label(self) -> bool {
        self != Split::Unlabeled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub scene: ShapeSceneConfig,
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
    pub denoiser: usize,
}

impl DatasetSpec {
    pub fn desk(n_classes: usize) -> Self {
        Self {
            scene: ShapeSceneConfig::desk(n_classes),
            labeled: 1,
            unlabeled: 100,
            val: 10,
            test: 50,
            denoiser: 20,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Labeled => self.labeled,
            Split::Unlabeled => self.unlabeled,
            Split::Val => self.val,
            Split::Test => self.test,
            Split::Denoiser => self.denoiser,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub image: Option<Tensor>,
    pub label: Option<LabelMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub examples: Vec<Example>,
}

/// Generator seed for example `index` of `split`; distinct splits draw from
/// distinct streams.
pub fn scene_seed(master: u64, split: Split, index: usize) -> u64 {
    derive_seed(master, &[split as u64 + 1, index as u64])
}

pub fn generate(spec: &DatasetSpec, master_seed: u64) -> Result<Dataset> {
    spec.scene.validate()?;
    if Split::ALL.iter().all(|&s| spec.count(s) == 0) {
        return Err(Error::Config("dataset spec requests zero examples".into()));
    }
    let mut examples = Vec::new();
    for split in Split::ALL {
        for i in 0..spec.count(split) {
            let seed = scene_seed(master_seed, split, i);
            let (image, label) = gen_scene(&spec.scene, &mut ChaCha8Rng::seed_from_u64(seed))?;
            examples.push(Example {
                id: format!("{}-{i:04}", split.name()),
                split,
                seed,
                image: split.has_image().then_some(image),
                label: split.has_label().then_some(label),
            });
        }
    }
    Ok(Dataset {
        height: spec.scene.height,
        width: spec.scene.width,
        n_classes: spec.scene.n_classes,
        examples,
    })
}

impl Dataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &Example> {
        self.examples.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    /// `(image, label)` pairs of a fully annotated split.
    pub fn pairs(&self, split: Split) -> Result<Vec<(Tensor, LabelMap)>> {
        self.split(split)
            .map(|e| match (&e.image, &e.label) {
                (Some(i), Some(l)) => Ok((i.clone(), l.clone())),
                _ => Err(Error::Data(format!("{} lacks an image or label", e.id))),
            })
            .collect()
    }

    pub fn images(&self, split: Split) -> Result<Vec<(String, Tensor)>> {
        self.split(split)
            .map(|e| {
                e.image
                    .clone()
                    .map(|i| (e.id.clone(), i))
                    .ok_or_else(|| Error::Data(format!("{} has no image", e.id)))
            })
            .collect()
    }

    pub fn labels(&self, split: Split) -> Result<Vec<LabelMap>> {
        self.split(split)
            .map(|e| e.label.clone().ok_or_else(|| Error::Data(format!("{} has no label", e.id))))
            .collect()
    }

    pub fn manifest(&self) -> String {
        let mut s = String::from("# sud synthetic dataset\n");
        let _ = writeln!(s, "height={}\nwidth={}\nclasses={}", self.height, self.width, self.n_classes);
        s.push_str("id,split,seed\n");
        for e in &self.examples {
            let _ = writeln!(s, "{},{},{}", e.id, e.split.name(), e.seed);
        }
        s
    }

    /// Writes into `dir`, which must be absent or empty unless `force`.
    pub fn write(&self, dir: &Path, force: bool) -> Result<()> {
        if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
            return Err(Error::Data(format!("{} exists and is not empty (use --force)", dir.display())));
        }
        fs::create_dir_all(dir)?;
        for split in Split::ALL {
            fs::create_dir_all(dir.join(split.name()))?;
        }
        for e in &self.examples {
            let base = dir.join(e.split.name());
            if let Some(img) = &e.image {
                let q: Vec<u16> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
                write_pgm16(&base.join(format!("{}.image.pgm", e.id)), self.width, self.height, &q)?;
            }
            if let Some(l) = &e.label {
                write_pgm16(&base.join(format!("{}.label.pgm", e.id)), self.width, self.height, l.data())?;
            }
        }
        fs::write(dir.join("manifest.txt"), self.manifest())?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("manifest.txt"))
            .map_err(|e| Error::Data(format!("{}: {e}", dir.join("manifest.txt").display())))?;
        let mut header = std::collections::HashMap::new();
        let mut rows = Vec::new();
        let mut in_rows = false;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            if line == "id,split,seed" {
                in_rows = true;
            } else if in_rows {
                rows.push(line);
            } else if let Some((k, v)) = line.split_once('=') {
                header.insert(k, v.parse::<usize>().map_err(|e| Error::Data(format!("manifest {k}: {e}")))?);
            }
        }
        let get = |k: &str| header.get(k).copied().ok_or_else(|| Error::Data(format!("manifest lacks {k}")));
        let (height, width, n_classes) = (get("height")?, get("width")?, get("classes")?);
        let mut examples = Vec::with_capacity(rows.len());
        for row in rows {
            let parts: Vec<&str> = row.split(',').collect();
            let [id, split, seed] = parts[..] else {
                return Err(Error::Data(format!("bad manifest row {row:?}")));
            };
            let split = Split::parse(split)?;
            let seed = seed.parse().map_err(|e| Error::Data(format!("seed in {row:?}: {e}")))?;
            let base = dir.join(split.name());
            let image = if split.has_image() {
                let (w, h, d) = read_pgm16(&base.join(format!("{id}.image.pgm")))?;
                check_dims(id, (w, h), (width, height))?;
                Some(Tensor::new(&[1, h, w], d.into_iter().map(|v| v as f64 / 65535.0).collect())?)
            } else {
                None
            };
            let label = if split.has_label() {
                let (w, h, d) = read_pgm16(&base.join(format!("{id}.label.pgm")))?;
                check_dims(id, (w, h), (width, height))?;
                Some(LabelMap::new(h, w, n_classes, d).map_err(|e| Error::Data(format!("{id}: {e}")))?)
            } else {
                None
            };
            examples.push(Example {
                id: id.to_string(),
                split,
                seed,
                image,
                label,
            });
        }
        Ok(Self {
            height,
            width,
            n_classes,
            examples,
        })
    }
}

fn check_dims(id: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Data(format!("{id}: {}x{} image, manifest says {}x{}", got.0, got.1, want.0, want.1)));
    }
    Ok(())
}

pub fn write_pgm16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    if data.len() != width * height {
        return Err(Error::Shape(format!("{} values for {width}x{height}", data.len())));
    }
    let mut buf = format!("P5\n{width} {height}\n65535\n").into_bytes();
    buf.reserve(data.len() * 2);
    for v in data {
        buf.extend(v.to_be_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a binary graymap; 8-bit files are accepted too.
pub fn read_pgm16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let bad = |m: &str| Error::Data(format!("{}: {m}", path.display()));
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ASCII header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary graymap"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    pos += 1; // single whitespace after maxval
    let wide = maxval > 255;
    let need = w * h * if wide { 2 } else { 1 };
    let body = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated pixel data"))?;
    let data = if wide {
        body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        body.iter().map(|&b| b as u16).collect()
    };
    Ok((w, h, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            scene: ShapeSceneConfig {
                height: 16,
                width: 16,
                radius: (2.0, 5.0),
                ..ShapeSceneConfig::desk(3)
            },
            labeled: 1,
            unlabeled: 3,
            val: 2,
            test: 2,
            denoiser: 2,
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        let data: Vec<u16> = (0..12).map(|i| i * 5000).collect();
        write_pgm16(&p, 4, 3, &data).unwrap();
        assert_eq!(read_pgm16(&p).unwrap(), (4, 3, data));
        let raw = fs::read(&p).unwrap();
        assert!(raw.starts_with(b"P5\n4 3\n65535\n"));
    }

    #[test]
    fn dataset_round_trip_and_manifest() {
        let ds = generate(&small_spec(), 9).unwrap();
        assert_eq!(ds.count(Split::Labeled), 1);
        assert_eq!(ds.count(Split::Unlabeled), 3);
        assert!(ds.split(Split::Unlabeled).all(|e| e.label.is_none()));
        assert!(ds.split(Split::Denoiser).all(|e| e.image.is_none()));
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("data");
        ds.write(&out, false).unwrap();
        assert_eq!(Dataset::read(&out).unwrap(), ds);
        assert!(matches!(ds.write(&out, false), Err(Error::Data(_))));
        ds.write(&out, true).unwrap();
        assert_eq!(generate(&small_spec(), 9).unwrap().manifest(), ds.manifest());
    }

    #[test]
    fn split_seeds_are_disjoint() {
        let mut seen = std::collections::HashSet::new();
        for s in Split::ALL {
            for i in 0..200 {
                assert!(seen.insert(scene_seed(1, s, i)));
            }
        }
    }

    #[test]
    fn empty_request_is_an_error() {
        let spec = DatasetSpec {
            labeled: 0,
            unlabeled: 0,
            val: 0,
            test: 0,
            denoiser: 0,
            ..small_spec()
        };
        assert!(matches!(generate(&spec, 0), Err(Error::Config(_))));
    }
}
