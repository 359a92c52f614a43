//! NDS1 feature files and their JSON manifests.
//!
//! Layout (all little-endian):
//!
//! ```text
//! magic "NDS1" | version u16 | d u32 | count u64 | n_classes u32     (22 bytes)
//! count x [ label u32 | run_id u32 | d x f32 ]
//! ```
//!
//! Sample ids are implicit (record index). The manifest carries the
//! macro-experience intervals and a SHA-256 digest of the feature file.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::stream::{validate_macro_plan, MacroExperienceDescriptor, Sample, StreamView};
use crate::synth::StreamSpec;

pub const MAGIC: [u8; 4] = *b"NDS1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 22;
/// Default cap on the logical size a header may announce: 16 GiB.
pub const DEFAULT_MAX_BYTES: u64 = 16 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u16,
    pub dim: u32,
    pub count: u64,
    pub n_classes: u32,
}

impl FeatureFileHeader {
    pub fn record_len(&self) -> u64 {
        8 + 4 * self.dim as u64
    }

    /// Total file length implied by the header, `None` on overflow.
    pub fn expected_len(&self) -> Option<u64> {
        self.count
            .checked_mul(self.record_len())
            .and_then(|b| b.checked_add(HEADER_LEN))
    }

    fn encode(&self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[0..4].copy_from_slice(&MAGIC);
        out[4..6].copy_from_slice(&self.version.to_le_bytes());
        out[6..10].copy_from_slice(&self.dim.to_le_bytes());
        out[10..18].copy_from_slice(&self.count.to_le_bytes());
        out[18..22].copy_from_slice(&self.n_classes.to_le_bytes());
        out
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ReadOptions {
    pub max_bytes: u64,
}

impl Default for ReadOptions {
    fn default() -> Self {
        Self {
            max_bytes: DEFAULT_MAX_BYTES,
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} does not fit in 32 bits")))
}

/// Encodes samples in NDS1 layout.
pub fn encode_samples(samples: &[Sample], dim: usize, n_classes: usize) -> Result<Vec<u8>> {
    let header = FeatureFileHeader {
        version: VERSION,
        dim: to_u32(dim, "dimension")?,
        count: samples.len() as u64,
        n_classes: to_u32(n_classes, "class count")?,
    };
    let mut out = Vec::with_capacity(header.expected_len().unwrap_or(0) as usize);
    out.extend_from_slice(&header.encode());
    for s in samples {
        if s.features.len() != dim {
            return Err(Error::Shape {
                expected: dim,
                actual: s.features.len(),
            });
        }
        out.extend_from_slice(&to_u32(s.label, "label")?.to_le_bytes());
        out.extend_from_slice(&s.run_id.to_le_bytes());
        for v in &s.features {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn write_samples(samples: &[Sample], dim: usize, n_classes: usize, path: &Path) -> Result<()> {
    let bytes = encode_samples(samples, dim, n_classes)?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_feature_file(stream: &StreamView, path: &Path) -> Result<()> {
    write_samples(&stream.samples, stream.dim, stream.n_classes, path)
}

pub fn read_feature_file(path: &Path) -> Result<StreamView> {
    read_feature_file_with(path, &ReadOptions::default())
}

pub fn read_feature_file_with(path: &Path, opts: &ReadOptions) -> Result<StreamView> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path, opts)
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn parse_header(bytes: &[u8], path: &Path) -> Result<FeatureFileHeader> {
    if bytes.len() < 4 || bytes[0..4] != MAGIC {
        return Err(format_err(path, "missing NDS1 magic"));
    }
    if bytes.len() < HEADER_LEN as usize {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            expected: HEADER_LEN,
            actual: bytes.len() as u64,
        });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
            supported: VERSION,
        });
    }
    let le32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let header = FeatureFileHeader {
        version,
        dim: le32(6),
        count: u64::from_le_bytes(bytes[10..18].try_into().unwrap()),
        n_classes: le32(18),
    };
    if header.dim == 0 || header.n_classes == 0 {
        return Err(format_err(path, "dimension and class count must be positive"));
    }
    Ok(header)
}

fn decode(bytes: &[u8], path: &Path, opts: &ReadOptions) -> Result<StreamView> {
    let header = parse_header(bytes, path)?;
    let expected = header
        .expected_len()
        .filter(|&n| n <= opts.max_bytes)
        .ok_or_else(|| {
            format_err(
                path,
                format!(
                    "header announces {} records of dimension {}, above the {}-byte cap",
                    header.count, header.dim, opts.max_bytes
                ),
            )
        })?;
    if bytes.len() as u64 != expected {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    let dim = header.dim as usize;
    let n_classes = header.n_classes as usize;
    let rec = header.record_len() as usize;
    let mut samples = Vec::with_capacity(header.count as usize);
    for (i, chunk) in bytes[HEADER_LEN as usize..].chunks_exact(rec).enumerate() {
        let label = u32::from_le_bytes(chunk[0..4].try_into().unwrap()) as usize;
        let run_id = u32::from_le_bytes(chunk[4..8].try_into().unwrap());
        if label >= n_classes {
            return Err(format_err(
                path,
                format!("record {i} has label {label} >= class count {n_classes}"),
            ));
        }
        let features = chunk[8..]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        samples.push(Sample::new(i as u64, features, label, run_id));
    }
    StreamView::new(samples, dim, n_classes, Vec::new())
}

pub fn digest_bytes(bytes: &[u8]) -> String {
    format!("sha256:{}", hex::encode(Sha256::digest(bytes)))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroInterval {
    pub start: usize,
    pub end: usize,
    pub proportions: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    /// Feature file, relative to the manifest's directory unless absolute.
    pub features: PathBuf,
    pub digest: String,
    pub d: usize,
    #[serde(rename = "N_c")]
    pub n_classes: usize,
    pub split: Split,
    pub macros: Vec<MacroInterval>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<StreamSpec>,
}

impl StreamManifest {
    pub fn macro_plan(&self) -> Vec<MacroExperienceDescriptor> {
        self.macros
            .iter()
            .enumerate()
            .map(|(e, m)| MacroExperienceDescriptor {
                start: m.start,
                end: m.end,
                class_proportions: m.proportions.clone(),
                drift_tag: m.tag.clone().unwrap_or_else(|| format!("condition-{e}")),
            })
            .collect()
    }

    pub fn features_path(&self, manifest_path: &Path) -> PathBuf {
        if self.features.is_absolute() {
            self.features.clone()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(&self.features)
        }
    }
}

pub fn save_manifest(manifest: &StreamManifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::invalid(format!("cannot serialize manifest: {e}")))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a manifest and checks it against its feature file (digest and
/// interval coverage).
pub fn load_manifest(path: &Path) -> Result<StreamManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: StreamManifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        column: e.column(),
        msg: e.to_string(),
    })?;
    let features = manifest.features_path(path);
    let bytes = fs::read(&features).map_err(|e| Error::io(&features, e))?;
    let actual = digest_bytes(&bytes);
    if actual != manifest.digest {
        return Err(Error::StaleManifest {
            path: features,
            expected: manifest.digest.clone(),
            actual,
        });
    }
    let header = parse_header(&bytes, &features)?;
    if header.dim as usize != manifest.d || header.n_classes as usize != manifest.n_classes {
        return Err(Error::invalid(format!(
            "manifest declares d={} N_c={} but {} has d={} N_c={}",
            manifest.d,
            manifest.n_classes,
            features.display(),
            header.dim,
            header.n_classes
        )));
    }
    validate_macro_plan(&manifest.macro_plan(), header.count as usize, manifest.n_classes)?;
    Ok(manifest)
}

/// Writes `<dir>/<stem>.nds` and `<dir>/<stem>.manifest.json`; returns the
/// manifest path.
pub fn write_stream_bundle(
    stream: &StreamView,
    dir: &Path,
    stem: &str,
    split: Split,
    spec: Option<&StreamSpec>,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let file_name = format!("{stem}.nds");
    let features = dir.join(&file_name);
    let bytes = encode_samples(&stream.samples, stream.dim, stream.n_classes)?;
    fs::write(&features, &bytes).map_err(|e| Error::io(&features, e))?;
    let manifest = StreamManifest {
        features: PathBuf::from(file_name),
        digest: digest_bytes(&bytes),
        d: stream.dim,
        n_classes: stream.n_classes,
        split,
        macros: stream
            .macro_plan
            .iter()
            .map(|m| MacroInterval {
                start: m.start,
                end: m.end,
                proportions: m.class_proportions.clone(),
                tag: Some(m.drift_tag.clone()),
            })
            .collect(),
        spec: spec.cloned(),
    };
    let manifest_path = dir.join(format!("{stem}.manifest.json"));
    save_manifest(&manifest, &manifest_path)?;
    Ok(manifest_path)
}

/// Loads the stream a manifest points at, with its macro plan attached.
pub fn load_stream(manifest_path: &Path) -> Result<(StreamView, StreamManifest)> {
    let manifest = load_manifest(manifest_path)?;
    let mut stream = read_feature_file(&manifest.features_path(manifest_path))?;
    stream.macro_plan = manifest.macro_plan();
    stream.validate()?;
    Ok((stream, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(n: usize, dim: usize) -> StreamView {
        let samples = (0..n)
            .map(|i| {
                let f = (0..dim).map(|j| (i * dim + j) as f32 * 0.25 - 3.0).collect();
                Sample::new(i as u64, f, i % 3, (i / 4) as u32)
            })
            .collect();
        StreamView::new(samples, dim, 3, Vec::new()).unwrap()
    }

    #[test]
    fn empty_stream_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.nds");
        write_feature_file(&stream(0, 4), &p).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(bytes.len(), 22);
        assert_eq!(&bytes[10..18], &0u64.to_le_bytes());
        assert_eq!(read_feature_file(&p).unwrap().len(), 0);
    }

    #[test]
    fn file_size_matches_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nds");
        write_feature_file(&stream(13, 5), &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 22 + 13 * (8 + 4 * 5));
    }

    #[test]
    fn header_bytes() {
        let bytes = encode_samples(&stream(2, 3).samples, 3, 3).unwrap();
        assert_eq!(&bytes[0..4], b"NDS1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..10], &[3, 0, 0, 0]);
        assert_eq!(&bytes[10..18], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&bytes[18..22], &[3, 0, 0, 0]);
        // first record: label 0, run 0, then -3.0f32
        assert_eq!(&bytes[22..30], &[0; 8]);
        assert_eq!(&bytes[30..34], &(-3.0f32).to_le_bytes());
    }

    #[test]
    fn bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nds");
        let mut bytes = encode_samples(&stream(3, 2).samples, 2, 3).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nds");
        let mut bytes = encode_samples(&stream(3, 2).samples, 2, 3).unwrap();
        bytes.truncate(bytes.len() - 5);
        fs::write(&p, bytes).unwrap();
        match read_feature_file(&p) {
            Err(Error::Corruption {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 22 + 3 * 16);
                assert_eq!(actual, 22 + 3 * 16 - 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn version_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.nds");
        let mut bytes = encode_samples(&stream(1, 2).samples, 2, 3).unwrap();
        bytes[4] = 9;
        fs::write(&p, bytes).unwrap();
        assert!(matches!(
            read_feature_file(&p),
            Err(Error::UnsupportedVersion { found: 9, .. })
        ));
    }

    #[test]
    fn oversized_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.nds");
        let mut bytes = encode_samples(&stream(1, 2).samples, 2, 3).unwrap();
        bytes[10..18].copy_from_slice(&u64::MAX.to_le_bytes());
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(read_feature_file(&p), Err(Error::Format { .. })));
        let opts = ReadOptions { max_bytes: 30 };
        fs::write(&p, encode_samples(&stream(2, 2).samples, 2, 3).unwrap()).unwrap();
        assert!(read_feature_file_with(&p, &opts).is_err());
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.nds");
        let s = stream(50, 7);
        write_feature_file(&s, &p).unwrap();
        assert_eq!(read_feature_file(&p).unwrap(), s);
    }

    #[test]
    fn manifest_round_trip_and_tamper() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = stream(12, 2);
        s.macro_plan = vec![
            MacroExperienceDescriptor {
                start: 0,
                end: 5,
                class_proportions: vec![0.5, 0.5, 0.0],
                drift_tag: "a".into(),
            },
            MacroExperienceDescriptor {
                start: 5,
                end: 12,
                class_proportions: vec![0.2, 0.3, 0.5],
                drift_tag: "b".into(),
            },
        ];
        let mp = write_stream_bundle(&s, dir.path(), "train", Split::Train, None).unwrap();
        let m = load_manifest(&mp).unwrap();
        save_manifest(&m, &dir.path().join("copy.manifest.json")).unwrap();
        assert_eq!(load_manifest(&dir.path().join("copy.manifest.json")).unwrap(), m);
        let (back, _) = load_stream(&mp).unwrap();
        assert_eq!(back, s);

        let fp = dir.path().join("train.nds");
        let mut bytes = fs::read(&fp).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        fs::write(&fp, bytes).unwrap();
        assert!(matches!(load_manifest(&mp), Err(Error::StaleManifest { .. })));
    }

    #[test]
    fn malformed_manifest_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, "{\n  \"features\": \"x.nds\",\n  \"digest\": 5\n}").unwrap();
        match load_manifest(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
