//! Bit-exact volume file format (".s4cvol") and case manifests.
//!
//! Layout of a volume file:
//!
//! ```text
//! bytes 0..12   magic  b"S4CVOLUME\0\0\0"
//! bytes 12..16  format version, u32 little-endian (currently 1)
//! bytes 16..20  header length N, u32 little-endian
//! bytes 20..20+N UTF-8 JSON: {"dims":[W,H,L],"dtype":"i16"|"u8"|"f32","channels":1|3}
//! rest          raw little-endian payload, x fastest, channel innermost
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::volume::{CtVolume, Dims, LabelVolume, ProbVolume, NUM_CLASSES};
use crate::{Error, Result};

const MAGIC: &[u8; 12] = b"S4CVOLUME\0\0\0";
const VERSION: u32 = 1;

/// Any of the three on-disk volume flavors.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    Ct(CtVolume),
    Label(LabelVolume),
    Prob(ProbVolume),
}

#[derive(Serialize, Deserialize)]
struct VolHeader {
    dims: [usize; 3],
    dtype: String,
    channels: usize,
}

fn encode(dims: Dims, dtype: &str, channels: usize, payload: Vec<u8>) -> Vec<u8> {
    let header = serde_json::to_vec(&VolHeader {
        dims: dims.as_array(),
        dtype: dtype.to_string(),
        channels,
    })
    .expect("header serialization cannot fail");
    let mut out = Vec::with_capacity(20 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out
}

/// Serialize a volume to its on-disk byte representation.
pub fn volume_to_bytes(v: &Volume) -> Vec<u8> {
    match v {
        Volume::Ct(ct) => {
            let mut payload = Vec::with_capacity(ct.data().len() * 2);
            for x in ct.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            encode(ct.dims(), "i16", 1, payload)
        }
        Volume::Label(lv) => encode(lv.dims(), "u8", 1, lv.data().to_vec()),
        Volume::Prob(pv) => {
            let mut payload = Vec::with_capacity(pv.data().len() * 4);
            for x in pv.data() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
            encode(pv.dims(), "f32", NUM_CLASSES, payload)
        }
    }
}

/// Parse a volume from its on-disk byte representation.
pub fn volume_from_bytes(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 20 {
        return Err(Error::Format("file shorter than the 20-byte preamble".into()));
    }
    if &bytes[..12] != MAGIC {
        return Err(Error::Format("bad magic; not a .s4cvol file".into()));
    }
    let version = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    if bytes.len() < 20 + hlen {
        return Err(Error::Format("truncated header".into()));
    }
    let header: VolHeader = serde_json::from_slice(&bytes[20..20 + hlen])
        .map_err(|e| Error::Format(format!("bad header JSON: {e}")))?;
    let dims = Dims::from(header.dims);
    let payload = &bytes[20 + hlen..];
    let n = dims.count();
    match (header.dtype.as_str(), header.channels) {
        ("i16", 1) => {
            if payload.len() != n * 2 {
                return Err(Error::Format(format!(
                    "i16 payload holds {} elements, dims require {n}",
                    payload.len() / 2
                )));
            }
            let data = payload
                .chunks_exact(2)
                .map(|c| i16::from_le_bytes([c[0], c[1]]))
                .collect();
            Ok(Volume::Ct(CtVolume::new(dims, data)?))
        }
        ("u8", 1) => {
            if payload.len() != n {
                return Err(Error::Format(format!(
                    "u8 payload holds {} elements, dims require {n}",
                    payload.len()
                )));
            }
            Ok(Volume::Label(LabelVolume::new(dims, payload.to_vec())?))
        }
        ("f32", c) if c == NUM_CLASSES => {
            if payload.len() != n * NUM_CLASSES * 4 {
                return Err(Error::Format(format!(
                    "f32 payload holds {} elements, dims require {}",
                    payload.len() / 4,
                    n * NUM_CLASSES
                )));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(Volume::Prob(ProbVolume::new(dims, data)?))
        }
        (dt, ch) => Err(Error::Format(format!("unsupported dtype/channels: {dt}/{ch}"))),
    }
}

/// Write a volume to `path`.
pub fn save_volume(v: &Volume, path: &Path) -> Result<()> {
    fs::write(path, volume_to_bytes(v))?;
    Ok(())
}

/// Read any volume from `path`.
pub fn load_volume(path: &Path) -> Result<Volume> {
    let bytes = fs::read(path)?;
    volume_from_bytes(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

impl CtVolume {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_volume(&Volume::Ct(self.clone()), path)
    }

    pub fn load(path: &Path) -> Result<CtVolume> {
        match load_volume(path)? {
            Volume::Ct(v) => Ok(v),
            _ => Err(Error::Format(format!("{}: not an i16 volume", path.display()))),
        }
    }
}

impl LabelVolume {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_volume(&Volume::Label(self.clone()), path)
    }

    pub fn load(path: &Path) -> Result<LabelVolume> {
        match load_volume(path)? {
            Volume::Label(v) => Ok(v),
            _ => Err(Error::Format(format!("{}: not a u8 label volume", path.display()))),
        }
    }
}

impl ProbVolume {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_volume(&Volume::Prob(self.clone()), path)
    }

    pub fn load(path: &Path) -> Result<ProbVolume> {
        match load_volume(path)? {
            Volume::Prob(v) => Ok(v),
            _ => Err(Error::Format(format!("{}: not an f32 probability volume", path.display()))),
        }
    }
}

/// One dataset record: paths plus the case-level ground-truth label.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    /// 0 for a normal case, 1 for an abnormal case.
    pub label: u8,
}

pub type CaseManifest = Vec<CaseEntry>;

/// Load a manifest; relative image/mask paths are resolved against the
/// manifest's directory.
pub fn load_manifest(path: &Path) -> Result<CaseManifest> {
    let bytes = fs::read(path)?;
    let mut manifest: CaseManifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: bad manifest JSON: {e}", path.display())))?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    for entry in &mut manifest {
        if entry.label > 1 {
            return Err(Error::Format(format!(
                "case {}: label {} is not 0 or 1",
                entry.id, entry.label
            )));
        }
        if entry.image.is_relative() {
            entry.image = base.join(&entry.image);
        }
        if let Some(m) = &entry.mask {
            if m.is_relative() {
                entry.mask = Some(base.join(m));
            }
        }
    }
    Ok(manifest)
}

/// Write a manifest as pretty JSON. Paths are written as stored, so keep
/// them relative to the manifest location for portable datasets.
pub fn save_manifest(manifest: &CaseManifest, path: &Path) -> Result<()> {
    let json = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest serialization: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn label_round_trip_identity() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("zeros.s4cvol");
        let v = LabelVolume::zeros(Dims::new(4, 4, 4));
        v.save(&p).unwrap();
        assert_eq!(LabelVolume::load(&p).unwrap(), v);
    }

    #[test]
    fn ct_round_trip_is_bit_identical() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let data: Vec<i16> = (0..27).map(|_| rng.random_range(-1024..=3071)).collect();
        let v = CtVolume::new(Dims::new(3, 3, 3), data).unwrap();
        let bytes = volume_to_bytes(&Volume::Ct(v.clone()));
        let reloaded = volume_from_bytes(&bytes).unwrap();
        // byte-compare oracle: re-encoding the decoded volume must
        // reproduce the file exactly
        assert_eq!(volume_to_bytes(&reloaded), bytes);
        assert_eq!(reloaded, Volume::Ct(v));
    }

    #[test]
    fn payload_length_mismatch_is_reported() {
        // header says 2x2x2 but the payload carries 7 u8 elements
        let bad = encode(Dims::new(2, 2, 2), "u8", 1, vec![0; 7]);
        let err = volume_from_bytes(&bad).unwrap_err();
        assert!(matches!(err, Error::Format(_)), "got {err:?}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_volume(Path::new("/nonexistent/void.s4cvol")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let mut bytes = volume_to_bytes(&Volume::Label(LabelVolume::zeros(Dims::new(2, 2, 2))));
        bytes[0] = b'X';
        assert!(matches!(volume_from_bytes(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_label_value_in_payload_is_rejected() {
        let bad = encode(Dims::new(2, 2, 2), "u8", 1, vec![0, 1, 2, 3, 0, 0, 0, 0]);
        assert!(matches!(volume_from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn manifest_round_trip_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = vec![CaseEntry {
            id: "case_0".into(),
            image: PathBuf::from("images/case_0.s4cvol"),
            mask: None,
            label: 1,
        }];
        let p = dir.path().join("manifest.json");
        save_manifest(&manifest, &p).unwrap();
        let loaded = load_manifest(&p).unwrap();
        assert_eq!(loaded[0].image, dir.path().join("images/case_0.s4cvol"));
        assert_eq!(loaded[0].label, 1);
    }

    proptest! {
        // load(save(v)) is bit-identical for every volume flavor.
        #[test]
        fn round_trip_any_volume(
            w in 1usize..5, h in 1usize..5, l in 1usize..5,
            seed in 0u64..1000,
        ) {
            let dims = Dims::new(w, h, l);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let ct: Vec<i16> = (0..dims.count()).map(|_| rng.random_range(i16::MIN..=i16::MAX)).collect();
            let labels: Vec<u8> = (0..dims.count()).map(|_| rng.random_range(0..3)).collect();
            let probs: Vec<f32> = (0..dims.count())
                .flat_map(|_| {
                    let a: f32 = rng.random_range(0.0..1.0);
                    let b: f32 = rng.random_range(0.0..1.0 - a);
                    [a, b, 1.0 - a - b]
                })
                .collect();
            for v in [
                Volume::Ct(CtVolume::new(dims, ct).unwrap()),
                Volume::Label(LabelVolume::new(dims, labels).unwrap()),
                Volume::Prob(ProbVolume::new(dims, probs).unwrap()),
            ] {
                let bytes = volume_to_bytes(&v);
                let back = volume_from_bytes(&bytes).unwrap();
                prop_assert_eq!(volume_to_bytes(&back), bytes);
            }
        }
    }
}
