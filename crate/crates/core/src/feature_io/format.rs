//! Binary container: `magic[4] | version u8 | header_len u32 LE | JSON header | payload`.
//!
//! Feature and prompt files (`H2VF`) carry little-endian `f32` payloads,
//! masks (`H2VM`) carry one byte per pixel.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{FeatureGrid, MaskGrid, PromptBank};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const FEATURE_MAGIC: &[u8; 4] = b"H2VF";
pub const MASK_MAGIC: &[u8; 4] = b"H2VM";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind")]
enum FeatureHeader {
    #[serde(rename = "features")]
    Features {
        h_p: usize,
        w_p: usize,
        d: usize,
        has_global: bool,
    },
    #[serde(rename = "prompts-base")]
    PromptsBase {
        n_normal: usize,
        n_abnormal: usize,
        d: usize,
        labels: Vec<String>,
    },
    #[serde(rename = "prompts")]
    Prompts {
        n_normal: usize,
        n_abnormal: usize,
        d: usize,
        labels: Vec<String>,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskHeader {
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
}

/// Which stage produced a prompt file: raw template embeddings, or
/// embeddings already conditioned on the support set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    Base,
    Induced,
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |source| Error::Write {
        path: path.to_path_buf(),
        source,
    };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(wrap)?;
    tmp.write_all(bytes).map_err(wrap)?;
    tmp.as_file().sync_all().map_err(wrap)?;
    tmp.persist(path).map_err(|e| wrap(e.error))?;
    Ok(())
}

pub(crate) fn encode<H: Serialize>(magic: &[u8; 4], header: &H, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::validation("header too large"))?;
    let mut out = Vec::with_capacity(9 + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.push(FORMAT_VERSION);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

pub(crate) fn decode<'a, H: for<'de> Deserialize<'de>>(
    path: &Path,
    magic: &[u8; 4],
    bytes: &'a [u8],
) -> Result<(H, &'a [u8])> {
    if bytes.len() < 9 {
        return Err(Error::format(path, "file shorter than preamble"));
    }
    if &bytes[..4] != magic {
        return Err(Error::format(
            path,
            format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&bytes[..4]),
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    if bytes[4] != FORMAT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported version {}", bytes[4]),
        ));
    }
    let len = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[9..];
    if body.len() < len {
        return Err(Error::format(path, "truncated header"));
    }
    let header = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
    Ok((header, &body[len..]))
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn f32_payload<T: Scalar>(values: impl Iterator<Item = T>) -> Vec<u8> {
    values
        .flat_map(|v| v.to_f32().unwrap_or(f32::NAN).to_le_bytes())
        .collect()
}

fn parse_f32<T: Scalar>(path: &Path, payload: &[u8], count: usize) -> Result<Vec<T>> {
    let need = count * 4;
    if payload.len() < need {
        return Err(Error::format(
            path,
            format!("payload has {} bytes, expected {need}", payload.len()),
        ));
    }
    if payload.len() > need {
        return Err(Error::format(
            path,
            format!("{} trailing payload bytes", payload.len() - need),
        ));
    }
    Ok(payload
        .chunks_exact(4)
        .map(|c| {
            let v = f32::from_le_bytes(c.try_into().expect("4 bytes"));
            T::from(v).unwrap_or_else(T::nan)
        })
        .collect())
}

pub fn write_feature_grid<T: Scalar>(grid: &FeatureGrid<T>, path: &Path) -> Result<()> {
    // re-validate: grids can be built through `cast` from wider types
    let grid = FeatureGrid::new(grid.tokens.clone(), grid.h_p, grid.w_p, grid.global.clone())?;
    let header = FeatureHeader::Features {
        h_p: grid.h_p,
        w_p: grid.w_p,
        d: grid.dim(),
        has_global: grid.global.is_some(),
    };
    let values = grid
        .tokens
        .iter()
        .copied()
        .chain(grid.global.iter().flat_map(|g| g.iter().copied()));
    let bytes = encode(FEATURE_MAGIC, &header, &f32_payload(values))?;
    write_atomic(path, &bytes)
}

pub fn read_feature_grid<T: Scalar>(path: &Path) -> Result<FeatureGrid<T>> {
    let bytes = read_bytes(path)?;
    let (header, payload) = decode::<FeatureHeader>(path, FEATURE_MAGIC, &bytes)?;
    let FeatureHeader::Features {
        h_p,
        w_p,
        d,
        has_global,
    } = header
    else {
        return Err(Error::format(path, "expected kind \"features\""));
    };
    let n = h_p * w_p;
    let count = n * d + if has_global { d } else { 0 };
    let mut values = parse_f32::<T>(path, payload, count)?;
    let global = has_global.then(|| Array1::from(values.split_off(n * d)));
    let tokens =
        Array2::from_shape_vec((n, d), values).map_err(|e| Error::format(path, e.to_string()))?;
    FeatureGrid::new(tokens, h_p, w_p, global).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_mask(mask: &MaskGrid, path: &Path) -> Result<()> {
    let (height, width) = mask.shape();
    let payload: Vec<u8> = mask.values.iter().copied().collect();
    let bytes = encode(MASK_MAGIC, &MaskHeader { height, width }, &payload)?;
    write_atomic(path, &bytes)
}

pub fn read_mask(path: &Path) -> Result<MaskGrid> {
    let bytes = read_bytes(path)?;
    let (header, payload) = decode::<MaskHeader>(path, MASK_MAGIC, &bytes)?;
    let n = header.height * header.width;
    if payload.len() != n {
        return Err(Error::format(
            path,
            format!("mask payload has {} bytes, expected {n}", payload.len()),
        ));
    }
    let values = Array2::from_shape_vec((header.height, header.width), payload.to_vec())
        .map_err(|e| Error::format(path, e.to_string()))?;
    MaskGrid::new(values).map_err(|e| Error::format(path, e.to_string()))
}

pub fn write_prompt_bank<T: Scalar>(
    bank: &PromptBank<T>,
    kind: PromptKind,
    path: &Path,
) -> Result<()> {
    let (n_normal, n_abnormal, d, labels) = (
        bank.normal.nrows(),
        bank.abnormal.nrows(),
        bank.dim(),
        bank.labels.clone(),
    );
    let header = match kind {
        PromptKind::Base => FeatureHeader::PromptsBase {
            n_normal,
            n_abnormal,
            d,
            labels,
        },
        PromptKind::Induced => FeatureHeader::Prompts {
            n_normal,
            n_abnormal,
            d,
            labels,
        },
    };
    let values = bank.normal.iter().chain(bank.abnormal.iter()).copied();
    let bytes = encode(FEATURE_MAGIC, &header, &f32_payload(values))?;
    write_atomic(path, &bytes)
}

pub fn read_prompt_bank<T: Scalar>(path: &Path) -> Result<(PromptBank<T>, PromptKind)> {
    let bytes = read_bytes(path)?;
    let (header, payload) = decode::<FeatureHeader>(path, FEATURE_MAGIC, &bytes)?;
    let (n_normal, n_abnormal, d, labels, kind) = match header {
        FeatureHeader::PromptsBase {
            n_normal,
            n_abnormal,
            d,
            labels,
        } => (n_normal, n_abnormal, d, labels, PromptKind::Base),
        FeatureHeader::Prompts {
            n_normal,
            n_abnormal,
            d,
            labels,
        } => (n_normal, n_abnormal, d, labels, PromptKind::Induced),
        FeatureHeader::Features { .. } => {
            return Err(Error::format(path, "expected a prompt file"));
        }
    };
    let mut values = parse_f32::<T>(path, payload, (n_normal + n_abnormal) * d)?;
    let abnormal = values.split_off(n_normal * d);
    let shape_err = |e: ndarray::ShapeError| Error::format(path, e.to_string());
    let normal = Array2::from_shape_vec((n_normal, d), values).map_err(shape_err)?;
    let abnormal = Array2::from_shape_vec((n_abnormal, d), abnormal).map_err(shape_err)?;
    let bank = PromptBank::new(normal, abnormal, labels)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok((bank, kind))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn tiny_grid_has_header_plus_eight_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.h2vf");
        let grid = FeatureGrid::new(array![[0.0f32, 0.0]], 1, 1, None).unwrap();
        write_feature_grid(&grid, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"H2VF");
        assert_eq!(bytes[4], 1);
        let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + len]).unwrap();
        assert_eq!(header["kind"], "features");
        assert_eq!(header["d"], 2);
        assert_eq!(header["has_global"], false);
        assert_eq!(bytes.len(), 9 + len + 8);
    }

    #[test]
    fn nan_tokens_are_rejected_on_write() {
        let dir = tempfile::tempdir().unwrap();
        let grid = FeatureGrid::new(array![[1.0f64, 2.0]], 1, 1, None).unwrap();
        let mut bad = grid.clone();
        bad.tokens[[0, 0]] = f64::NAN;
        let err = write_feature_grid(&bad, &dir.path().join("x.h2vf")).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }

    #[test]
    fn bad_magic_and_truncation_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.h2vf");
        fs::write(&path, b"XXXX\x01\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            read_feature_grid::<f32>(&path),
            Err(Error::Format { .. })
        ));

        let grid = FeatureGrid::new(array![[1.0f32, 2.0], [3.0, 4.0]], 1, 2, None).unwrap();
        write_feature_grid(&grid, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            read_feature_grid::<f32>(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.h2vf");
        let grid = FeatureGrid::new(array![[1.0f32]], 1, 1, None).unwrap();
        write_feature_grid(&grid, &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4] = 2;
        fs::write(&path, &bytes).unwrap();
        assert!(read_feature_grid::<f32>(&path).is_err());
    }

    #[test]
    fn mask_and_bank_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mask = MaskGrid::new(array![[0u8, 1, 0], [1, 1, 0]]).unwrap();
        let mpath = dir.path().join("m.h2vm");
        write_mask(&mask, &mpath).unwrap();
        assert_eq!(read_mask(&mpath).unwrap(), mask);
        assert_eq!(&fs::read(&mpath).unwrap()[..4], b"H2VM");

        let bank = PromptBank::new(
            array![[1.0f32, 0.5], [0.25, 0.0]],
            array![[0.0f32, 1.0]],
            vec!["a".into(), "b".into(), "c".into()],
        )
        .unwrap();
        let bpath = dir.path().join("p.h2vf");
        write_prompt_bank(&bank, PromptKind::Induced, &bpath).unwrap();
        let (back, kind) = read_prompt_bank::<f32>(&bpath).unwrap();
        assert_eq!(back, bank);
        assert_eq!(kind, PromptKind::Induced);
        assert!(read_feature_grid::<f32>(&bpath).is_err());
    }

    fn arb_grid() -> impl Strategy<Value = FeatureGrid<f32>> {
        (1usize..4, 1usize..4, 1usize..6, any::<bool>()).prop_flat_map(|(h, w, d, g)| {
            let n = h * w * d + if g { d } else { 0 };
            proptest::collection::vec(-1e6f32..1e6, n).prop_map(move |mut vals| {
                let global = g.then(|| Array1::from(vals.split_off(h * w * d)));
                let tokens = Array2::from_shape_vec((h * w, d), vals).unwrap();
                FeatureGrid::new(tokens, h, w, global).unwrap()
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn feature_round_trip_is_exact(grid in arb_grid()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("g.h2vf");
            write_feature_grid(&grid, &path).unwrap();
            let back = read_feature_grid::<f32>(&path).unwrap();
            prop_assert_eq!(back.tokens.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            grid.tokens.as_slice().unwrap().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            prop_assert_eq!(back, grid);
        }
    }
}
