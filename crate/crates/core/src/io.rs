//! On-disk formats: raw arrays with a text header, 16-bit PGM images,
//! key/value manifests, and content hashes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grids::ScalarField;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

/// Incremental hasher over heterogeneous content.
#[derive(Default, Clone)]
pub struct ContentHash(Sha256);

impl ContentHash {
    pub fn new() -> Self {
        Self(Sha256::new())
    }

    pub fn text(&mut self, s: &str) -> &mut Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub fn f64s(&mut self, v: &[f64]) -> &mut Self {
        self.0.update((v.len() as u64).to_le_bytes());
        for x in v {
            self.0.update(x.to_le_bytes());
        }
        self
    }

    pub fn f32s(&mut self, v: &[f32]) -> &mut Self {
        self.0.update((v.len() as u64).to_le_bytes());
        for x in v {
            self.0.update(x.to_le_bytes());
        }
        self
    }

    pub fn finish(&self) -> String {
        let digest = self.0.clone().finalize();
        let mut s = String::with_capacity(64);
        for b in digest.iter() {
            let _ = write!(s, "{b:02x}");
        }
        s
    }
}

fn with_ext(base: &Path, ext: &str) -> PathBuf {
    let mut s = base.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    /// Additional `key = value` header lines, in order.
    pub extras: Vec<(String, String)>,
}

impl RawArray {
    pub fn extra(&self, key: &str) -> Option<&str> {
        self.extras.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// Writes `<base>.hdr` and `<base>.bin` (little-endian f64, row-major).
pub fn write_raw(base: &Path, array: &RawArray) -> Result<()> {
    let n: usize = array.dims.iter().product();
    if n != array.data.len() {
        return Err(Error::shape(format!(
            "raw array dims {:?} hold {n} values, got {}",
            array.dims,
            array.data.len()
        )));
    }
    let mut hdr = String::from("dtype = f64\n");
    let dims: Vec<String> = array.dims.iter().map(|d| d.to_string()).collect();
    let _ = writeln!(hdr, "dims = {}", dims.join(" "));
    hdr.push_str("order = row-major\nendian = little\n");
    for (k, v) in &array.extras {
        let _ = writeln!(hdr, "{k} = {v}");
    }
    let hdr_path = with_ext(base, "hdr");
    std::fs::write(&hdr_path, hdr).map_err(|e| Error::io(&hdr_path, e))?;
    let mut bin = Vec::with_capacity(8 * n);
    for v in &array.data {
        bin.extend_from_slice(&v.to_le_bytes());
    }
    let bin_path = with_ext(base, "bin");
    std::fs::write(&bin_path, bin).map_err(|e| Error::io(&bin_path, e))
}

pub fn read_raw(base: &Path) -> Result<RawArray> {
    let hdr_path = with_ext(base, "hdr");
    let text = std::fs::read_to_string(&hdr_path).map_err(|e| Error::io(&hdr_path, e))?;
    let mut dims = None;
    let mut extras = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(&hdr_path, format!("expected key = value: {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "dtype" if v != "f64" => return Err(Error::format(&hdr_path, format!("dtype {v}"))),
            "order" if v != "row-major" => return Err(Error::format(&hdr_path, format!("order {v}"))),
            "endian" if v != "little" => return Err(Error::format(&hdr_path, format!("endian {v}"))),
            "dtype" | "order" | "endian" => {}
            "dims" => {
                let parsed: std::result::Result<Vec<usize>, _> =
                    v.split_whitespace().map(str::parse).collect();
                dims = Some(parsed.map_err(|_| Error::format(&hdr_path, format!("dims {v:?}")))?);
            }
            _ => extras.push((k.to_string(), v.to_string())),
        }
    }
    let dims = dims.ok_or_else(|| Error::format(&hdr_path, "missing dims"))?;
    let n: usize = dims.iter().product();
    let bin_path = with_ext(base, "bin");
    let bytes = std::fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    if bytes.len() != 8 * n {
        return Err(Error::format(
            &bin_path,
            format!("expected {} bytes for dims {dims:?}, found {}", 8 * n, bytes.len()),
        ));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(RawArray { dims, data, extras })
}

pub fn write_field(base: &Path, field: &ScalarField) -> Result<()> {
    let spacing: Vec<String> = field.spacing().iter().map(|s| format!("{s:e}")).collect();
    write_raw(
        base,
        &RawArray {
            dims: field.dims().to_vec(),
            data: field.data().to_vec(),
            extras: vec![("spacing".into(), spacing.join(" "))],
        },
    )
}

pub fn read_field(base: &Path) -> Result<ScalarField> {
    let raw = read_raw(base)?;
    let spacing = match raw.extra("spacing") {
        Some(s) => s
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::format(with_ext(base, "hdr"), format!("spacing {s:?}")))?,
        None => vec![1.0; raw.dims.len()],
    };
    ScalarField::new(raw.dims, spacing, raw.data)
}

/// Maximum-intensity projection along the first axis; 2D fields pass
/// through unchanged.
pub fn display_image(field: &ScalarField) -> Result<(usize, usize, Vec<f64>)> {
    let dims = field.dims();
    match dims.len() {
        2 => Ok((dims[0], dims[1], field.data().to_vec())),
        3 => {
            let (h, w) = (dims[1], dims[2]);
            let mut out = vec![f64::NEG_INFINITY; h * w];
            for (i, v) in field.data().iter().enumerate() {
                let o = &mut out[i % (h * w)];
                *o = o.max(*v);
            }
            Ok((h, w, out))
        }
        n => Err(Error::invalid(format!("cannot display a {n}-d field"))),
    }
}

/// Binary 16-bit PGM (big-endian samples); `[0, display_max]` maps
/// linearly onto `[0, 65535]`, values outside are clipped.
pub fn encode_pgm(field: &ScalarField, display_max: f64) -> Result<Vec<u8>> {
    if !(display_max > 0.0) {
        return Err(Error::invalid("display maximum must be positive"));
    }
    let (h, w, pixels) = display_image(field)?;
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for v in pixels {
        let s = (v / display_max).clamp(0.0, 1.0) * 65535.0;
        out.extend_from_slice(&(s.round() as u16).to_be_bytes());
    }
    Ok(out)
}

pub fn write_pgm(path: &Path, field: &ScalarField, display_max: f64) -> Result<()> {
    let bytes = encode_pgm(field, display_max)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// `key = value` lines, in the given order.
pub fn write_manifest(path: &Path, entries: &[(String, String)]) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        let _ = writeln!(text, "{k} = {v}");
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::format(path, format!("expected key = value: {l:?}")))
        })
        .collect()
}

pub fn manifest_value<'a>(entries: &'a [(String, String)], key: &str) -> Option<&'a str> {
    entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

pub fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("x");
        let f = ScalarField::new(vec![2, 3], vec![0.5, 0.25], vec![1.0, -2.0, 3.5, 0.0, 1e-300, 7.0]).unwrap();
        write_field(&base, &f).unwrap();
        assert_eq!(read_field(&base).unwrap(), f);
        let hdr = std::fs::read_to_string(dir.path().join("x.hdr")).unwrap();
        assert!(hdr.starts_with("dtype = f64\ndims = 2 3\norder = row-major\nendian = little\n"));
        std::fs::write(dir.path().join("x.bin"), [0u8; 7]).unwrap();
        assert!(read_field(&base).is_err());
    }

    #[test]
    fn pgm_layout() {
        let f = ScalarField::new(vec![2, 2], vec![1.0; 2], vec![0.0, 0.5, 1.0, 2.0]).unwrap();
        let bytes = encode_pgm(&f, 1.0).unwrap();
        let header = b"P5\n2 2\n65535\n";
        assert_eq!(&bytes[..header.len()], header);
        let px = &bytes[header.len()..];
        assert_eq!(px, &[0, 0, 0x80, 0x00, 0xff, 0xff, 0xff, 0xff]);
    }

    #[test]
    fn projection_takes_the_maximum() {
        let f = ScalarField::new(vec![2, 1, 2], vec![1.0; 3], vec![1.0, 5.0, 3.0, 2.0]).unwrap();
        let (h, w, p) = display_image(&f).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(p, vec![3.0, 5.0]);
    }

    #[test]
    fn hashes_are_stable() {
        assert_eq!(
            sha256_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let a = ContentHash::new().text("x").f64s(&[1.0]).finish();
        let b = ContentHash::new().text("x").f64s(&[1.0]).finish();
        assert_eq!(a, b);
        assert_ne!(a, ContentHash::new().text("x").f64s(&[2.0]).finish());
    }
}
