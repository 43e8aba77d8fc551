//! Model file format: a line-oriented ASCII header followed by a raw
//! little-endian f32 parameter blob.
//!
//! Layout, in order, one line each terminated by '\n':
//!
//! ```text
//! evolrp-model v1
//! input_shape C H W
//! classes name1 name2 ...          (names contain no whitespace)
//! layers N
//! layer Conv2d out OC in IC kh KH kw KW stride S      (one line per layer)
//! layer Dense out OF in IF
//! layer ReLU | layer MaxPool2x2 | layer Flatten
//! params P                         (total f32 count in the blob)
//! crc32 HHHHHHHH                   (IEEE CRC-32 of the blob, lowercase hex)
//! end
//! ```
//!
//! The blob (4·P bytes) follows immediately after "end\n": for each
//! parameterized layer in declared order, the weight tensor row-major, then
//! the bias. Loading verifies the length, the checksum, and layer-to-layer
//! shape compatibility; round-trips are bit-exact.

use crate::error::{Error, Result};
use crate::net::{Layer, Model};
use crate::tensor::Tensor;
use std::io::Write;
use std::path::Path;

const MAGIC: &str = "evolrp-model v1";

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    model.validate()?;
    for name in &model.class_names {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c.is_control()) {
            return Err(Error::InvalidArgument(format!(
                "class name {name:?} must be non-empty without whitespace"
            )));
        }
    }
    let mut blob: Vec<u8> = Vec::new();
    for layer in &model.layers {
        if let Layer::Conv2d { weight, bias, .. } | Layer::Dense { weight, bias } = layer {
            for &v in weight.data().iter().chain(bias.data()) {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let [c, h, w] = model.input_shape;
    header.push_str(&format!("input_shape {c} {h} {w}\n"));
    header.push_str(&format!("classes {}\n", model.class_names.join(" ")));
    header.push_str(&format!("layers {}\n", model.layers.len()));
    for layer in &model.layers {
        match layer {
            Layer::Conv2d { weight, stride, .. } => {
                let s = weight.shape();
                header.push_str(&format!(
                    "layer Conv2d out {} in {} kh {} kw {} stride {stride}\n",
                    s[0], s[1], s[2], s[3]
                ));
            }
            Layer::Dense { weight, .. } => {
                let s = weight.shape();
                header.push_str(&format!("layer Dense out {} in {}\n", s[0], s[1]));
            }
            other => header.push_str(&format!("layer {}\n", other.kind_name())),
        }
    }
    header.push_str(&format!("params {}\n", blob.len() / 4));
    header.push_str(&format!("crc32 {:08x}\n", crc32(&blob)));
    header.push_str("end\n");

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(header.as_bytes())?;
    file.write_all(&blob)?;
    file.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    let mut cursor = Cursor { bytes: &bytes, pos: 0 };

    let magic = cursor.line("magic")?;
    if magic != MAGIC {
        return Err(bad("magic", format!("expected {MAGIC:?}, got {magic:?}")));
    }
    let shape_line = cursor.line("input_shape")?;
    let input_shape = {
        let v = parse_fields(&shape_line, "input_shape", &["input_shape"], 3)?;
        [v[0], v[1], v[2]]
    };
    let classes_line = cursor.line("classes")?;
    let class_names: Vec<String> = match classes_line.strip_prefix("classes ") {
        Some(rest) if !rest.trim().is_empty() => rest.split_whitespace().map(String::from).collect(),
        _ => return Err(bad("classes", format!("unparseable line {classes_line:?}"))),
    };
    let n_layers = parse_fields(&cursor.line("layers")?, "layers", &["layers"], 1)?[0];

    let mut layer_specs = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let field = format!("layer {i}");
        let line = cursor.line(&field)?;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.first() != Some(&"layer") || toks.len() < 2 {
            return Err(bad(&field, format!("unparseable line {line:?}")));
        }
        layer_specs.push((field, toks.iter().map(|s| s.to_string()).collect::<Vec<_>>()));
    }
    let n_params = parse_fields(&cursor.line("params")?, "params", &["params"], 1)?[0];
    let crc_line = cursor.line("crc32")?;
    let declared_crc = match crc_line.strip_prefix("crc32 ") {
        Some(hex) => u32::from_str_radix(hex.trim(), 16)
            .map_err(|_| bad("crc32", format!("bad hex {hex:?}")))?,
        None => return Err(bad("crc32", format!("unparseable line {crc_line:?}"))),
    };
    let end_line = cursor.line("end")?;
    if end_line != "end" {
        return Err(bad("end", format!("expected \"end\", got {end_line:?}")));
    }

    let blob = &bytes[cursor.pos..];
    if blob.len() != n_params * 4 {
        return Err(bad(
            "blob",
            format!("length mismatch: declared {} bytes ({n_params} params), found {}", n_params * 4, blob.len()),
        ));
    }
    if crc32(blob) != declared_crc {
        return Err(bad(
            "crc32",
            format!("checksum mismatch: declared {declared_crc:08x}, computed {:08x}", crc32(blob)),
        ));
    }

    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut take = |n: usize, shape: Vec<usize>, field: &str| -> Result<Tensor> {
        let data: Vec<f32> = values.by_ref().take(n).collect();
        if data.len() != n {
            return Err(bad(field, format!("blob exhausted reading {n} values")));
        }
        Tensor::new(shape, data).map_err(|e| bad(field, e.to_string()))
    };
    let mut layers = Vec::with_capacity(n_layers);
    let mut consumed = 0usize;
    for (field, toks) in &layer_specs {
        let toks: Vec<&str> = toks.iter().map(String::as_str).collect();
        let layer = match toks[1] {
            "Conv2d" => {
                let v = parse_kv(&toks[2..], field, &["out", "in", "kh", "kw", "stride"])?;
                let (oc, ic, kh, kw, stride) = (v[0], v[1], v[2], v[3], v[4]);
                let wn = oc * ic * kh * kw;
                consumed += wn + oc;
                Layer::Conv2d {
                    weight: take(wn, vec![oc, ic, kh, kw], field)?,
                    bias: take(oc, vec![oc], field)?,
                    stride,
                }
            }
            "Dense" => {
                let v = parse_kv(&toks[2..], field, &["out", "in"])?;
                let (of, inf) = (v[0], v[1]);
                consumed += of * inf + of;
                Layer::Dense {
                    weight: take(of * inf, vec![of, inf], field)?,
                    bias: take(of, vec![of], field)?,
                }
            }
            "ReLU" => Layer::ReLU,
            "MaxPool2x2" => Layer::MaxPool2x2,
            "Flatten" => Layer::Flatten,
            other => return Err(bad(field, format!("unknown layer kind {other:?}"))),
        };
        layers.push(layer);
    }
    if consumed != n_params {
        return Err(bad(
            "params",
            format!("declared {n_params} params but layers define {consumed}"),
        ));
    }

    let model = Model { layers, input_shape, class_names };
    model.validate()?;
    Ok(model)
}

fn bad(field: &str, reason: String) -> Error {
    Error::ModelFile { field: field.to_string(), reason }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Next '\n'-terminated line as UTF-8, or a field error naming `field`.
    fn line(&mut self, field: &str) -> Result<String> {
        let rest = &self.bytes[self.pos.min(self.bytes.len())..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| bad(field, "unexpected end of header".into()))?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| bad(field, "header is not valid UTF-8".into()))?;
        self.pos += nl + 1;
        Ok(line.to_string())
    }
}

/// Parse "keyword v1 v2 ..." with an exact keyword and value count.
fn parse_fields(line: &str, field: &str, keyword: &[&str], n: usize) -> Result<Vec<usize>> {
    let toks: Vec<&str> = line.split_whitespace().collect();
    if toks.len() != keyword.len() + n || toks[..keyword.len()] != *keyword {
        return Err(bad(field, format!("unparseable line {line:?}")));
    }
    toks[keyword.len()..]
        .iter()
        .map(|t| t.parse::<usize>().map_err(|_| bad(field, format!("bad integer {t:?}"))))
        .collect()
}

/// Parse alternating "key value" tokens with fixed expected keys.
fn parse_kv(toks: &[&str], field: &str, keys: &[&str]) -> Result<Vec<usize>> {
    if toks.len() != keys.len() * 2 {
        return Err(bad(field, format!("expected {} key-value pairs", keys.len())));
    }
    let mut out = Vec::with_capacity(keys.len());
    for (i, key) in keys.iter().enumerate() {
        if toks[2 * i] != *key {
            return Err(bad(field, format!("expected key {key:?}, got {:?}", toks[2 * i])));
        }
        out.push(
            toks[2 * i + 1]
                .parse::<usize>()
                .map_err(|_| bad(field, format!("bad integer {:?}", toks[2 * i + 1])))?,
        );
    }
    Ok(out)
}

/// IEEE CRC-32 (reflected, polynomial 0xEDB88320), as used by zlib.
pub(crate) fn crc32(bytes: &[u8]) -> u32 {
    const TABLE: [u32; 256] = crc32_table();
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = (crc >> 8) ^ TABLE[((crc ^ b as u32) & 0xFF) as usize];
    }
    !crc
}

const fn crc32_table() -> [u32; 256] {
    let mut table = [0u32; 256];
    let mut i = 0;
    while i < 256 {
        let mut c = i as u32;
        let mut k = 0;
        while k < 8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            k += 1;
        }
        table[i] = c;
        i += 1;
    }
    table
}
