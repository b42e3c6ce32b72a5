//! Little-endian "DPLF" container.
//!
//! ```text
//! magic "DPLF" | u32 version = 1 | u64 count | u32 feature_dim | u32 num_classes
//! count × ( u64 id | u32 group | u32 label | feature_dim × f32 )
//! ```

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Dataset, LabeledInstance};
use crate::error::{DplError, Result};
use crate::io_util::{read_file, write_atomic};

pub const BINARY_MAGIC: &[u8; 4] = b"DPLF";
pub const BINARY_VERSION: u32 = 1;

const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4;

pub fn save_binary(dataset: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, &encode(dataset)?)
}

pub fn load_binary(path: &Path) -> Result<Dataset> {
    decode(&read_file(path)?).map_err(|e| e.with_path(path))
}

pub(crate) fn encode(dataset: &Dataset) -> Result<Vec<u8>> {
    let dim = dataset.feature_dim();
    let to_u32 = |v: usize, what: &str| {
        u32::try_from(v)
            .map_err(|_| DplError::Config(format!("{what} {v} does not fit in 32 bits")))
    };
    let mut out = Vec::with_capacity(HEADER_LEN + dataset.len() * (16 + 4 * dim));
    out.extend_from_slice(BINARY_MAGIC);
    // Writes into a Vec cannot fail.
    out.write_u32::<LittleEndian>(BINARY_VERSION).unwrap();
    out.write_u64::<LittleEndian>(dataset.len() as u64).unwrap();
    out.write_u32::<LittleEndian>(to_u32(dim, "feature dimension")?)
        .unwrap();
    out.write_u32::<LittleEndian>(to_u32(dataset.num_classes(), "class count")?)
        .unwrap();
    for inst in dataset.instances() {
        out.write_u64::<LittleEndian>(inst.id).unwrap();
        out.write_u32::<LittleEndian>(inst.group).unwrap();
        out.write_u32::<LittleEndian>(to_u32(inst.label, "label")?)
            .unwrap();
        for &v in inst.feature.iter() {
            out.write_f32::<LittleEndian>(v as f32).unwrap();
        }
    }
    Ok(out)
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() < HEADER_LEN {
        return Err(DplError::format(format!(
            "truncated header: {} bytes, need {HEADER_LEN}",
            bytes.len()
        )));
    }
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(truncated)?;
    if &magic != BINARY_MAGIC {
        return Err(DplError::format(format!(
            "bad magic {magic:?}, expected \"DPLF\""
        )));
    }
    let version = cur.read_u32::<LittleEndian>().map_err(truncated)?;
    if version != BINARY_VERSION {
        return Err(DplError::format(format!("unsupported version {version}")));
    }
    let count = cur.read_u64::<LittleEndian>().map_err(truncated)?;
    let dim = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    let num_classes = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
    if count == 0 {
        return Err(DplError::format("dataset is empty (count = 0)"));
    }
    if dim == 0 {
        return Err(DplError::format("feature dimension is 0"));
    }
    let record_len = 16 + 4 * dim as u64;
    let expected =
        (HEADER_LEN as u64).checked_add(count.saturating_mul(record_len));
    match expected {
        Some(n) if n == bytes.len() as u64 => {}
        Some(n) if n > bytes.len() as u64 => {
            return Err(DplError::format(format!(
                "truncated file: {} bytes, header promises {n}",
                bytes.len()
            )))
        }
        Some(n) => {
            return Err(DplError::format(format!(
                "{} trailing bytes after {count} records",
                bytes.len() as u64 - n
            )))
        }
        None => return Err(DplError::format("record count overflows")),
    }

    let mut instances = Vec::with_capacity(count as usize);
    for row in 0..count as usize {
        let id = cur.read_u64::<LittleEndian>().map_err(truncated)?;
        let group = cur.read_u32::<LittleEndian>().map_err(truncated)?;
        let label = cur.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        if label >= num_classes {
            return Err(DplError::format_at(
                row,
                format!("label {label} not below class count {num_classes}"),
            ));
        }
        let mut feature = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = cur.read_f32::<LittleEndian>().map_err(truncated)?;
            if !v.is_finite() {
                return Err(DplError::format_at(row, "non-finite feature value"));
            }
            feature.push(v as f64);
        }
        instances.push(LabeledInstance {
            id,
            group,
            label,
            feature: feature.into(),
            fine: None,
        });
    }
    Dataset::new(instances, num_classes)
}

fn truncated(_: std::io::Error) -> DplError {
    DplError::format("unexpected end of file")
}
