//! Binary container for training pairs: CNN patches, two descriptor-table
//! blocks per pair, and the optional ground-truth rotation (NaN = absent).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::data::geometry::PATCH_SIDE;
use crate::descriptor::{read_table_block, write_table_block, DESCRIPTOR_DIM, TABLE_STEPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::TrainingPair;

const DATASET_MAGIC: &[u8; 4] = b"OPRS";
const DATASET_VERSION: u32 = 1;

pub fn save_dataset(path: &Path, pairs: &[TrainingPair]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    w.write_u32::<LittleEndian>(DATASET_VERSION)?;
    w.write_u32::<LittleEndian>(TABLE_STEPS as u32)?;
    w.write_u32::<LittleEndian>(DESCRIPTOR_DIM as u32)?;
    w.write_u32::<LittleEndian>(pairs.len() as u32)?;
    for p in pairs {
        for patch in [&p.patch1, &p.patch2] {
            if patch.len() != PATCH_SIDE * PATCH_SIDE {
                return Err(Error::invalid(
                    "save_dataset",
                    format!("patch has {} values, expected {}", patch.len(), PATCH_SIDE * PATCH_SIDE),
                ));
            }
            for &v in patch.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        write_table_block(&mut w, &p.table1)?;
        write_table_block(&mut w, &p.table2)?;
        w.write_f64::<LittleEndian>(p.gt_rotation.unwrap_or(f64::NAN))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<TrainingPair>> {
    let name = path.display().to_string();
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::Ingestion {
        path: name.clone(),
        detail: e.to_string(),
    })?);
    let bad = |detail: String| Error::Ingestion {
        path: name.clone(),
        detail,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|e| bad(format!("missing header: {e}")))?;
    if &magic != DATASET_MAGIC {
        return Err(bad("bad magic bytes".into()));
    }
    let version = r
        .read_u32::<LittleEndian>()
        .map_err(|e| bad(e.to_string()))?;
    if version != DATASET_VERSION {
        return Err(bad(format!(
            "dataset version {version}, expected {DATASET_VERSION}"
        )));
    }
    let k = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
    let dim = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))?;
    if k as usize != TABLE_STEPS || dim as usize != DESCRIPTOR_DIM {
        return Err(bad(format!(
            "table grid {k}x{dim}, expected {TABLE_STEPS}x{DESCRIPTOR_DIM}"
        )));
    }
    let count = r.read_u32::<LittleEndian>().map_err(|e| bad(e.to_string()))? as usize;

    let mut pairs = Vec::with_capacity(count);
    for record in 0..count {
        let pair = read_pair(&mut r).map_err(|e| Error::IngestionRecord {
            path: name.clone(),
            record,
            detail: e.to_string(),
        })?;
        pairs.push(pair);
    }
    Ok(pairs)
}

fn read_pair(r: &mut impl Read) -> Result<TrainingPair> {
    let mut read_patch = || -> Result<Tensor> {
        let mut data = vec![0.0f64; PATCH_SIDE * PATCH_SIDE];
        r.read_f64_into::<LittleEndian>(&mut data)?;
        Tensor::from_vec(&[1, 1, PATCH_SIDE, PATCH_SIDE], data)
    };
    let patch1 = read_patch()?;
    let patch2 = read_patch()?;
    let table1 = read_table_block(r)?;
    let table2 = read_table_block(r)?;
    let gt = r.read_f64::<LittleEndian>()?;
    Ok(TrainingPair {
        patch1,
        patch2,
        table1,
        table2,
        gt_rotation: if gt.is_nan() { None } else { Some(gt) },
    })
}
