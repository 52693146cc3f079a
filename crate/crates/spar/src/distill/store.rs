//! On-disk cache of precomputed teacher feature maps.
//!
//! Binary layout: magic `SPARFST1`, version u32 LE, record count u64 LE;
//! per record: id length u32 + UTF-8 id, h/w/d u32 LE, dtype u8
//! (0 = f32, 1 = f64), then the row-major channel-last payload LE.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::FeatureGrid;
use crate::{Result, SparError};

const MAGIC: &[u8; 8] = b"SPARFST1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreDtype {
    F32,
    F64,
}

impl StoreDtype {
    fn tag(self) -> u8 {
        match self {
            StoreDtype::F32 => 0,
            StoreDtype::F64 => 1,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(StoreDtype::F32),
            1 => Ok(StoreDtype::F64),
            other => Err(SparError::Format {
                format: "feature store",
                detail: format!("unknown dtype tag {other}"),
            }),
        }
    }
}

/// One precomputed feature map. For `F32` records the in-memory values
/// are exactly f32-representable, so write/read round trips are
/// byte-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStoreRecord {
    pub image_id: String,
    pub dtype: StoreDtype,
    pub features: FeatureGrid,
}

impl FeatureStoreRecord {
    /// Narrows the features to f32 storage precision.
    pub fn new_f32(image_id: String, features: &FeatureGrid) -> Self {
        let (h, w, d) = features.shape();
        let narrowed: Vec<f64> = features.data().iter().map(|&v| v as f32 as f64).collect();
        FeatureStoreRecord {
            image_id,
            dtype: StoreDtype::F32,
            features: FeatureGrid::from_vec(h, w, d, narrowed)
                .expect("narrowing preserves shape and finiteness"),
        }
    }
}

/// Append-ordered record collection with id lookup.
#[derive(Debug, Clone, Default)]
pub struct FeatureStore {
    records: Vec<FeatureStoreRecord>,
    index: BTreeMap<String, usize>,
}

impl FeatureStore {
    pub fn from_records(records: Vec<FeatureStoreRecord>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, rec) in records.iter().enumerate() {
            if index.insert(rec.image_id.clone(), i).is_some() {
                return Err(SparError::Format {
                    format: "feature store",
                    detail: format!("duplicate image id `{}`", rec.image_id),
                });
            }
        }
        Ok(FeatureStore { records, index })
    }

    pub fn records(&self) -> &[FeatureStoreRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, image_id: &str) -> Option<&FeatureStoreRecord> {
        self.index.get(image_id).map(|&i| &self.records[i])
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = File::create(path)
            .map_err(|e| SparError::io(format!("creating {}", path.display()), e))?;
        let mut w = BufWriter::new(file);
        let ctx = || format!("writing {}", path.display());
        w.write_all(MAGIC).map_err(|e| SparError::io(ctx(), e))?;
        w.write_all(&VERSION.to_le_bytes())
            .map_err(|e| SparError::io(ctx(), e))?;
        w.write_all(&(self.records.len() as u64).to_le_bytes())
            .map_err(|e| SparError::io(ctx(), e))?;
        for rec in &self.records {
            let id = rec.image_id.as_bytes();
            w.write_all(&(id.len() as u32).to_le_bytes())
                .map_err(|e| SparError::io(ctx(), e))?;
            w.write_all(id).map_err(|e| SparError::io(ctx(), e))?;
            let (h, wd, d) = rec.features.shape();
            for dim in [h, wd, d] {
                w.write_all(&(dim as u32).to_le_bytes())
                    .map_err(|e| SparError::io(ctx(), e))?;
            }
            w.write_all(&[rec.dtype.tag()])
                .map_err(|e| SparError::io(ctx(), e))?;
            match rec.dtype {
                StoreDtype::F32 => {
                    for &v in rec.features.data() {
                        w.write_all(&(v as f32).to_le_bytes())
                            .map_err(|e| SparError::io(ctx(), e))?;
                    }
                }
                StoreDtype::F64 => {
                    for &v in rec.features.data() {
                        w.write_all(&v.to_le_bytes())
                            .map_err(|e| SparError::io(ctx(), e))?;
                    }
                }
            }
        }
        w.flush().map_err(|e| SparError::io(ctx(), e))
    }

    pub fn read(path: &Path) -> Result<FeatureStore> {
        let file = File::open(path)
            .map_err(|e| SparError::io(format!("opening {}", path.display()), e))?;
        let mut r = BufReader::new(file);
        let ctx = || format!("reading {}", path.display());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| SparError::io(ctx(), e))?;
        if &magic != MAGIC {
            return Err(SparError::Format {
                format: "feature store",
                detail: format!("bad magic in {}", path.display()),
            });
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|e| SparError::io(ctx(), e))?;
        let version = u32::from_le_bytes(u32buf);
        if version != VERSION {
            return Err(SparError::Format {
                format: "feature store",
                detail: format!("unsupported version {version}"),
            });
        }
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf).map_err(|e| SparError::io(ctx(), e))?;
        let count = u64::from_le_bytes(u64buf) as usize;
        let mut records = Vec::with_capacity(count);
        for _ in 0..count {
            r.read_exact(&mut u32buf).map_err(|e| SparError::io(ctx(), e))?;
            let id_len = u32::from_le_bytes(u32buf) as usize;
            let mut id_bytes = vec![0u8; id_len];
            r.read_exact(&mut id_bytes).map_err(|e| SparError::io(ctx(), e))?;
            let image_id = String::from_utf8(id_bytes).map_err(|_| SparError::Format {
                format: "feature store",
                detail: "image id is not valid UTF-8".into(),
            })?;
            let mut dims = [0usize; 3];
            for d in dims.iter_mut() {
                r.read_exact(&mut u32buf).map_err(|e| SparError::io(ctx(), e))?;
                *d = u32::from_le_bytes(u32buf) as usize;
            }
            let mut tag = [0u8; 1];
            r.read_exact(&mut tag).map_err(|e| SparError::io(ctx(), e))?;
            let dtype = StoreDtype::from_tag(tag[0])?;
            let len = dims[0] * dims[1] * dims[2];
            let mut data = Vec::with_capacity(len);
            match dtype {
                StoreDtype::F32 => {
                    let mut buf = [0u8; 4];
                    for _ in 0..len {
                        r.read_exact(&mut buf).map_err(|e| SparError::io(ctx(), e))?;
                        data.push(f32::from_le_bytes(buf) as f64);
                    }
                }
                StoreDtype::F64 => {
                    let mut buf = [0u8; 8];
                    for _ in 0..len {
                        r.read_exact(&mut buf).map_err(|e| SparError::io(ctx(), e))?;
                        data.push(f64::from_le_bytes(buf));
                    }
                }
            }
            let features =
                FeatureGrid::from_vec(dims[0], dims[1], dims[2], data).map_err(|e| {
                    SparError::Format {
                        format: "feature store",
                        detail: format!("record `{image_id}`: {e}"),
                    }
                })?;
            records.push(FeatureStoreRecord {
                image_id,
                dtype,
                features,
            });
        }
        FeatureStore::from_records(records)
    }
}
